//! Closed-chain force model for two rigid grasps on one object.
//!
//! Contact wrenches are 6-vectors `(force; torque)` exerted by each gripper on
//! the object, expressed in the object frame and stacked as
//! `f_c = [f_c1; f_c2]`. The grasp matrix maps them to the net object wrench.

use nalgebra::{Matrix3, Matrix6, SMatrix, SVector, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

use crate::geometry::Pose;

pub type GraspMatrix = SMatrix<f64, 6, 12>;
pub type StackedWrench = SVector<f64, 12>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraspError {
    #[error("contact {0} coincides with the object origin")]
    DegenerateGeometry(usize),
    #[error("grasp matrix is rank deficient (rank {0})")]
    RankDeficient(usize),
    #[error("admittance damping must be positive (entry {0})")]
    NonPositiveDamping(usize),
}

/// `[I 0; [r]x I]` for a contact at lever arm `r` from the object origin.
pub fn contact_block(r: &Vector3<f64>) -> Matrix6<f64> {
    let mut b = Matrix6::identity();
    b.fixed_view_mut::<3, 3>(3, 0).copy_from(&r.cross_matrix());
    b
}

pub fn grasp_matrix(object_pose: &Pose, contacts: &[Pose; 2]) -> Result<GraspMatrix, GraspError> {
    let inv = object_pose.inverse();
    let mut g = GraspMatrix::zeros();
    for (i, c) in contacts.iter().enumerate() {
        let r = inv.transform_point(c.translation());
        if r.norm() < 1e-9 {
            return Err(GraspError::DegenerateGeometry(i));
        }
        g.fixed_view_mut::<6, 6>(0, 6 * i)
            .copy_from(&contact_block(&r));
    }
    Ok(g)
}

/// SVD pseudoinverse with singular values below `1e-8 * sigma_max` dropped.
/// Returns the pseudoinverse and the numerical rank.
pub fn pseudoinverse(g: &GraspMatrix) -> (SMatrix<f64, 12, 6>, usize) {
    let svd = g.svd(true, true);
    let u = svd.u.expect("requested u");
    let v_t = svd.v_t.expect("requested v_t");
    let s_max = svd.singular_values.max();
    let cutoff = 1e-8 * s_max;
    let mut pinv = SMatrix::<f64, 12, 6>::zeros();
    let mut rank = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            rank += 1;
            pinv += v_t.row(k).transpose() * u.column(k).transpose() / s;
        }
    }
    (pinv, rank)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WrenchSplit {
    /// Net object wrench `G f_c`.
    pub external: Vector6<f64>,
    /// Null-space component `(I - G^+ G) f_c`.
    pub internal: StackedWrench,
}

pub fn decompose_wrench(g: &GraspMatrix, f_c: &StackedWrench) -> Result<WrenchSplit, GraspError> {
    let (pinv, rank) = pseudoinverse(g);
    if rank < 6 {
        return Err(GraspError::RankDeficient(rank));
    }
    Ok(split_with(g, &pinv, f_c))
}

fn split_with(g: &GraspMatrix, pinv: &SMatrix<f64, 12, 6>, f_c: &StackedWrench) -> WrenchSplit {
    let external = g * f_c;
    let internal = f_c - pinv * external;
    WrenchSplit { external, internal }
}

/// Object frame, its two grasp frames, and the cached decomposition operators.
#[derive(Debug, Clone, PartialEq)]
pub struct GraspModel {
    pub object_pose: Pose,
    pub contact_poses: [Pose; 2],
    pub g: GraspMatrix,
    pub g_pinv: SMatrix<f64, 12, 6>,
}

impl GraspModel {
    pub fn new(object_pose: Pose, contact_poses: [Pose; 2]) -> Result<Self, GraspError> {
        let g = grasp_matrix(&object_pose, &contact_poses)?;
        let (g_pinv, rank) = pseudoinverse(&g);
        if rank < 6 {
            return Err(GraspError::RankDeficient(rank));
        }
        Ok(Self {
            object_pose,
            contact_poses,
            g,
            g_pinv,
        })
    }

    pub fn projector(&self) -> SMatrix<f64, 12, 12> {
        SMatrix::<f64, 12, 12>::identity() - self.g_pinv * self.g
    }

    pub fn decompose(&self, f_c: &StackedWrench) -> WrenchSplit {
        split_with(&self.g, &self.g_pinv, f_c)
    }

    /// Unit vector from contact 1 to contact 2 in the object frame.
    pub fn contact_axis(&self) -> Vector3<f64> {
        let inv = self.object_pose.inverse();
        let r1 = inv.transform_point(self.contact_poses[0].translation());
        let r2 = inv.transform_point(self.contact_poses[1].translation());
        (r2 - r1).normalize()
    }

    /// Pure squeeze of `magnitude` newtons along the inter-contact axis:
    /// each gripper pushes toward the other, with zero torque.
    pub fn squeeze(&self, magnitude: f64) -> StackedWrench {
        let axis = self.contact_axis() * magnitude;
        let mut f = StackedWrench::zeros();
        f.fixed_rows_mut::<3>(0).copy_from(&axis);
        f.fixed_rows_mut::<3>(6).copy_from(&-axis);
        f
    }
}

/// Yield velocities `K_d^-1 (f_int_des - f_int)` per gripper, in the frame
/// of the wrenches (object frame). `damping` is the diagonal of `K_d`.
pub fn admittance_correction(
    f_int: &StackedWrench,
    f_int_des: &StackedWrench,
    damping: &StackedWrench,
) -> Result<[Vector6<f64>; 2], GraspError> {
    if let Some(i) = damping.iter().position(|d| !(*d > 0.0)) {
        return Err(GraspError::NonPositiveDamping(i));
    }
    let v = (f_int_des - f_int).component_div(damping);
    Ok([
        v.fixed_rows::<6>(0).into_owned(),
        v.fixed_rows::<6>(6).into_owned(),
    ])
}

/// Rotates object-frame yield twists into the world frame.
pub fn corrections_to_world(
    corr: &[Vector6<f64>; 2],
    object_rotation: &UnitQuaternion<f64>,
) -> [Vector6<f64>; 2] {
    let r: Matrix3<f64> = object_rotation.to_rotation_matrix().into_inner();
    corr.map(|c| {
        let lin = r * c.fixed_rows::<3>(0);
        let ang = r * c.fixed_rows::<3>(3);
        Vector6::new(lin.x, lin.y, lin.z, ang.x, ang.y, ang.z)
    })
}
