//! Floating-base serial chain: forward kinematics, whole-body Jacobian and
//! sphere-based clearance.
//!
//! The whole-body velocity is `nu = [v_b, w_b, dq_arm]` with the base twist
//! expressed in the base frame. The kinematic state vector used by the
//! planner is `x = [p_b, (roll, pitch, yaw), q_arm]`.

use nalgebra::{DMatrix, DVector, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{euler_from_rotation, rotation_from_euler, Pose, Twist};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("dimension mismatch: model has {expected} arm joints, state has {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid robot model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmJoint {
    pub axis: Vector3<f64>,
    pub parent_offset: Pose,
}

/// Frame a collision sphere is rigidly attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SphereFrame {
    Base,
    /// Frame after the rotation of arm joint `i` (zero-based).
    Link(usize),
    EndEffector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollisionSphere {
    pub attached_frame: SphereFrame,
    pub center: Vector3<f64>,
    pub radius: f64,
}

/// A sphere in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sphere {
    pub center: Vector3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotModel {
    pub arm_joints: Vec<ArmJoint>,
    pub base_to_arm_mount: Pose,
    pub ee_offset: Pose,
    pub joint_limits: Vec<[f64; 2]>,
    pub velocity_limits: Vec<f64>,
    pub collision_spheres: Vec<CollisionSphere>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gripper {
    #[default]
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WholeBodyState {
    pub base_pose: Pose,
    pub base_twist: Twist,
    pub q_arm: DVector<f64>,
    pub dq_arm: DVector<f64>,
    pub gripper: Gripper,
}

impl WholeBodyState {
    pub fn at_rest(base_pose: Pose, q_arm: DVector<f64>) -> Self {
        let n = q_arm.len();
        Self {
            base_pose,
            base_twist: Twist::zero(),
            q_arm,
            dq_arm: DVector::zeros(n),
            gripper: Gripper::Open,
        }
    }

    /// Kinematic state vector `[p_b, roll, pitch, yaw, q_arm]`.
    pub fn kinematic_vector(&self) -> DVector<f64> {
        let n = self.q_arm.len();
        let mut x = DVector::zeros(6 + n);
        x.fixed_rows_mut::<3>(0)
            .copy_from(self.base_pose.translation());
        x.fixed_rows_mut::<3>(3)
            .copy_from(&euler_from_rotation(self.base_pose.rotation()));
        x.rows_mut(6, n).copy_from(&self.q_arm);
        x
    }

    /// Overwrites base pose and arm angles from a kinematic state vector.
    pub fn set_kinematic_vector(&mut self, x: &DVector<f64>) {
        self.base_pose = base_pose_from_vector(x);
        let n = x.len() - 6;
        self.q_arm = x.rows(6, n).into_owned();
    }
}

pub fn base_pose_from_vector(x: &DVector<f64>) -> Pose {
    let euler = Vector3::new(x[3], x[4], x[5]);
    Pose::from_parts(rotation_from_euler(&euler), Vector3::new(x[0], x[1], x[2]))
}

/// World frames along the chain for one configuration.
#[derive(Debug, Clone)]
pub struct ChainFrames {
    pub base: Pose,
    /// Frame of each joint after its rotation.
    pub joints: Vec<Pose>,
    pub ee: Pose,
}

impl RobotModel {
    pub fn dof(&self) -> usize {
        self.arm_joints.len()
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        let n = self.dof();
        if self.joint_limits.len() != n || self.velocity_limits.len() != n {
            return Err(KinematicsError::InvalidModel(format!(
                "{n} joints but {} joint limits and {} velocity limits",
                self.joint_limits.len(),
                self.velocity_limits.len()
            )));
        }
        for (i, j) in self.arm_joints.iter().enumerate() {
            if (j.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(KinematicsError::InvalidModel(format!(
                    "joint {i} axis is not unit-norm"
                )));
            }
        }
        for (i, [lo, hi]) in self.joint_limits.iter().enumerate() {
            if !(lo < hi) {
                return Err(KinematicsError::InvalidModel(format!(
                    "joint {i} has q_min >= q_max"
                )));
            }
        }
        for (i, v) in self.velocity_limits.iter().enumerate() {
            if !(*v > 0.0) {
                return Err(KinematicsError::InvalidModel(format!(
                    "joint {i} velocity limit must be positive"
                )));
            }
        }
        for (i, s) in self.collision_spheres.iter().enumerate() {
            if !(s.radius > 0.0) {
                return Err(KinematicsError::InvalidModel(format!(
                    "collision sphere {i} radius must be positive"
                )));
            }
            if let SphereFrame::Link(k) = s.attached_frame {
                if k >= n {
                    return Err(KinematicsError::InvalidModel(format!(
                        "collision sphere {i} attached to missing link {k}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_dims(&self, q: &DVector<f64>) -> Result<(), KinematicsError> {
        if q.len() != self.dof() {
            return Err(KinematicsError::DimensionMismatch {
                expected: self.dof(),
                actual: q.len(),
            });
        }
        Ok(())
    }

    pub fn chain_frames(
        &self,
        base: &Pose,
        q: &DVector<f64>,
    ) -> Result<ChainFrames, KinematicsError> {
        self.check_dims(q)?;
        let mut frame = base.compose(&self.base_to_arm_mount);
        let mut joints = Vec::with_capacity(self.dof());
        for (joint, &angle) in self.arm_joints.iter().zip(q.iter()) {
            let axis = Unit::new_unchecked(joint.axis);
            let rot = Pose::from_rotation(UnitQuaternion::from_axis_angle(&axis, angle));
            frame = frame.compose(&joint.parent_offset).compose(&rot);
            joints.push(frame);
        }
        let ee = frame.compose(&self.ee_offset);
        Ok(ChainFrames {
            base: *base,
            joints,
            ee,
        })
    }

    pub fn clamp_joints(&self, q: &mut DVector<f64>) {
        for (v, [lo, hi]) in q.iter_mut().zip(self.joint_limits.iter()) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// Approximate 6-DoF arm (ARX5-like link lengths) on a quadruped trunk.
    /// Parameters are an engineering approximation, not manufacturer data.
    pub fn quadruped_arm() -> Self {
        let pose = |x: f64, y: f64, z: f64| Pose::from_translation(Vector3::new(x, y, z));
        let joint = |axis: Vector3<f64>, offset: Pose| ArmJoint {
            axis,
            parent_offset: offset,
        };
        Self {
            arm_joints: vec![
                joint(Vector3::z(), pose(0.0, 0.0, 0.06)),
                joint(Vector3::y(), pose(0.0, 0.0, 0.06)),
                joint(Vector3::y(), pose(0.26, 0.0, 0.0)),
                joint(Vector3::y(), pose(0.23, 0.0, 0.0)),
                joint(Vector3::z(), pose(0.06, 0.0, 0.0)),
                joint(Vector3::x(), pose(0.04, 0.0, 0.0)),
            ],
            base_to_arm_mount: pose(0.15, 0.0, 0.10),
            ee_offset: pose(0.08, 0.0, 0.0),
            joint_limits: vec![
                [-2.6, 2.6],
                [-2.5, 0.5],
                [-0.2, 2.9],
                [-1.6, 1.6],
                [-1.6, 1.6],
                [-2.8, 2.8],
            ],
            velocity_limits: vec![3.0; 6],
            collision_spheres: vec![
                CollisionSphere {
                    attached_frame: SphereFrame::Base,
                    center: Vector3::new(0.15, 0.0, 0.0),
                    radius: 0.2,
                },
                CollisionSphere {
                    attached_frame: SphereFrame::Base,
                    center: Vector3::new(-0.15, 0.0, 0.0),
                    radius: 0.2,
                },
            ],
        }
    }

    /// Nominal bent-elbow posture for [`RobotModel::quadruped_arm`].
    pub fn quadruped_arm_posture() -> DVector<f64> {
        DVector::from_vec(vec![0.0, -0.8, 1.6, -0.8, 0.0, 0.0])
    }
}

pub fn forward_kinematics(
    model: &RobotModel,
    state: &WholeBodyState,
) -> Result<Pose, KinematicsError> {
    Ok(model.chain_frames(&state.base_pose, &state.q_arm)?.ee)
}

/// 6x(6+n) map from `nu` to the end-effector twist in the world frame,
/// rows ordered (linear; angular).
pub fn whole_body_jacobian(
    model: &RobotModel,
    state: &WholeBodyState,
) -> Result<DMatrix<f64>, KinematicsError> {
    let frames = model.chain_frames(&state.base_pose, &state.q_arm)?;
    Ok(jacobian_from_frames(model, &frames))
}

pub fn jacobian_from_frames(model: &RobotModel, frames: &ChainFrames) -> DMatrix<f64> {
    let n = model.dof();
    let mut j = DMatrix::zeros(6, 6 + n);
    let rb = frames.base.rotation_matrix();
    let p_ee = *frames.ee.translation();
    let r = p_ee - frames.base.translation();

    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&rb);
    j.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-r.cross_matrix() * rb));
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&rb);

    for (i, (joint, frame)) in model
        .arm_joints
        .iter()
        .zip(frames.joints.iter())
        .enumerate()
    {
        let axis = frame.rotation() * joint.axis;
        let lin = axis.cross(&(p_ee - frame.translation()));
        j.fixed_view_mut::<3, 1>(0, 6 + i).copy_from(&lin);
        j.fixed_view_mut::<3, 1>(3, 6 + i).copy_from(&axis);
    }
    j
}

/// Yoshikawa manipulability of the arm-only columns.
pub fn arm_manipulability(jacobian: &DMatrix<f64>) -> f64 {
    let arm = jacobian.columns(6, jacobian.ncols() - 6);
    let m = arm * arm.transpose();
    m.determinant().max(0.0).sqrt()
}

/// World-frame centers of all collision spheres.
pub fn sphere_centers(
    model: &RobotModel,
    base: &Pose,
    q: &DVector<f64>,
) -> Result<Vec<Sphere>, KinematicsError> {
    let frames = model.chain_frames(base, q)?;
    Ok(model
        .collision_spheres
        .iter()
        .map(|s| {
            let frame = match s.attached_frame {
                SphereFrame::Base => &frames.base,
                SphereFrame::Link(i) => &frames.joints[i],
                SphereFrame::EndEffector => &frames.ee,
            };
            Sphere {
                center: frame.transform_point(&s.center),
                radius: s.radius,
            }
        })
        .collect())
}

fn spheres_from_vector(model: &RobotModel, x: &DVector<f64>) -> Vec<Sphere> {
    let n = model.dof();
    let q = x.rows(6, n).into_owned();
    sphere_centers(model, &base_pose_from_vector(x), &q).expect("state vector sized from model")
}

/// Central-difference Jacobians (3 x (6+n)) of every sphere center with
/// respect to the kinematic state vector.
pub fn sphere_center_jacobians(model: &RobotModel, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
    const STEP: f64 = 1e-6;
    let dim = x.len();
    let count = model.collision_spheres.len();
    let mut out = vec![DMatrix::zeros(3, dim); count];
    let mut xp = x.clone();
    for k in 0..dim {
        xp[k] = x[k] + STEP;
        let plus = spheres_from_vector(model, &xp);
        xp[k] = x[k] - STEP;
        let minus = spheres_from_vector(model, &xp);
        xp[k] = x[k];
        for (s, jac) in out.iter_mut().enumerate() {
            let d = (plus[s].center - minus[s].center) / (2.0 * STEP);
            jac.fixed_view_mut::<3, 1>(0, k).copy_from(&d);
        }
    }
    out
}

/// What the own sphere set is checked against.
#[derive(Debug, Clone, Copy)]
pub enum CollisionTarget<'a> {
    Robot {
        model: &'a RobotModel,
        state: &'a WholeBodyState,
    },
    Spheres(&'a [Sphere]),
}

/// Closest sphere pair and the barrier value it defines.
#[derive(Debug, Clone, PartialEq)]
pub struct Clearance {
    /// Minimum surface distance minus margin (m); `+inf` when either set is empty.
    pub h: f64,
    /// Gradient of `h` with respect to the own kinematic state vector.
    pub gradient: DVector<f64>,
    /// Indices of the closest (own, other) pair.
    pub pair: Option<(usize, usize)>,
}

pub fn sphere_gap(a: &Sphere, b: &Sphere) -> f64 {
    (a.center - b.center).norm() - a.radius - b.radius
}

fn min_pair(own: &[Sphere], other: &[Sphere]) -> Option<(usize, usize, f64)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for (i, a) in own.iter().enumerate() {
        for (j, b) in other.iter().enumerate() {
            let d = sphere_gap(a, b);
            if best.is_none_or(|(_, _, bd)| d < bd) {
                best = Some((i, j, d));
            }
        }
    }
    best
}

pub fn target_spheres(target: &CollisionTarget<'_>) -> Result<Vec<Sphere>, KinematicsError> {
    match target {
        CollisionTarget::Robot { model, state } => {
            sphere_centers(model, &state.base_pose, &state.q_arm)
        }
        CollisionTarget::Spheres(s) => Ok(s.to_vec()),
    }
}

/// Minimum pairwise sphere-surface distance minus `margin`, with the
/// gradient taken by finite differences of the own sphere centers.
pub fn collision_distance(
    model: &RobotModel,
    state: &WholeBodyState,
    other: CollisionTarget<'_>,
    margin: f64,
) -> Result<Clearance, KinematicsError> {
    let own = sphere_centers(model, &state.base_pose, &state.q_arm)?;
    let others = target_spheres(&other)?;
    let x = state.kinematic_vector();
    let Some((i, j, d)) = min_pair(&own, &others) else {
        return Ok(Clearance {
            h: f64::INFINITY,
            gradient: DVector::zeros(x.len()),
            pair: None,
        });
    };
    let diff = own[i].center - others[j].center;
    let normal = if diff.norm() > 1e-12 {
        diff.normalize()
    } else {
        Vector3::x()
    };
    let jac = &sphere_center_jacobians(model, &x)[i];
    let gradient = jac.transpose() * normal;
    Ok(Clearance {
        h: d - margin,
        gradient,
        pair: Some((i, j)),
    })
}
