//! Independent oracles shared by the property tests and the acceptance run.
#![allow(dead_code, clippy::needless_range_loop)]

use duoloco::geometry::{canonicalize, so3_exp, so3_log, Pose};
use duoloco::grasp::{GraspModel, StackedWrench};
use duoloco::kinematics::{forward_kinematics, whole_body_jacobian};
use duoloco::qp::QpProblem;
use duoloco::{RobotModel, WholeBodyState};
use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3, Vector6};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random strictly convex QP with rows `lower <= Ax <= upper` that contain a
/// known interior-ish point. The first `min(n, m)` rows are variable bounds.
pub fn random_qp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> QpProblem {
    let mf = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = mf.transpose() * &mf + DMatrix::identity(n, n) * 0.1;
    let h = (&h + h.transpose()) * 0.5;
    let g = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let a = DMatrix::from_fn(m, n, |i, j| {
        if i < n {
            if i == j {
                1.0
            } else {
                0.0
            }
        } else {
            rng.random_range(-1.0..1.0)
        }
    });
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
    let ax0 = &a * &x0;
    let mut lower = DVector::zeros(m);
    let mut upper = DVector::zeros(m);
    for i in 0..m {
        lower[i] = ax0[i] - rng.random_range(0.0..1.0);
        upper[i] = ax0[i] + rng.random_range(0.0..1.0);
        match rng.random_range(0..10) {
            0 => lower[i] = f64::NEG_INFINITY,
            1 => upper[i] = f64::INFINITY,
            _ => {}
        }
    }
    QpProblem::new(h, g, a, lower, upper).unwrap()
}

/// Enumerates every assignment of each row to {free, at lower, at upper},
/// solves the equality-constrained KKT system for each, and keeps the best
/// primal-feasible candidate.
pub fn enumerate_optimum(p: &QpProblem) -> (DVector<f64>, f64) {
    let n = p.num_vars();
    let m = p.num_constraints();
    let mut best: Option<(DVector<f64>, f64)> = None;
    let total = 3usize.pow(m as u32);
    let mut states = vec![0u8; m];
    for code in 0..total {
        let mut c = code;
        let mut active = Vec::new();
        let mut valid = true;
        for i in 0..m {
            states[i] = (c % 3) as u8;
            c /= 3;
            match states[i] {
                1 if p.lower[i].is_finite() => active.push((i, p.lower[i])),
                2 if p.upper[i].is_finite() && p.upper[i] != p.lower[i] => {
                    active.push((i, p.upper[i]))
                }
                0 => {}
                _ => valid = false,
            }
        }
        if !valid || active.len() > n {
            continue;
        }
        let k = active.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&p.g));
        for (r, (i, b)) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = p.a[(*i, j)];
                kkt[(j, n + r)] = p.a[(*i, j)];
            }
            rhs[n + r] = *b;
        }
        let Some(sol) = kkt.full_piv_lu().solve(&rhs) else {
            continue;
        };
        let x = sol.rows(0, n).into_owned();
        let ax = &p.a * &x;
        let feasible = (0..m).all(|i| ax[i] >= p.lower[i] - 1e-9 && ax[i] <= p.upper[i] + 1e-9);
        if !feasible {
            continue;
        }
        let f = p.objective(&x);
        if best.as_ref().is_none_or(|(_, bf)| f < *bf) {
            best = Some((x, f));
        }
    }
    best.expect("feasible by construction")
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    let v = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    so3_exp(&(v * rng.random_range(0.0..3.1)))
}

pub fn random_pose(rng: &mut ChaCha8Rng, reach: f64) -> Pose {
    let t = Vector3::from_fn(|_, _| rng.random_range(-reach..reach));
    Pose::from_parts(random_rotation(rng), t)
}

/// Arbitrary base orientation and joint angles inside the limits.
pub fn random_whole_body_state(rng: &mut ChaCha8Rng, model: &RobotModel) -> WholeBodyState {
    let q = DVector::from_fn(model.dof(), |i, _| {
        let [lo, hi] = model.joint_limits[i];
        rng.random_range(lo..hi)
    });
    WholeBodyState::at_rest(random_pose(rng, 3.0), q)
}

/// Largest gap between the analytic Jacobian and central differences of
/// forward kinematics. Base columns perturb the pose in the base frame.
pub fn jacobian_fd_error(model: &RobotModel, state: &WholeBodyState) -> f64 {
    let j = whole_body_jacobian(model, state).unwrap();
    let h = 1e-6;
    let fk = |s: &WholeBodyState| forward_kinematics(model, s).unwrap();
    let mut worst = 0.0f64;
    for c in 0..j.ncols() {
        let (mut plus, mut minus) = (state.clone(), state.clone());
        if c < 6 {
            let mut d = Vector6::zeros();
            d[c] = h;
            let step = |s: f64| {
                Pose::from_parts(
                    so3_exp(&(d.fixed_rows::<3>(3) * s)),
                    d.fixed_rows::<3>(0) * s,
                )
            };
            plus.base_pose = state.base_pose.compose(&step(1.0));
            minus.base_pose = state.base_pose.compose(&step(-1.0));
        } else {
            plus.q_arm[c - 6] += h;
            minus.q_arm[c - 6] -= h;
        }
        let (ep, em) = (fk(&plus), fk(&minus));
        let lin = (ep.translation() - em.translation()) / (2.0 * h);
        let ang = so3_log(&(ep.rotation() * em.rotation().inverse())) / (2.0 * h);
        worst = worst
            .max((lin - j.fixed_view::<3, 1>(0, c)).amax())
            .max((ang - j.fixed_view::<3, 1>(3, c)).amax());
    }
    worst
}

/// Object pose with two contacts at random lever arms (10 cm to 1 m).
pub fn random_grasp(rng: &mut ChaCha8Rng) -> GraspModel {
    let object = random_pose(rng, 2.0);
    let contact = |rng: &mut ChaCha8Rng| {
        let dir = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
        let local = Pose::from_parts(random_rotation(rng), dir * rng.random_range(0.1..1.0));
        object.compose(&local)
    };
    let c = [contact(rng), contact(rng)];
    GraspModel::new(object, c).unwrap()
}

/// `max(|G G+ G - G|, |P^2 - P|, |G P f|)` for a random stacked wrench `f`.
pub fn grasp_identity_error(rng: &mut ChaCha8Rng, grasp: &GraspModel) -> f64 {
    let g = &grasp.g;
    let p = grasp.projector();
    let f = StackedWrench::from_fn(|_, _| rng.random_range(-50.0..50.0));
    let a = (g * grasp.g_pinv * g - g).amax();
    let b = (p * p - p).amax();
    let c = (g * grasp.decompose(&f).internal).amax();
    a.max(b).max(c)
}

/// Position and quaternion distance between canonicalizations before and
/// after a global transform `g`.
pub fn canonical_invariance_error(g: &Pose, t_ref: &Pose, t_world: &Pose) -> (f64, f64) {
    let a = canonicalize(t_ref, t_world);
    let b = canonicalize(&g.compose(t_ref), &g.compose(t_world));
    let dp = (a.translation() - b.translation()).norm();
    let (qa, qb) = (a.rotation().coords, b.rotation().coords);
    let dq = (qa - qb).norm().min((qa + qb).norm());
    (dp, dq)
}
