//! Proactive layer: receding-horizon kinematic MPC over base velocity and
//! arm joint rates, with discrete control-barrier constraints
//! `h(x_{k+1}) >= (1 - gamma) h(x_k)` against the partner and obstacles.
//!
//! Solved by Gauss-Newton SQP on the condensed problem: the rollout and the
//! barrier are linearized about the current control sequence, the step is a
//! dense QP from [`crate::qp`], and a backtracking line search on an exact
//! penalty merit accepts it.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{pose_error, so3_right_jacobian_inv, Pose};
use crate::kinematics::{
    base_pose_from_vector, jacobian_from_frames, sphere_center_jacobians, sphere_centers,
    sphere_gap, CollisionTarget, RobotModel, Sphere, WholeBodyState,
};
use crate::qp::{QpError, QpProblem, QpSettings, QpSolver, QpStatus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("base pitch {0:.4} rad is within 1e-3 of +-pi/2; Euler-rate map is singular")]
    GimbalLock(f64),
    #[error("initial state violates the safe set (h = {0:.4} m)")]
    InfeasibleStart(f64),
    #[error("expected {expected} reference poses, got {actual}")]
    ReferenceLength { expected: usize, actual: usize },
    #[error("parameter error: {0}")]
    Params(String),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcParams {
    pub horizon: usize,
    pub dt: f64,
    /// Weights on the end-effector error (3 position, 3 orientation).
    pub q_ee: [f64; 6],
    pub q_posture: Vec<f64>,
    pub r: Vec<f64>,
    pub gamma: f64,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub sqp_max_iter: usize,
    pub sqp_tol: f64,
    pub qp_tol: f64,
    pub qp_tol_rel: f64,
    pub qp_max_iter: usize,
    /// Safety margin subtracted from sphere surface distances (m).
    pub margin: f64,
    /// Extra distance the plan keeps beyond `margin`, absorbing tracking
    /// error between replans (m). The start check and the reported barrier
    /// use `margin` alone.
    pub tightening: f64,
    /// Sphere pairs farther apart than this along the current trajectory
    /// get no barrier row (m).
    pub activation_distance: f64,
    /// Joint-limit rows are only added where the trajectory comes this close
    /// to a limit (rad).
    pub joint_limit_activation: f64,
}

impl Default for MpcParams {
    fn default() -> Self {
        Self::for_arm(6, &[3.0; 6])
    }
}

impl MpcParams {
    /// Defaults for an `n`-joint arm on a planar-commanded base: vertical
    /// velocity, roll rate and pitch rate are pinned to zero.
    pub fn for_arm(n: usize, joint_velocity_limits: &[f64]) -> Self {
        let mut u_min = vec![-0.8, -0.8, 0.0, 0.0, 0.0, -1.0];
        let mut u_max = vec![0.8, 0.8, 0.0, 0.0, 0.0, 1.0];
        for v in joint_velocity_limits.iter().take(n) {
            u_min.push(-v);
            u_max.push(*v);
        }
        let mut r = vec![1.0, 1.0, 1.0, 0.5, 0.5, 0.5];
        r.extend(std::iter::repeat_n(0.2, n));
        Self {
            horizon: 20,
            dt: 0.1,
            q_ee: [100.0, 100.0, 100.0, 10.0, 10.0, 10.0],
            q_posture: vec![2.0; n],
            r,
            gamma: 0.3,
            u_min,
            u_max,
            sqp_max_iter: 10,
            sqp_tol: 1e-4,
            qp_tol: 1e-5,
            qp_tol_rel: 1e-4,
            qp_max_iter: 4000,
            margin: 0.05,
            tightening: 0.02,
            activation_distance: 0.6,
            joint_limit_activation: 0.5,
        }
    }

    pub fn validate(&self, n: usize) -> Result<(), MpcError> {
        let m = 6 + n;
        let err = |s: String| Err(MpcError::Params(s));
        if self.horizon < 1 {
            return err("horizon must be >= 1".into());
        }
        if !(self.dt > 0.0) {
            return err("dt must be positive".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return err("gamma must lie in (0, 1]".into());
        }
        if self.q_posture.len() != n
            || self.r.len() != m
            || self.u_min.len() != m
            || self.u_max.len() != m
        {
            return err(format!(
                "weight/bound vectors must have {n} posture and {m} control entries"
            ));
        }
        if self
            .q_ee
            .iter()
            .chain(self.q_posture.iter())
            .chain(self.r.iter())
            .any(|w| !(*w >= 0.0))
        {
            return err("weights must be non-negative".into());
        }
        if !(self.margin >= 0.0 && self.tightening >= 0.0) {
            return err("margin and tightening must be non-negative".into());
        }
        if self
            .u_min
            .iter()
            .zip(self.u_max.iter())
            .any(|(lo, hi)| !(lo <= hi))
        {
            return err("u_min must not exceed u_max".into());
        }
        Ok(())
    }
}

/// Static obstacles plus the partner robot's spheres, both in world frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scene {
    pub obstacles: Vec<Sphere>,
    pub partner: Vec<Sphere>,
}

impl Scene {
    pub fn others(&self) -> Vec<Sphere> {
        self.obstacles
            .iter()
            .chain(self.partner.iter())
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcPlan {
    /// Row `k` is `u_k = [v_b, w_b, dq_arm]`.
    pub controls: DMatrix<f64>,
    /// `x_0 .. x_N` as kinematic state vectors `[p_b, rpy, q_arm]`.
    pub predicted_states: Vec<DVector<f64>>,
    /// Nonlinear barrier value at each predicted state.
    pub barrier_trace: Vec<f64>,
    pub converged: bool,
    pub sqp_iterations: usize,
    /// Merit value after each accepted step (first entry is the start).
    pub merit_history: Vec<f64>,
}

impl MpcPlan {
    pub fn control(&self, k: usize) -> DVector<f64> {
        self.controls
            .row(k.min(self.controls.nrows() - 1))
            .transpose()
    }
}

fn euler_rate_inverse(euler: &Vector3<f64>) -> Result<Matrix3<f64>, MpcError> {
    let (roll, pitch) = (euler.x, euler.y);
    if (pitch.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-3 {
        return Err(MpcError::GimbalLock(pitch));
    }
    let (sr, cr) = roll.sin_cos();
    let (tp, cp) = (pitch.tan(), pitch.cos());
    Ok(Matrix3::new(
        1.0,
        sr * tp,
        cr * tp,
        0.0,
        cr,
        -sr,
        0.0,
        sr / cp,
        cr / cp,
    ))
}

/// `E(rpy)`: body angular velocity from ZYX Euler rates.
fn euler_rate_map(euler: &Vector3<f64>) -> Matrix3<f64> {
    let (sr, cr) = euler.x.sin_cos();
    let (sp, cp) = euler.y.sin_cos();
    Matrix3::new(1.0, 0.0, -sp, 0.0, cr, sr * cp, 0.0, -sr, cr * cp)
}

/// Explicit Euler step of the floating-base kinematics. Base velocities are
/// in the base frame: `p += R v dt`, `rpy += E^-1 w dt`, `q += dq dt`.
pub fn rollout_dynamics(
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>, MpcError> {
    let euler = Vector3::new(x[3], x[4], x[5]);
    let e_inv = euler_rate_inverse(&euler)?;
    let rot = base_pose_from_vector(x).rotation_matrix();
    let v = Vector3::new(u[0], u[1], u[2]);
    let w = Vector3::new(u[3], u[4], u[5]);
    let mut next = x.clone();
    let dp = rot * v * dt;
    let de = e_inv * w * dt;
    for i in 0..3 {
        next[i] += dp[i];
        next[3 + i] += de[i];
    }
    let n = x.len() - 6;
    for i in 0..n {
        next[6 + i] += u[6 + i] * dt;
    }
    Ok(next)
}

/// Barrier value `h` of a whole-body state against the scene.
pub fn barrier_value(
    model: &RobotModel,
    state: &WholeBodyState,
    scene: &Scene,
    margin: f64,
) -> f64 {
    let others = scene.others();
    crate::kinematics::collision_distance(model, state, CollisionTarget::Spheres(&others), margin)
        .map(|c| c.h)
        .unwrap_or(f64::INFINITY)
}

/// Margin-adjusted gaps of every (own sphere, other sphere) pair, row-major
/// in the own sphere index.
fn pair_gaps(model: &RobotModel, x: &DVector<f64>, others: &[Sphere], margin: f64) -> Vec<f64> {
    let own = own_spheres(model, x);
    own.iter()
        .flat_map(|a| others.iter().map(move |b| sphere_gap(a, b) - margin))
        .collect()
}

fn barrier_of_vector(model: &RobotModel, x: &DVector<f64>, others: &[Sphere], margin: f64) -> f64 {
    pair_gaps(model, x, others, margin)
        .into_iter()
        .fold(f64::INFINITY, f64::min)
}

fn own_spheres(model: &RobotModel, x: &DVector<f64>) -> Vec<Sphere> {
    let n = model.dof();
    sphere_centers(model, &base_pose_from_vector(x), &x.rows(6, n).into_owned())
        .expect("sized from model")
}

struct Problem<'a> {
    model: &'a RobotModel,
    params: &'a MpcParams,
    reference: &'a [Pose],
    posture: &'a DVector<f64>,
    others: Vec<Sphere>,
    free: Vec<usize>,
    x0: DVector<f64>,
}

struct Trajectory {
    states: Vec<DVector<f64>>,
    cost: f64,
    violation: f64,
    /// Pair gaps at each state, see [`pair_gaps`].
    gaps: Vec<Vec<f64>>,
}

impl Trajectory {
    fn barrier(&self) -> Vec<f64> {
        self.gaps
            .iter()
            .map(|g| g.iter().copied().fold(f64::INFINITY, f64::min))
            .collect()
    }
}

impl Problem<'_> {
    fn nx(&self) -> usize {
        6 + self.model.dof()
    }

    fn residual(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        let n = self.model.dof();
        let frames = self
            .model
            .chain_frames(&base_pose_from_vector(x), &x.rows(6, n).into_owned())
            .expect("sized");
        let e = pose_error(&self.reference[k], &frames.ee);
        let mut r = DVector::zeros(6 + n);
        for i in 0..6 {
            r[i] = e[i] * self.params.q_ee[i].sqrt();
        }
        for i in 0..n {
            r[6 + i] = (x[6 + i] - self.posture[i]) * self.params.q_posture[i].sqrt();
        }
        r
    }

    fn evaluate(&self, controls: &DMatrix<f64>) -> Result<Trajectory, MpcError> {
        let p = self.params;
        let mut states = Vec::with_capacity(p.horizon + 1);
        states.push(self.x0.clone());
        let mut cost = 0.0;
        let mut violation = 0.0;
        let mut gaps = Vec::with_capacity(p.horizon + 1);
        let margin = p.margin + p.tightening;
        gaps.push(pair_gaps(self.model, &self.x0, &self.others, margin));
        for k in 0..p.horizon {
            let u = controls.row(k).transpose();
            let next = rollout_dynamics(&states[k], &u, p.dt)?;
            cost += self.residual(k, &next).norm_squared();
            cost += u
                .iter()
                .zip(p.r.iter())
                .map(|(v, w)| w * v * v)
                .sum::<f64>();
            let g = pair_gaps(self.model, &next, &self.others, margin);
            for (now, before) in g.iter().zip(gaps[k].iter()) {
                violation += ((1.0 - p.gamma) * before - now).max(0.0);
            }
            for (i, [lo, hi]) in self.model.joint_limits.iter().enumerate() {
                let q = next[6 + i];
                violation += (lo - q).max(0.0) + (q - hi).max(0.0);
            }
            gaps.push(g);
            states.push(next);
        }
        Ok(Trajectory {
            states,
            cost,
            violation,
            gaps,
        })
    }

    /// State Jacobian `df/dx` and the free-column control Jacobian `df/du`.
    fn linearize_step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), MpcError> {
        let nx = self.nx();
        let dt = self.params.dt;
        let mut a = DMatrix::identity(nx, nx);
        const STEP: f64 = 1e-7;
        let mut xp = x.clone();
        for k in 3..6 {
            xp[k] = x[k] + STEP;
            let plus = rollout_dynamics(&xp, u, dt)?;
            xp[k] = x[k] - STEP;
            let minus = rollout_dynamics(&xp, u, dt)?;
            xp[k] = x[k];
            let col = (plus - minus) / (2.0 * STEP);
            a.column_mut(k).copy_from(&col);
        }
        let euler = Vector3::new(x[3], x[4], x[5]);
        let rot = base_pose_from_vector(x).rotation_matrix();
        let e_inv = euler_rate_inverse(&euler)?;
        let mut b_full = DMatrix::zeros(nx, nx);
        b_full.fixed_view_mut::<3, 3>(0, 0).copy_from(&(rot * dt));
        b_full.fixed_view_mut::<3, 3>(3, 3).copy_from(&(e_inv * dt));
        for i in 6..nx {
            b_full[(i, i)] = dt;
        }
        let b = b_full.select_columns(self.free.iter());
        Ok((a, b))
    }

    /// Weighted residual Jacobian with respect to the kinematic state.
    fn residual_jacobian(&self, k: usize, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.model.dof();
        let nx = self.nx();
        let frames = self
            .model
            .chain_frames(&base_pose_from_vector(x), &x.rows(6, n).into_owned())
            .expect("sized");
        let j_nu = jacobian_from_frames(self.model, &frames);
        // d nu / d x_dot = blockdiag(R^T, E(rpy), I)
        let rot = frames.base.rotation_matrix();
        let euler = Vector3::new(x[3], x[4], x[5]);
        let mut m = DMatrix::identity(nx, nx);
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot.transpose());
        m.fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&euler_rate_map(&euler));
        let j_x = j_nu * m;

        let e = pose_error(&self.reference[k], &frames.ee);
        let phi = Vector3::new(e[3], e[4], e[5]);
        let jr_inv = so3_right_jacobian_inv(&phi);
        let mut out = DMatrix::zeros(6 + n, nx);
        let lin = -j_x.rows(0, 3);
        let ang = -(jr_inv * j_x.fixed_rows::<3>(3));
        out.rows_mut(0, 3).copy_from(&lin);
        out.rows_mut(3, 3).copy_from(&ang);
        for i in 0..6 {
            out.row_mut(i).scale_mut(self.params.q_ee[i].sqrt());
        }
        for i in 0..n {
            out[(6 + i, 6 + i)] = self.params.q_posture[i].sqrt();
        }
        out
    }

    fn merit(&self, t: &Trajectory) -> f64 {
        t.cost + 1e3 * t.violation
    }
}

/// Stateful wrapper keeping the previous plan and QP workspace for warm starts.
#[derive(Debug, Clone)]
pub struct MpcSolver {
    pub params: MpcParams,
    qp: QpSolver,
    previous: Option<DMatrix<f64>>,
}

impl MpcSolver {
    pub fn new(params: MpcParams) -> Self {
        let qp = QpSolver::new(QpSettings {
            tol: params.qp_tol,
            tol_rel: params.qp_tol_rel,
            max_iter: params.qp_max_iter,
            polish: false,
            check_convexity: false,
            ..QpSettings::default()
        });
        Self {
            params,
            qp,
            previous: None,
        }
    }

    /// Warm-start from the previous plan advanced by `steps` intervals.
    pub fn shift_previous(&mut self, steps: usize) {
        if let Some(prev) = self.previous.take() {
            let n = prev.nrows();
            let mut shifted = prev.clone();
            for k in 0..n {
                let src = (k + steps).min(n - 1);
                shifted.set_row(k, &prev.row(src));
            }
            self.previous = Some(shifted);
        }
    }

    pub fn solve(
        &mut self,
        model: &RobotModel,
        x0: &WholeBodyState,
        ee_reference: &[Pose],
        posture_ref: &DVector<f64>,
        scene: &Scene,
    ) -> Result<MpcPlan, MpcError> {
        let warm = self.previous.take();
        let plan = solve_with(
            &mut self.qp,
            model,
            x0,
            ee_reference,
            posture_ref,
            &self.params,
            scene,
            warm,
        )?;
        self.previous = Some(plan.controls.clone());
        Ok(plan)
    }
}

/// One-shot MPC solve from a cold start.
pub fn solve_mpc(
    model: &RobotModel,
    x0: &WholeBodyState,
    ee_reference: &[Pose],
    posture_ref: &DVector<f64>,
    params: &MpcParams,
    scene: &Scene,
) -> Result<MpcPlan, MpcError> {
    let mut qp = QpSolver::new(QpSettings {
        tol: params.qp_tol,
        max_iter: params.qp_max_iter,
        polish: false,
        ..QpSettings::default()
    });
    solve_with(
        &mut qp,
        model,
        x0,
        ee_reference,
        posture_ref,
        params,
        scene,
        None,
    )
}

#[allow(clippy::too_many_arguments)]
fn solve_with(
    qp: &mut QpSolver,
    model: &RobotModel,
    x0: &WholeBodyState,
    ee_reference: &[Pose],
    posture_ref: &DVector<f64>,
    params: &MpcParams,
    scene: &Scene,
    warm: Option<DMatrix<f64>>,
) -> Result<MpcPlan, MpcError> {
    let n = model.dof();
    let nu = 6 + n;
    let horizon = params.horizon;
    params.validate(n)?;
    if ee_reference.len() != horizon {
        return Err(MpcError::ReferenceLength {
            expected: horizon,
            actual: ee_reference.len(),
        });
    }
    if posture_ref.len() != n || x0.q_arm.len() != n {
        return Err(MpcError::Params(format!(
            "posture and state must have {n} joints"
        )));
    }
    let free: Vec<usize> = (0..nu)
        .filter(|&i| params.u_min[i] < params.u_max[i])
        .collect();
    let nf = free.len();
    let prob = Problem {
        model,
        params,
        reference: ee_reference,
        posture: posture_ref,
        others: scene.others(),
        free: free.clone(),
        x0: x0.kinematic_vector(),
    };
    let nx = prob.nx();
    let h0 = barrier_of_vector(model, &prob.x0, &prob.others, params.margin);
    if h0 < 0.0 {
        return Err(MpcError::InfeasibleStart(h0));
    }

    let clamp = |u: &mut DMatrix<f64>| {
        for k in 0..horizon {
            for i in 0..nu {
                u[(k, i)] = u[(k, i)].clamp(params.u_min[i], params.u_max[i]);
            }
        }
    };
    let mut controls = match warm {
        Some(w) if w.nrows() == horizon && w.ncols() == nu => w,
        _ => DMatrix::zeros(horizon, nu),
    };
    clamp(&mut controls);

    let mut traj = prob.evaluate(&controls)?;
    let mut merit = prob.merit(&traj);
    let mut merit_history = vec![merit];
    let mut converged = false;
    let mut iterations = 0;
    let nvar = horizon * nf;

    for _ in 0..params.sqp_max_iter {
        iterations += 1;
        // sensitivities S_{k+1} = A_k S_k + B_k [block k]
        let mut sens: Vec<DMatrix<f64>> = Vec::with_capacity(horizon + 1);
        let mut steps = Vec::with_capacity(horizon);
        sens.push(DMatrix::zeros(nx, nvar));
        for k in 0..horizon {
            let u = controls.row(k).transpose();
            let (a, b) = prob.linearize_step(&traj.states[k], &u)?;
            let mut next = DMatrix::zeros(nx, nvar);
            let used = k * nf;
            if used > 0 {
                next.columns_mut(0, used)
                    .copy_from(&(&a * sens[k].columns(0, used)));
            }
            next.columns_mut(used, nf).copy_from(&b);
            sens.push(next);
            steps.push((a, b));
        }

        // Condensed Gauss-Newton Hessian by a backward sweep: P_k is the
        // cost-to-go curvature seen from x_{k+1}, lambda_k its gradient.
        let mut h = DMatrix::zeros(nvar, nvar);
        let mut g = DVector::zeros(nvar);
        let mut p_next: Option<DMatrix<f64>> = None;
        let mut lambda_next: Option<DVector<f64>> = None;
        for k in (0..horizon).rev() {
            let x = &traj.states[k + 1];
            let r = prob.residual(k, x);
            let jr = prob.residual_jacobian(k, x);
            let mut p = jr.tr_mul(&jr) * 2.0;
            let mut lambda = jr.tr_mul(&r) * 2.0;
            if let (Some(pn), Some(ln)) = (&p_next, &lambda_next) {
                let a_next = &steps[k + 1].0;
                p += a_next.tr_mul(&(pn * a_next));
                lambda += a_next.tr_mul(ln);
            }
            let b = &steps[k].1;
            let cols = (k + 1) * nf;
            let block = sens[k + 1].columns(0, cols).tr_mul(&(&p * b));
            h.view_mut((0, k * nf), (cols, nf)).copy_from(&block);
            h.view_mut((k * nf, 0), (nf, cols))
                .copy_from(&block.transpose());
            g.rows_mut(k * nf, nf).copy_from(&b.tr_mul(&lambda));
            for (c, &i) in free.iter().enumerate() {
                let idx = k * nf + c;
                h[(idx, idx)] += 2.0 * params.r[i];
                g[idx] += 2.0 * params.r[i] * controls[(k, i)];
            }
            p_next = Some(p);
            lambda_next = Some(lambda);
        }
        let h = (&h + h.transpose()) * 0.5;

        // Bound rows on the free controls come first, then joint-limit and
        // barrier rows, which are dense in the sensitivities.
        let mut dense_rows: Vec<DVector<f64>> = Vec::new();
        let mut lower: Vec<f64> = Vec::with_capacity(nvar);
        let mut upper: Vec<f64> = Vec::with_capacity(nvar);
        for k in 0..horizon {
            for &i in free.iter() {
                lower.push(params.u_min[i] - controls[(k, i)]);
                upper.push(params.u_max[i] - controls[(k, i)]);
            }
        }
        for k in 0..horizon {
            let x = &traj.states[k + 1];
            for (j, [lo, hi]) in model.joint_limits.iter().enumerate() {
                let q = x[6 + j];
                if q - lo < params.joint_limit_activation || hi - q < params.joint_limit_activation
                {
                    dense_rows.push(sens[k + 1].row(6 + j).transpose());
                    lower.push(lo - q);
                    upper.push(hi - q);
                }
            }
        }
        if !prob.others.is_empty() {
            let n_other = prob.others.len();
            let mut jac_cache: Vec<Option<Vec<DMatrix<f64>>>> = vec![None; horizon + 1];
            let mut pair_grad = |k: usize, pair: usize| -> DVector<f64> {
                let x = &traj.states[k];
                let jacs = jac_cache[k].get_or_insert_with(|| sphere_center_jacobians(model, x));
                let own = own_spheres(model, x);
                let (i, j) = (pair / n_other, pair % n_other);
                let diff = own[i].center - prob.others[j].center;
                let normal = if diff.norm() > 1e-12 {
                    diff.normalize()
                } else {
                    Vector3::x()
                };
                jacs[i].transpose() * normal
            };
            for k in 0..horizon {
                for pair in 0..traj.gaps[k].len() {
                    let (h_k, h_next) = (traj.gaps[k][pair], traj.gaps[k + 1][pair]);
                    if h_k.min(h_next) > params.activation_distance {
                        continue;
                    }
                    let mut row = sens[k + 1].tr_mul(&pair_grad(k + 1, pair));
                    if k > 0 {
                        row -= sens[k].tr_mul(&pair_grad(k, pair)) * (1.0 - params.gamma);
                    }
                    dense_rows.push(row);
                    lower.push((1.0 - params.gamma) * h_k - h_next);
                    upper.push(f64::INFINITY);
                }
            }
        }
        let m = lower.len();
        let mut a = DMatrix::zeros(m, nvar);
        for i in 0..nvar {
            a[(i, i)] = 1.0;
        }
        for (r, row) in dense_rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                a[(nvar + r, j)] = *v;
            }
        }
        let qp_problem =
            QpProblem::new(h, g, a, DVector::from_vec(lower), DVector::from_vec(upper))?;
        qp.reset();
        let sol = qp.solve(&qp_problem)?;
        if sol.status == QpStatus::PrimalInfeasible {
            break;
        }
        let mut step = DMatrix::zeros(horizon, nu);
        for k in 0..horizon {
            for (c, &i) in free.iter().enumerate() {
                step[(k, i)] = sol.x[k * nf + c];
            }
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-3 {
            let mut trial = &controls + &step * alpha;
            clamp(&mut trial);
            let t = prob.evaluate(&trial)?;
            let mt = prob.merit(&t);
            if mt <= merit {
                accepted = Some((trial, t, mt));
                break;
            }
            alpha *= 0.5;
        }
        let step_norm = step.amax() * alpha;
        match accepted {
            Some((c, t, mt)) => {
                controls = c;
                traj = t;
                merit = mt;
                merit_history.push(merit);
                if step_norm < params.sqp_tol {
                    converged = true;
                    break;
                }
            }
            None => {
                converged = step.amax() < 10.0 * params.sqp_tol;
                break;
            }
        }
    }

    let barrier_trace = traj
        .barrier()
        .into_iter()
        .map(|h| h + params.tightening)
        .collect();
    Ok(MpcPlan {
        controls,
        predicted_states: traj.states,
        barrier_trace,
        converged,
        sqp_iterations: iterations,
        merit_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::forward_kinematics;

    #[test]
    fn zero_control_is_fixed_point() {
        let x = DVector::from_vec(vec![
            1.0, 2.0, 0.3, 0.1, -0.2, 0.5, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6,
        ]);
        let next = rollout_dynamics(&x, &DVector::zeros(12), 0.1).unwrap();
        assert_eq!(next, x);
    }

    #[test]
    fn forward_velocity_moves_along_world_x() {
        let x = DVector::zeros(12);
        let mut u = DVector::zeros(12);
        u[0] = 1.0;
        let next = rollout_dynamics(&x, &u, 0.1).unwrap();
        assert!((next[0] - 0.1).abs() < 1e-15);
        assert_eq!(next[1], 0.0);
    }

    #[test]
    fn yaw_rate_integrates_in_closed_form() {
        let mut x = DVector::zeros(12);
        let mut u = DVector::zeros(12);
        let (rate, dt, steps) = (0.37, 0.05, 40);
        u[5] = rate;
        for _ in 0..steps {
            x = rollout_dynamics(&x, &u, dt).unwrap();
        }
        assert!((x[5] - rate * dt * steps as f64).abs() < 1e-9);
    }

    #[test]
    fn gimbal_lock_is_rejected() {
        let mut x = DVector::zeros(12);
        x[4] = std::f64::consts::FRAC_PI_2 - 5e-4;
        assert!(matches!(
            rollout_dynamics(&x, &DVector::zeros(12), 0.1),
            Err(MpcError::GimbalLock(_))
        ));
    }

    #[test]
    fn barrier_geometry() {
        let mut model = RobotModel::quadruped_arm();
        model.collision_spheres.truncate(1);
        model.collision_spheres[0].center = Vector3::zeros();
        model.collision_spheres[0].radius = 0.3;
        let state = WholeBodyState::at_rest(Pose::identity(), RobotModel::quadruped_arm_posture());
        let scene = Scene {
            obstacles: vec![Sphere {
                center: Vector3::new(5.0, 0.0, 0.0),
                radius: 0.5,
            }],
            partner: vec![],
        };
        let h = barrier_value(&model, &state, &scene, 0.1);
        assert!((h - 4.1).abs() < 1e-12);

        let touching = Scene {
            obstacles: vec![Sphere {
                center: Vector3::new(0.8, 0.0, 0.0),
                radius: 0.5,
            }],
            partner: vec![],
        };
        assert!(barrier_value(&model, &state, &touching, 0.0).abs() < 1e-12);
    }

    #[test]
    fn rest_reference_gives_zero_controls() {
        let model = RobotModel::quadruped_arm();
        let posture = RobotModel::quadruped_arm_posture();
        let state =
            WholeBodyState::at_rest(Pose::from_xyz_yaw(0.0, 0.0, 0.3, 0.4), posture.clone());
        let ee = forward_kinematics(&model, &state).unwrap();
        let params = MpcParams::default();
        let reference = vec![ee; params.horizon];
        let plan = solve_mpc(
            &model,
            &state,
            &reference,
            &posture,
            &params,
            &Scene::default(),
        )
        .unwrap();
        assert!(plan.controls.amax() < 1e-4, "{}", plan.controls.amax());
        assert!(plan.converged);
    }

    #[test]
    fn infeasible_start_is_an_error() {
        let model = RobotModel::quadruped_arm();
        let posture = RobotModel::quadruped_arm_posture();
        let state = WholeBodyState::at_rest(Pose::identity(), posture.clone());
        let ee = forward_kinematics(&model, &state).unwrap();
        let params = MpcParams::default();
        let scene = Scene {
            obstacles: vec![Sphere {
                center: Vector3::zeros(),
                radius: 0.2,
            }],
            partner: vec![],
        };
        let r = solve_mpc(
            &model,
            &state,
            &vec![ee; params.horizon],
            &posture,
            &params,
            &scene,
        );
        assert!(matches!(r, Err(MpcError::InfeasibleStart(_))));
        let r = solve_mpc(&model, &state, &[ee], &posture, &params, &Scene::default());
        assert!(matches!(r, Err(MpcError::ReferenceLength { .. })));
    }
}
