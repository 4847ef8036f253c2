//! Reactive layer: a weighted velocity QP over `nu = [v_b, w_b, dq_arm]`
//! solved every control tick, with an optional cooperative admittance
//! offset superimposed on the end-effector task.

use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{pose_error, Pose, Twist};
use crate::grasp::{
    admittance_correction, corrections_to_world, GraspError, GraspModel, StackedWrench,
};
use crate::kinematics::{whole_body_jacobian, KinematicsError, RobotModel, WholeBodyState};
use crate::qp::{kkt_residuals, KktResiduals, QpError, QpProblem, QpSettings, QpSolver, QpStatus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WbcError {
    #[error("task {task}: {msg}")]
    Dimension { task: usize, msg: String },
    #[error("no tasks given")]
    NoTasks,
    #[error("parameter error: {0}")]
    Params(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Grasp(#[from] GraspError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    EeTracking,
    Posture,
    /// Tracks the base twist planned by the MPC.
    BaseVelocity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub weight: f64,
    pub jacobian: DMatrix<f64>,
    pub target_velocity: DVector<f64>,
    /// Zero when admittance is disabled.
    pub admittance_offset: DVector<f64>,
}

impl TaskSpec {
    pub fn new(
        kind: TaskKind,
        weight: f64,
        jacobian: DMatrix<f64>,
        target_velocity: DVector<f64>,
    ) -> Self {
        let dim = target_velocity.len();
        Self {
            kind,
            weight,
            jacobian,
            target_velocity,
            admittance_offset: DVector::zeros(dim),
        }
    }

    pub fn with_offset(mut self, offset: DVector<f64>) -> Self {
        self.admittance_offset = offset;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WbcParams {
    pub lambda: f64,
    pub dt: f64,
    pub w_ee: f64,
    pub w_posture: f64,
    pub w_base: f64,
    pub admittance_enabled: bool,
    /// Proportional gain turning pose error into task velocity (1/s).
    pub ee_gain: f64,
    pub posture_gain: f64,
    pub max_ee_linear_speed: f64,
    pub max_ee_angular_speed: f64,
    /// Bounds on `nu`; the arm entries are the joint velocity limits.
    pub nu_min: Vec<f64>,
    pub nu_max: Vec<f64>,
    /// Convex weight of the QP base twist against the MPC base twist.
    pub base_blend: f64,
    /// Time constant of the base velocity tracker; with a measured base
    /// twist the end-effector task accounts for the lagged base response.
    pub base_time_constant: f64,
    pub qp_tol: f64,
}

impl Default for WbcParams {
    fn default() -> Self {
        Self::for_arm(&[3.0; 6])
    }
}

impl WbcParams {
    pub fn for_arm(joint_velocity_limits: &[f64]) -> Self {
        let mut nu_max = vec![0.8, 0.8, 0.0, 0.0, 0.0, 1.0];
        nu_max.extend_from_slice(joint_velocity_limits);
        let nu_min = nu_max.iter().map(|v| -v).collect();
        Self {
            lambda: 1e-3,
            dt: 0.01,
            w_ee: 10.0,
            w_posture: 0.1,
            w_base: 1.0,
            admittance_enabled: true,
            ee_gain: 5.0,
            posture_gain: 1.0,
            max_ee_linear_speed: 1.0,
            max_ee_angular_speed: 2.0,
            nu_min,
            nu_max,
            base_blend: 0.5,
            base_time_constant: 0.1,
            qp_tol: 1e-7,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<(), WbcError> {
        let err = |s: &str| Err(WbcError::Params(s.into()));
        if !(self.lambda > 0.0) {
            return err("lambda must be positive");
        }
        if !(self.dt > 0.0) {
            return err("dt must be positive");
        }
        if [self.w_ee, self.w_posture, self.w_base]
            .iter()
            .any(|w| !(*w >= 0.0))
        {
            return err("weights must be non-negative");
        }
        if !(self.base_time_constant >= 0.0) {
            return err("base_time_constant must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.base_blend) {
            return err("base_blend must lie in [0, 1]");
        }
        if self.nu_min.len() != dim || self.nu_max.len() != dim {
            return err("nu bounds must have 6 + n entries");
        }
        if self
            .nu_min
            .iter()
            .zip(&self.nu_max)
            .any(|(lo, hi)| !(lo <= hi))
        {
            return err("nu_min must not exceed nu_max");
        }
        Ok(())
    }
}

/// `H = sum w J'J + 2 lambda I`, `g = -sum w J'(xdot + offset)`, with rows
/// `nu_min <= nu <= nu_max` followed by `(q_min - q)/dt <= dq <= (q_max - q)/dt`.
pub fn build_task_qp(
    q_arm: &DVector<f64>,
    tasks: &[TaskSpec],
    params: &WbcParams,
    model: &RobotModel,
) -> Result<QpProblem, WbcError> {
    let n = model.dof();
    let dim = 6 + n;
    if tasks.is_empty() {
        return Err(WbcError::NoTasks);
    }
    if q_arm.len() != n {
        return Err(WbcError::Params(format!(
            "expected {n} joint angles, got {}",
            q_arm.len()
        )));
    }
    params.validate(dim)?;
    let mut h = DMatrix::identity(dim, dim) * (2.0 * params.lambda);
    let mut g = DVector::zeros(dim);
    for (i, t) in tasks.iter().enumerate() {
        let rows = t.target_velocity.len();
        if t.jacobian.ncols() != dim
            || t.jacobian.nrows() != rows
            || t.admittance_offset.len() != rows
        {
            return Err(WbcError::Dimension {
                task: i,
                msg: format!(
                    "jacobian {}x{}, target {rows}, offset {}",
                    t.jacobian.nrows(),
                    t.jacobian.ncols(),
                    t.admittance_offset.len()
                ),
            });
        }
        if !(t.weight >= 0.0) {
            return Err(WbcError::Dimension {
                task: i,
                msg: "negative weight".into(),
            });
        }
        let jt = t.jacobian.transpose();
        h.gemm(t.weight, &jt, &t.jacobian, 1.0);
        g.gemv(
            -t.weight,
            &jt,
            &(&t.target_velocity + &t.admittance_offset),
            1.0,
        );
    }
    let h = (&h + h.transpose()) * 0.5;

    let m = dim + n;
    let mut a = DMatrix::zeros(m, dim);
    let mut lower = DVector::zeros(m);
    let mut upper = DVector::zeros(m);
    for i in 0..dim {
        a[(i, i)] = 1.0;
        lower[i] = params.nu_min[i];
        upper[i] = params.nu_max[i];
    }
    for (j, [lo, hi]) in model.joint_limits.iter().enumerate() {
        a[(dim + j, 6 + j)] = 1.0;
        lower[dim + j] = (lo - q_arm[j]) / params.dt;
        upper[dim + j] = (hi - q_arm[j]) / params.dt;
    }
    Ok(QpProblem::new(h, g, a, lower, upper)?)
}

/// `gain * pose_error(target, current)` with the linear and angular parts
/// clamped in norm, direction preserved.
pub fn ee_reference_velocity(
    target: &Pose,
    current: &Pose,
    gain: f64,
    max_linear: f64,
    max_angular: f64,
) -> Result<Vector6<f64>, WbcError> {
    if !(gain > 0.0) {
        return Err(WbcError::Params("gain must be positive".into()));
    }
    let e = pose_error(target, current) * gain;
    let clamp = |v: Vector3<f64>, cap: f64| {
        let norm = v.norm();
        if norm > cap {
            v * (cap / norm)
        } else {
            v
        }
    };
    let lin = clamp(e.fixed_rows::<3>(0).into_owned(), max_linear);
    let ang = clamp(e.fixed_rows::<3>(3).into_owned(), max_angular);
    Ok(Vector6::new(lin.x, lin.y, lin.z, ang.x, ang.y, ang.z))
}

/// Per-arm world-frame yield twists from measured contact wrenches.
pub fn cooperative_admittance(
    grasp: &GraspModel,
    measured: &StackedWrench,
    desired_internal: &StackedWrench,
    damping: &StackedWrench,
) -> Result<[Vector6<f64>; 2], WbcError> {
    let split = grasp.decompose(measured);
    let corr = admittance_correction(&split.internal, desired_internal, damping)?;
    Ok(corrections_to_world(&corr, grasp.object_pose.rotation()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WbcStatus {
    Ok,
    /// The QP had no solution; the command is zero.
    SafeStop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WbcCommand {
    /// Base twist in the base frame, after blending with the MPC plan.
    pub base_twist: Twist,
    pub dq_arm: DVector<f64>,
    /// Raw QP solution.
    pub nu: DVector<f64>,
    pub status: WbcStatus,
    pub kkt: KktResiduals,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WbcInput<'a> {
    /// World-frame end-effector velocity target (feedback plus feedforward).
    pub ee_target_velocity: Vector6<f64>,
    pub posture_ref: &'a DVector<f64>,
    /// Planned base twist `[v_b, w_b]` in the base frame, if a plan exists.
    pub base_velocity_ref: Option<Vector6<f64>>,
    /// World-frame admittance yield twist for this arm.
    pub admittance_offset: Option<Vector6<f64>>,
    /// Current base twist as measured, base frame.
    pub measured_base_twist: Option<Vector6<f64>>,
}

/// Holds the warm-started QP workspace of one robot.
#[derive(Debug, Clone)]
pub struct WbcController {
    pub params: WbcParams,
    qp: QpSolver,
}

impl WbcController {
    pub fn new(params: WbcParams) -> Self {
        let qp = QpSolver::new(QpSettings {
            tol: params.qp_tol,
            ..QpSettings::default()
        });
        Self { params, qp }
    }

    pub fn tasks(
        &self,
        model: &RobotModel,
        state: &WholeBodyState,
        input: &WbcInput,
    ) -> Result<Vec<TaskSpec>, WbcError> {
        let n = model.dof();
        let dim = 6 + n;
        let p = &self.params;
        let mut j = whole_body_jacobian(model, state)?;
        let mut ee_target = DVector::from_column_slice(input.ee_target_velocity.as_slice());
        if let (Some(v), true) = (input.measured_base_twist, p.base_time_constant > 0.0) {
            // Over one tick the base realises v + a (v_cmd - v), so only the
            // fraction a of the commanded base twist moves the hand.
            let a = 1.0 - (-p.dt / p.base_time_constant).exp();
            let drift = j.columns(0, 6) * DVector::from_column_slice(v.as_slice()) * (1.0 - a);
            ee_target -= drift;
            j.columns_mut(0, 6).scale_mut(a);
        }
        let offset = match (p.admittance_enabled, input.admittance_offset) {
            (true, Some(o)) => DVector::from_column_slice(o.as_slice()),
            _ => DVector::zeros(6),
        };
        let mut tasks =
            vec![TaskSpec::new(TaskKind::EeTracking, p.w_ee, j, ee_target).with_offset(offset)];

        let mut jp = DMatrix::zeros(n, dim);
        jp.view_mut((0, 6), (n, n)).fill_with_identity();
        let posture_vel = (input.posture_ref - &state.q_arm) * p.posture_gain;
        tasks.push(TaskSpec::new(
            TaskKind::Posture,
            p.w_posture,
            jp,
            posture_vel,
        ));

        if let Some(b) = input.base_velocity_ref {
            let mut jb = DMatrix::zeros(6, dim);
            jb.view_mut((0, 0), (6, 6)).fill_with_identity();
            tasks.push(TaskSpec::new(
                TaskKind::BaseVelocity,
                p.w_base,
                jb,
                DVector::from_column_slice(b.as_slice()),
            ));
        }
        Ok(tasks)
    }

    /// One control tick. An infeasible QP yields a zero command flagged
    /// [`WbcStatus::SafeStop`].
    pub fn step(
        &mut self,
        model: &RobotModel,
        state: &WholeBodyState,
        input: &WbcInput,
    ) -> Result<WbcCommand, WbcError> {
        let n = model.dof();
        let tasks = self.tasks(model, state, input)?;
        let problem = build_task_qp(&state.q_arm, &tasks, &self.params, model)?;
        let sol = self.qp.solve(&problem)?;
        let finite = sol.x.iter().all(|v| v.is_finite());
        if sol.status == QpStatus::PrimalInfeasible || !finite {
            self.qp.reset();
            return Ok(WbcCommand {
                base_twist: Twist::zero(),
                dq_arm: DVector::zeros(n),
                nu: DVector::zeros(6 + n),
                status: WbcStatus::SafeStop,
                kkt: kkt_residuals(
                    &problem,
                    &DVector::zeros(6 + n),
                    &DVector::zeros(problem.num_constraints()),
                ),
            });
        }
        let kkt = kkt_residuals(&problem, &sol.x, &sol.duals);
        let mut base = Vector6::from_fn(|i, _| sol.x[i]);
        if let Some(plan) = input.base_velocity_ref {
            let w = self.params.base_blend;
            base = base * w + plan * (1.0 - w);
            for i in 0..6 {
                base[i] = base[i].clamp(self.params.nu_min[i], self.params.nu_max[i]);
            }
        }
        Ok(WbcCommand {
            base_twist: Twist::from_vector(&base),
            dq_arm: sol.x.rows(6, n).into_owned(),
            nu: sol.x,
            status: WbcStatus::Ok,
            kkt,
        })
    }
}
