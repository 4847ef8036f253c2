//! Deterministic kinematic world: two velocity-tracked floating bases with
//! arms, rigidly graspable objects, sphere obstacles, virtual contact
//! springs and task adjudication.

use std::fmt;

use nalgebra::{DVector, UnitQuaternion, Vector3, Vector6};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{pose_error, Pose, Twist};
use crate::grasp::{GraspError, GraspModel, StackedWrench, WrenchSplit};
use crate::kinematics::{
    forward_kinematics, sphere_centers, sphere_gap, Gripper, KinematicsError, Sphere,
};
use crate::mpc::{rollout_dynamics, MpcError};
use crate::refgen::{ObjectSpec, Task};
use crate::{stream_rng, RobotModel, WholeBodyState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("non-finite or mis-sized command for robot {0}; state frozen")]
    BadCommand(usize),
    #[error("gripper {0} is not attached to an object")]
    NotAttached(usize),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Integration(#[from] MpcError),
    #[error(transparent)]
    Grasp(#[from] GraspError),
}

/// First-order velocity tracker standing in for the locomotion policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrackerModel {
    pub time_constant: f64,
    /// Per-tick noise on the planar base velocity (m/s).
    pub velocity_noise_std: f64,
    /// Per-tick noise on the yaw rate (rad/s).
    pub yaw_rate_noise_std: f64,
    /// Fraction of the gripper reaction force that pushes the base.
    pub payload_coupling: f64,
}

impl Default for BaseTrackerModel {
    fn default() -> Self {
        Self {
            time_constant: 0.1,
            velocity_noise_std: 0.01,
            yaw_rate_noise_std: 0.01,
            payload_coupling: 0.0,
        }
    }
}

/// Virtual spring-damper between a gripper and its grasp frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContactParams {
    pub stiffness_linear: f64,
    pub stiffness_angular: f64,
    pub damping_linear: f64,
    pub damping_angular: f64,
}

impl Default for ContactParams {
    fn default() -> Self {
        Self {
            stiffness_linear: 2000.0,
            stiffness_angular: 20.0,
            damping_linear: 5.0,
            damping_angular: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub dt: f64,
    pub base_mass: f64,
    /// A closing gripper captures a grasp frame within this distance.
    pub capture_radius: f64,
    pub tracker: BaseTrackerModel,
    pub contact: ContactParams,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            dt: 0.01,
            base_mass: 20.0,
            capture_radius: 0.03,
            tracker: BaseTrackerModel::default(),
            contact: ContactParams::default(),
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let err = |s: &str| Err(SimError::Params(s.into()));
        if !(self.dt > 0.0) {
            return err("dt must be positive");
        }
        if !(self.base_mass > 0.0) {
            return err("base_mass must be positive");
        }
        if !(self.tracker.time_constant > 0.0) {
            return err("tracker time_constant must be positive");
        }
        if !(self.tracker.velocity_noise_std >= 0.0 && self.tracker.yaw_rate_noise_std >= 0.0) {
            return err("tracker noise must be non-negative");
        }
        let c = &self.contact;
        if [
            c.stiffness_linear,
            c.stiffness_angular,
            c.damping_linear,
            c.damping_angular,
        ]
        .iter()
        .any(|v| !(*v >= 0.0))
        {
            return err("contact gains must be non-negative");
        }
        if !(self.capture_radius > 0.0) {
            return err("capture_radius must be positive");
        }
        Ok(())
    }
}

/// Constant base-frame force on one robot's base for `duration_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationEvent {
    pub robot: usize,
    pub force: Vector3<f64>,
    pub duration_s: f64,
    pub start_tick: u64,
}

impl PerturbationEvent {
    /// Velocity injected during the tick starting at `tick`.
    pub fn delta_v(&self, tick: u64, dt: f64, mass: f64) -> Vector3<f64> {
        if tick < self.start_tick || !(self.duration_s > 0.0) {
            return Vector3::zeros();
        }
        let elapsed = (tick - self.start_tick) as f64 * dt;
        let active = dt.min(self.duration_s - elapsed);
        if active <= 1e-12 {
            return Vector3::zeros();
        }
        self.force * (active / mass)
    }
}

/// Adds this tick's share of `event` to the robot's base velocity.
pub fn apply_perturbation(
    world: &mut WorldState,
    event: &PerturbationEvent,
    mass: f64,
    dt: f64,
) -> Vector3<f64> {
    let dv = event.delta_v(world.tick, dt, mass);
    if let Some(robot) = world.robots.get_mut(event.robot) {
        robot.base_twist.linear += dv;
    }
    dv
}

/// Exact zero-order-hold step of `dv/dt = (cmd - v) / tau`.
pub fn tracker_response(v: &Vector6<f64>, cmd: &Vector6<f64>, tau: f64, dt: f64) -> Vector6<f64> {
    let a = (-dt / tau).exp();
    v * a + cmd * (1.0 - a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimObject {
    pub name: String,
    pub pose: Pose,
    pub grasp_frames: Vec<Pose>,
    pub half_height: f64,
    pub initial_pose: Pose,
}

impl SimObject {
    pub fn from_spec(spec: &ObjectSpec, g: &Pose) -> Self {
        let pose = g.compose(&spec.pose);
        Self {
            name: spec.name.clone(),
            pose,
            grasp_frames: spec.grasp_frames.clone(),
            half_height: spec.half_height,
            initial_pose: pose,
        }
    }

    /// Angle between the current and initial object z axes.
    pub fn tilt(&self) -> f64 {
        let z = Vector3::z();
        let now = self.pose.rotation() * z;
        let then = self.initial_pose.rotation() * z;
        now.dot(&then).clamp(-1.0, 1.0).acos()
    }
}

/// Rigid grasp: `offset` is the gripper pose in the object frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub object: usize,
    pub offset: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub robots: [WholeBodyState; 2],
    pub objects: Vec<SimObject>,
    pub attachments: [Option<Attachment>; 2],
    pub obstacles: Vec<Sphere>,
    pub tick: u64,
    pub rng_seed: u64,
    /// World-frame grasp error and its rate per gripper, while attached.
    pub contact_error: [Option<Vector6<f64>>; 2],
    pub contact_rate: [Vector6<f64>; 2],
}

impl WorldState {
    pub fn new(
        robots: [WholeBodyState; 2],
        objects: Vec<SimObject>,
        obstacles: Vec<Sphere>,
        rng_seed: u64,
    ) -> Self {
        Self {
            robots,
            objects,
            attachments: [None, None],
            obstacles,
            tick: 0,
            rng_seed,
            contact_error: [None, None],
            contact_rate: [Vector6::zeros(); 2],
        }
    }

    /// Gripper pose on the object it holds, in the world frame.
    pub fn grasp_frame(&self, robot: usize) -> Option<Pose> {
        self.attachments[robot].map(|a| self.objects[a.object].pose.compose(&a.offset))
    }

    /// Object held by both grippers, if any.
    pub fn shared_object(&self) -> Option<usize> {
        match self.attachments {
            [Some(a), Some(b)] if a.object == b.object => Some(a.object),
            _ => None,
        }
    }

    pub fn holders(&self, object: usize) -> usize {
        self.attachments
            .iter()
            .flatten()
            .filter(|a| a.object == object)
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GraspEvent {
    Captured { robot: usize, object: usize },
    Missed { robot: usize },
    Released { robot: usize, object: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotCommand {
    /// Base-frame twist `[v_b, w_b]`.
    pub base_twist: Vector6<f64>,
    pub dq_arm: DVector<f64>,
    pub gripper_closed: bool,
}

impl RobotCommand {
    pub fn idle(n: usize, gripper_closed: bool) -> Self {
        Self {
            base_twist: Vector6::zeros(),
            dq_arm: DVector::zeros(n),
            gripper_closed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepReport {
    pub events: Vec<GraspEvent>,
    /// Perturbation velocity injected per robot this tick (base frame).
    pub injected: [Vector3<f64>; 2],
}

/// Least-squares pose closest to both candidates: mean translation and
/// normalised quaternion mean.
pub fn fit_pose(a: &Pose, b: &Pose) -> Pose {
    let t = (a.translation() + b.translation()) * 0.5;
    let (qa, mut qb) = (a.rotation().coords, b.rotation().coords);
    if qa.dot(&qb) < 0.0 {
        qb = -qb;
    }
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(qa + qb));
    Pose::from_parts(q, t)
}

#[derive(Debug, Clone)]
pub struct Simulator {
    pub params: SimParams,
    pub model: RobotModel,
    pub perturbations: Vec<PerturbationEvent>,
    noise: [ChaCha8Rng; 2],
}

/// Random streams 0 and 1 of the episode seed.
pub const NOISE_STREAM: u64 = 0;

impl Simulator {
    pub fn new(
        params: SimParams,
        model: RobotModel,
        perturbations: Vec<PerturbationEvent>,
        seed: u64,
    ) -> Result<Self, SimError> {
        params.validate()?;
        model.validate()?;
        if let Some(e) = perturbations
            .iter()
            .find(|e| e.robot > 1 || !(e.duration_s >= 0.0))
        {
            return Err(SimError::Params(format!("bad perturbation {e:?}")));
        }
        Ok(Self {
            params,
            model,
            perturbations,
            noise: [0, 1].map(|i| stream_rng(seed, NOISE_STREAM + i)),
        })
    }

    /// Advances the world by one tick. A bad command leaves the world
    /// untouched and returns an error.
    pub fn step(
        &mut self,
        world: &mut WorldState,
        commands: &[RobotCommand; 2],
    ) -> Result<StepReport, SimError> {
        let n = self.model.dof();
        for (i, c) in commands.iter().enumerate() {
            let finite = c
                .base_twist
                .iter()
                .chain(c.dq_arm.iter())
                .all(|v| v.is_finite());
            if !finite || c.dq_arm.len() != n {
                return Err(SimError::BadCommand(i));
            }
        }
        let p = self.params;
        let dt = p.dt;
        let mut report = StepReport::default();

        let reaction = if p.tracker.payload_coupling != 0.0 {
            [0, 1].map(|i| contact_wrench(world, &self.model, i, &p.contact).ok())
        } else {
            [None, None]
        };

        let mut next = world.robots.clone();
        for (i, robot) in next.iter_mut().enumerate() {
            let v = robot.base_twist.to_vector();
            let mut v = tracker_response(&v, &commands[i].base_twist, p.tracker.time_constant, dt);
            let rng = &mut self.noise[i];
            let mut draw = || -> f64 { StandardNormal.sample(rng) };
            v[0] += p.tracker.velocity_noise_std * draw();
            v[1] += p.tracker.velocity_noise_std * draw();
            v[5] += p.tracker.yaw_rate_noise_std * draw();
            for e in self.perturbations.iter().filter(|e| e.robot == i) {
                let dv = e.delta_v(world.tick, dt, p.base_mass);
                report.injected[i] += dv;
                for k in 0..3 {
                    v[k] += dv[k];
                }
            }
            if let Some(w) = reaction[i] {
                // the gripper pushes the object with w; the base feels -w
                let obj =
                    world.objects[world.attachments[i].expect("wrench implies grasp").object].pose;
                let f_world = obj.rotation() * w.fixed_rows::<3>(0);
                let f_base = robot.base_pose.rotation().inverse() * f_world;
                let dv = -f_base * (p.tracker.payload_coupling * dt / p.base_mass);
                for k in 0..3 {
                    v[k] += dv[k];
                }
            }

            let mut u = DVector::zeros(6 + n);
            u.fixed_rows_mut::<6>(0).copy_from(&v);
            u.rows_mut(6, n).copy_from(&commands[i].dq_arm);
            let x = robot.kinematic_vector();
            let mut x_next = rollout_dynamics(&x, &u, dt)?;
            let mut q = x_next.rows(6, n).into_owned();
            self.model.clamp_joints(&mut q);
            x_next.rows_mut(6, n).copy_from(&q);
            robot.dq_arm = (&q - &robot.q_arm) / dt;
            robot.set_kinematic_vector(&x_next);
            robot.base_twist = Twist::from_vector(&v);
        }
        world.robots = next;

        let ee = [
            forward_kinematics(&self.model, &world.robots[0])?,
            forward_kinematics(&self.model, &world.robots[1])?,
        ];
        follow_grippers(world, &ee);

        for i in 0..2 {
            let closed = commands[i].gripper_closed;
            let was_closed = world.robots[i].gripper == Gripper::Closed;
            if closed && !was_closed {
                match capture(world, &ee[i], p.capture_radius) {
                    Some(a) => {
                        world.attachments[i] = Some(a);
                        report.events.push(GraspEvent::Captured {
                            robot: i,
                            object: a.object,
                        });
                    }
                    None => report.events.push(GraspEvent::Missed { robot: i }),
                }
            } else if !closed && was_closed {
                if let Some(a) = world.attachments[i].take() {
                    report.events.push(GraspEvent::Released {
                        robot: i,
                        object: a.object,
                    });
                }
            }
            world.robots[i].gripper = if closed {
                Gripper::Closed
            } else {
                Gripper::Open
            };
        }

        for i in 0..2 {
            let err = world.grasp_frame(i).map(|g| pose_error(&ee[i], &g));
            world.contact_rate[i] = match (err, world.contact_error[i]) {
                (Some(e), Some(prev)) => (e - prev) / dt,
                _ => Vector6::zeros(),
            };
            world.contact_error[i] = err;
        }
        world.tick += 1;
        Ok(report)
    }
}

/// Moves every held object with its gripper(s).
fn follow_grippers(world: &mut WorldState, ee: &[Pose; 2]) {
    for (k, obj) in world.objects.iter_mut().enumerate() {
        let candidates: Vec<Pose> = (0..2)
            .filter_map(|i| {
                world.attachments[i]
                    .filter(|a| a.object == k)
                    .map(|a| ee[i].compose(&a.offset.inverse()))
            })
            .collect();
        match candidates.as_slice() {
            [one] => obj.pose = *one,
            [a, b] => obj.pose = fit_pose(a, b),
            _ => {}
        }
    }
}

/// Nearest grasp frame within `radius` of the gripper.
fn capture(world: &WorldState, ee: &Pose, radius: f64) -> Option<Attachment> {
    let mut best: Option<(f64, usize)> = None;
    for (k, obj) in world.objects.iter().enumerate() {
        for frame in &obj.grasp_frames {
            let d = (obj.pose.compose(frame).translation() - ee.translation()).norm();
            if d <= radius && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, k));
            }
        }
    }
    best.map(|(_, k)| Attachment {
        object: k,
        offset: world.objects[k].pose.inverse().compose(ee),
    })
}

/// Wrench the gripper of `robot` exerts on its object, in the object frame:
/// stiffness times the gripper's offset from its grasp frame plus damping
/// times the offset rate.
pub fn contact_wrench(
    world: &WorldState,
    model: &RobotModel,
    robot: usize,
    params: &ContactParams,
) -> Result<Vector6<f64>, SimError> {
    let grasp = world
        .grasp_frame(robot)
        .ok_or(SimError::NotAttached(robot))?;
    let ee = forward_kinematics(model, &world.robots[robot])?;
    let e = pose_error(&ee, &grasp);
    let rate = world.contact_rate[robot];
    let obj = world.objects[world.attachments[robot]
        .expect("grasp frame implies attachment")
        .object]
        .pose;
    let r_inv = obj.rotation().inverse();
    let lin = r_inv
        * (e.fixed_rows::<3>(0) * params.stiffness_linear
            + rate.fixed_rows::<3>(0) * params.damping_linear);
    let ang = r_inv
        * (e.fixed_rows::<3>(3) * params.stiffness_angular
            + rate.fixed_rows::<3>(3) * params.damping_angular);
    Ok(Vector6::new(lin.x, lin.y, lin.z, ang.x, ang.y, ang.z))
}

/// Closed-chain contact state when both grippers hold the same object.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedChain {
    pub object: usize,
    pub grasp: GraspModel,
    pub measured: StackedWrench,
    pub split: WrenchSplit,
}

impl ClosedChain {
    pub fn internal_norm(&self) -> f64 {
        self.split.internal.norm()
    }
}

pub fn closed_chain(
    world: &WorldState,
    model: &RobotModel,
    params: &ContactParams,
) -> Result<Option<ClosedChain>, SimError> {
    let Some(object) = world.shared_object() else {
        return Ok(None);
    };
    let frames = [0, 1].map(|i| world.grasp_frame(i).expect("shared object implies grasps"));
    let grasp = GraspModel::new(world.objects[object].pose, frames)?;
    let mut measured = StackedWrench::zeros();
    for i in 0..2 {
        let w = contact_wrench(world, model, i, params)?;
        measured.fixed_rows_mut::<6>(6 * i).copy_from(&w);
    }
    let split = grasp.decompose(&measured);
    Ok(Some(ClosedChain {
        object,
        grasp,
        measured,
        split,
    }))
}

/// Smallest sphere-surface gap between each robot and the obstacles or the
/// other robot (no margin). Negative means contact.
pub fn collision_clearance(world: &WorldState, model: &RobotModel) -> Result<f64, SimError> {
    let spheres = [
        sphere_centers(model, &world.robots[0].base_pose, &world.robots[0].q_arm)?,
        sphere_centers(model, &world.robots[1].base_pose, &world.robots[1].q_arm)?,
    ];
    let mut h = f64::INFINITY;
    for own in &spheres {
        for a in own {
            for b in &world.obstacles {
                h = h.min(sphere_gap(a, b));
            }
        }
    }
    for a in &spheres[0] {
        for b in &spheres[1] {
            h = h.min(sphere_gap(a, b));
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    Timeout,
    Overstress,
    Collision,
    GraspMissed,
    GraspLost,
    Misplaced,
    Fault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "reason")]
pub enum Outcome {
    Running,
    Success,
    Failure(FailureReason),
}

impl Outcome {
    pub fn is_terminal(self) -> bool {
        self != Outcome::Running
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Running => f.write_str("running"),
            Outcome::Success => f.write_str("success"),
            Outcome::Failure(r) => {
                let s = serde_json::to_value(r)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from));
                write!(f, "failure({})", s.unwrap_or_default())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuccessTolerances {
    pub placement_m: f64,
    pub goal_radius_m: f64,
    pub insertion_m: f64,
    pub max_internal_force_n: f64,
    pub max_tilt_rad: f64,
}

impl Default for SuccessTolerances {
    fn default() -> Self {
        Self {
            placement_m: 0.05,
            goal_radius_m: 0.15,
            insertion_m: 0.02,
            max_internal_force_n: 60.0,
            max_tilt_rad: 0.3,
        }
    }
}

/// Task adjudication. Object indices follow the task layouts: the bottle
/// in handover, the rod in carrying, the container (0) and bottle (1) in
/// packing.
#[derive(Debug, Clone, PartialEq)]
pub struct SuccessCheck {
    pub task: Task,
    /// World-frame goal pose.
    pub goal: Pose,
    pub tolerances: SuccessTolerances,
    pub success_tick: u64,
    pub timeout_tick: u64,
}

impl SuccessCheck {
    pub fn check(
        &self,
        world: &WorldState,
        events: &[GraspEvent],
        internal_force: f64,
        clearance: f64,
    ) -> Outcome {
        let tol = &self.tolerances;
        if internal_force > tol.max_internal_force_n {
            return Outcome::Failure(FailureReason::Overstress);
        }
        if clearance < 0.0 {
            return Outcome::Failure(FailureReason::Collision);
        }
        for e in events {
            match *e {
                GraspEvent::Missed { .. } => return Outcome::Failure(FailureReason::GraspMissed),
                GraspEvent::Released { object, .. } => {
                    if let Some(o) = self.on_release(world, object) {
                        return o;
                    }
                }
                GraspEvent::Captured { .. } => {}
            }
        }
        if self.task == Task::Carrying && world.tick >= self.success_tick {
            let rod = &world.objects[0];
            let inside =
                (rod.pose.translation() - self.goal.translation()).norm() <= tol.goal_radius_m;
            if world.holders(0) == 2 && inside {
                return Outcome::Success;
            }
        }
        if world.tick >= self.timeout_tick {
            return Outcome::Failure(FailureReason::Timeout);
        }
        Outcome::Running
    }

    fn on_release(&self, world: &WorldState, object: usize) -> Option<Outcome> {
        let tol = &self.tolerances;
        let free = world.holders(object) == 0;
        match self.task {
            Task::Carrying => Some(Outcome::Failure(FailureReason::GraspLost)),
            Task::Handover => free.then(|| {
                let d = (world.objects[object].pose.translation() - self.goal.translation()).norm();
                if d <= tol.placement_m {
                    Outcome::Success
                } else {
                    Outcome::Failure(FailureReason::Misplaced)
                }
            }),
            Task::Packing if object == 0 => Some(Outcome::Failure(FailureReason::GraspLost)),
            Task::Packing => free.then(|| {
                if inserted(&world.objects[0], &world.objects[object], tol) {
                    Outcome::Success
                } else {
                    Outcome::Failure(FailureReason::Misplaced)
                }
            }),
        }
    }
}

/// Bottle axis within the insertion tolerance of the container axis, bottom
/// below the rim, container upright.
pub fn inserted(container: &SimObject, bottle: &SimObject, tol: &SuccessTolerances) -> bool {
    let rel = container.pose.inverse().compose(&bottle.pose);
    let t = rel.translation();
    let axis = rel.rotation() * Vector3::z();
    let bottom = t - axis * bottle.half_height;
    let lateral = (t.x * t.x + t.y * t.y).sqrt();
    lateral <= tol.insertion_m
        && bottom.z < container.half_height
        && container.tilt() <= tol.max_tilt_rad
}
