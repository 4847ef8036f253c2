//! Scripted reference provider with the canonical observation/action
//! contract of a learned chunking policy.
//!
//! Observations and actions are expressed relative to `T_ref`, the primary
//! robot's initial base pose, in [`FrameMode::Canonical`]; the
//! [`FrameMode::AbsoluteWorld`] baseline replays world-frame waypoints
//! recorded at the nominal configuration.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{canonicalize, decanonicalize, Pose};
use crate::stream_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefgenError {
    #[error("unknown task '{0}' (expected handover, carrying or packing)")]
    UnknownTask(String),
    #[error("unknown frame mode '{0}' (expected bw or w)")]
    UnknownFrameMode(String),
    #[error("observation history has {actual} entries, expected {expected}")]
    IncompleteHistory { expected: usize, actual: usize },
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("invalid script for robot {robot}: {msg}")]
    Script { robot: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Handover,
    Carrying,
    Packing,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Handover, Task::Carrying, Task::Packing];

    pub fn name(self) -> &'static str {
        match self {
            Task::Handover => "handover",
            Task::Carrying => "carrying",
            Task::Packing => "packing",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = RefgenError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| RefgenError::UnknownTask(s.to_string()))
    }
}

/// Frame the provider consumes and emits poses in. Fixed per episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameMode {
    #[serde(rename = "bw")]
    Canonical,
    #[serde(rename = "w")]
    AbsoluteWorld,
}

impl fmt::Display for FrameMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrameMode::Canonical => "bw",
            FrameMode::AbsoluteWorld => "w",
        })
    }
}

impl FromStr for FrameMode {
    type Err = RefgenError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bw" => Ok(FrameMode::Canonical),
            "w" => Ok(FrameMode::AbsoluteWorld),
            _ => Err(RefgenError::UnknownFrameMode(s.to_string())),
        }
    }
}

impl FrameMode {
    /// Pose in the provider's frame from a world pose.
    pub fn observe(self, t_ref: &Pose, world: &Pose) -> Pose {
        match self {
            FrameMode::Canonical => canonicalize(t_ref, world),
            FrameMode::AbsoluteWorld => *world,
        }
    }

    /// World pose from a pose in the provider's frame.
    pub fn to_world(self, t_ref: &Pose, pose: &Pose) -> Pose {
        match self {
            FrameMode::Canonical => decanonicalize(t_ref, pose),
            FrameMode::AbsoluteWorld => *pose,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub target: Pose,
    pub gripper_closed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotObservation {
    pub ee: Pose,
    pub gripper_closed: bool,
}

/// Observation history, oldest first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Observation {
    pub history: Vec<[RobotObservation; 2]>,
}

impl Observation {
    /// Appends a frame and keeps at most `t_o` entries.
    pub fn push(&mut self, frame: [RobotObservation; 2], t_o: usize) {
        self.history.push(frame);
        if self.history.len() > t_o {
            let excess = self.history.len() - t_o;
            self.history.drain(..excess);
        }
    }

    pub fn latest(&self) -> Option<&[RobotObservation; 2]> {
        self.history.last()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    /// Monotonically increasing per generator.
    pub index: u64,
    /// Control tick the chunk was generated at.
    pub tick: u64,
    /// `actions[j]` targets time `tick * dt + (j + 1) / rate_hz`.
    pub actions: Vec<[Action; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChunkParams {
    /// Observation history length.
    pub t_o: usize,
    /// Predicted actions per chunk.
    pub t_p: usize,
    /// Actions executed before requesting a new chunk.
    pub t_a: usize,
    pub rate_hz: f64,
}

impl Default for ChunkParams {
    fn default() -> Self {
        Self {
            t_o: 2,
            t_p: 16,
            t_a: 8,
            rate_hz: 20.0,
        }
    }
}

impl ChunkParams {
    pub fn validate(&self) -> Result<(), RefgenError> {
        if self.t_o == 0 {
            return Err(RefgenError::Params("t_o must be at least 1".into()));
        }
        if self.t_a == 0 || self.t_a > self.t_p {
            return Err(RefgenError::Params(format!(
                "need 1 <= t_a <= t_p, got t_a = {}, t_p = {}",
                self.t_a, self.t_p
            )));
        }
        if !(self.rate_hz > 0.0) {
            return Err(RefgenError::Params("rate_hz must be positive".into()));
        }
        Ok(())
    }
}

/// End-effector waypoint; the gripper state holds from `time_s` until the
/// next waypoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub time_s: f64,
    pub pose: Pose,
    pub gripper_closed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub name: String,
    pub pose: Pose,
    /// Gripper poses relative to the object at which a grasp is captured.
    pub grasp_frames: Vec<Pose>,
    /// Half extent along the object's z axis.
    pub half_height: f64,
}

/// Nominal scene geometry and per-robot scripts, all in the nominal world
/// frame (robot 0's base at `robots[0]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskLayout {
    pub robots: [Pose; 2],
    pub objects: Vec<ObjectSpec>,
    /// Handover: final object pose. Carrying: goal region centre.
    /// Packing: unused.
    pub goal: Pose,
    /// Earliest time a carrying episode may be declared successful.
    pub success_time_s: f64,
    pub scripts: [Vec<Waypoint>; 2],
}

fn p(x: f64, y: f64, z: f64, yaw: f64) -> Pose {
    Pose::from_xyz_yaw(x, y, z, yaw)
}

fn wp(time_s: f64, pose: Pose, gripper_closed: bool) -> Waypoint {
    Waypoint {
        time_s,
        pose,
        gripper_closed,
    }
}

impl TaskLayout {
    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Handover => Self::handover(),
            Task::Carrying => Self::carrying(),
            Task::Packing => Self::packing(),
        }
    }

    fn handover() -> Self {
        let bottle = ObjectSpec {
            name: "bottle".into(),
            pose: p(1.4, 0.0, 0.50, 0.0),
            grasp_frames: vec![p(0.0, 0.0, -0.04, 0.0), p(0.0, 0.0, 0.04, PI)],
            half_height: 0.1,
        };
        let (xt, zt) = (1.95, 0.55);
        let goal = p(2.2, 0.7, 0.50, 0.0);
        let giver = vec![
            wp(2.5, p(1.28, 0.0, 0.46, 0.0), false),
            wp(3.5, p(1.4, 0.0, 0.46, 0.0), false),
            wp(3.8, p(1.4, 0.0, 0.46, 0.0), true),
            wp(4.3, p(1.4, 0.0, 0.50, 0.0), true),
            wp(6.5, p(xt, 0.0, zt - 0.04, 0.0), true),
            wp(7.9, p(xt, 0.0, zt - 0.04, 0.0), false),
            wp(8.6, p(xt - 0.15, 0.0, zt - 0.04, 0.0), false),
        ];
        let receiver = vec![
            wp(5.0, p(xt + 0.15, 0.0, zt + 0.04, PI), false),
            wp(6.5, p(xt + 0.15, 0.0, zt + 0.04, PI), false),
            wp(7.2, p(xt, 0.0, zt + 0.04, PI), false),
            wp(7.5, p(xt, 0.0, zt + 0.04, PI), true),
            wp(8.2, p(xt, 0.0, zt + 0.08, PI), true),
            wp(10.5, p(2.2, 0.7, 0.54, PI), true),
            wp(10.8, p(2.2, 0.7, 0.54, PI), false),
            wp(11.4, p(2.35, 0.7, 0.58, PI), false),
        ];
        Self {
            robots: [p(0.0, 0.0, 0.3, 0.0), p(3.4, 0.0, 0.3, PI)],
            objects: vec![bottle],
            goal,
            success_time_s: 0.0,
            scripts: [giver, receiver],
        }
    }

    fn carrying() -> Self {
        let rod = ObjectSpec {
            name: "rod".into(),
            pose: p(0.7, 0.5, 0.45, 0.0),
            grasp_frames: vec![p(0.0, -0.5, 0.0, 0.0), p(0.0, 0.5, 0.0, 0.0)],
            half_height: 0.02,
        };
        let script = |y: f64| {
            vec![
                wp(1.5, p(0.7, y, 0.52, 0.0), false),
                wp(2.5, p(0.7, y, 0.45, 0.0), false),
                wp(2.8, p(0.7, y, 0.45, 0.0), true),
                wp(3.5, p(0.7, y, 0.50, 0.0), true),
                wp(9.0, p(2.7, y, 0.50, 0.0), true),
            ]
        };
        Self {
            robots: [p(0.0, 0.0, 0.3, 0.0), p(0.0, 1.0, 0.3, 0.0)],
            objects: vec![rod],
            goal: p(2.7, 0.5, 0.50, 0.0),
            success_time_s: 10.5,
            scripts: [script(0.0), script(1.0)],
        }
    }

    fn packing() -> Self {
        let container = ObjectSpec {
            name: "container".into(),
            pose: p(0.8, 0.0, 0.42, 0.0),
            grasp_frames: vec![p(-0.06, 0.0, 0.0, 0.0)],
            half_height: 0.06,
        };
        let bottle = ObjectSpec {
            name: "bottle".into(),
            pose: p(1.25, 0.25, 0.45, 0.0),
            grasp_frames: vec![p(0.0, 0.0, 0.04, PI)],
            half_height: 0.08,
        };
        let holder = vec![
            wp(1.5, p(0.64, 0.0, 0.45, 0.0), false),
            wp(2.5, p(0.74, 0.0, 0.42, 0.0), false),
            wp(2.8, p(0.74, 0.0, 0.42, 0.0), true),
            wp(4.0, p(0.79, 0.0, 0.55, 0.0), true),
        ];
        let inserter = vec![
            wp(1.5, p(1.25, 0.25, 0.56, PI), false),
            wp(2.5, p(1.25, 0.25, 0.49, PI), false),
            wp(2.8, p(1.25, 0.25, 0.49, PI), true),
            wp(3.5, p(1.25, 0.25, 0.62, PI), true),
            wp(6.0, p(0.85, 0.0, 0.76, PI), true),
            wp(7.5, p(0.85, 0.0, 0.65, PI), true),
            wp(7.8, p(0.85, 0.0, 0.65, PI), false),
            wp(8.5, p(1.0, 0.0, 0.72, PI), false),
        ];
        Self {
            robots: [p(0.0, 0.0, 0.3, 0.0), p(2.0, 0.0, 0.3, PI)],
            objects: vec![container, bottle],
            goal: Pose::identity(),
            success_time_s: 0.0,
            scripts: [holder, inserter],
        }
    }

    pub fn script_end_s(&self) -> f64 {
        self.scripts
            .iter()
            .filter_map(|s| s.last().map(|w| w.time_s))
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<(), RefgenError> {
        for (robot, script) in self.scripts.iter().enumerate() {
            let err = |msg: &str| RefgenError::Script {
                robot,
                msg: msg.to_string(),
            };
            if script.is_empty() {
                return Err(err("no waypoints"));
            }
            if !(script[0].time_s > 0.0) {
                return Err(err("first waypoint must come after t = 0"));
            }
            if script.windows(2).any(|w| !(w[1].time_s > w[0].time_s)) {
                return Err(err("waypoint times must increase strictly"));
            }
            if script.iter().any(|w| !w.pose.is_finite()) {
                return Err(err("non-finite waypoint"));
            }
        }
        if self.objects.iter().any(|o| o.grasp_frames.is_empty()) {
            return Err(RefgenError::Params(
                "every object needs a grasp frame".into(),
            ));
        }
        Ok(())
    }
}

fn smoothstep(s: f64) -> f64 {
    s * s * (3.0 - 2.0 * s)
}

/// Evaluates a script whose implicit first waypoint is `start` at t = 0.
/// Segments are cubic in time with zero velocity at every waypoint.
pub fn sample_script(start: &RobotObservation, script: &[Waypoint], t: f64) -> Action {
    let mut prev = Waypoint {
        time_s: 0.0,
        pose: start.ee,
        gripper_closed: start.gripper_closed,
    };
    for w in script {
        if t < w.time_s {
            let s = smoothstep(((t - prev.time_s) / (w.time_s - prev.time_s)).clamp(0.0, 1.0));
            return Action {
                target: interpolate(&prev.pose, &w.pose, s),
                gripper_closed: prev.gripper_closed,
            };
        }
        prev = *w;
    }
    Action {
        target: prev.pose,
        gripper_closed: prev.gripper_closed,
    }
}

/// Linear in translation, spherical-linear in rotation.
pub fn interpolate(a: &Pose, b: &Pose, s: f64) -> Pose {
    if s <= 0.0 {
        return *a;
    }
    if s >= 1.0 {
        return *b;
    }
    let t = a.translation().lerp(b.translation(), s);
    let r = a
        .rotation()
        .try_slerp(b.rotation(), s, 1e-12)
        .unwrap_or(*a.rotation());
    Pose::from_parts(r, t)
}

/// Deterministic stand-in for the learned joint policy.
#[derive(Debug, Clone)]
pub struct ScriptedGenerator {
    pub task: Task,
    pub mode: FrameMode,
    pub params: ChunkParams,
    /// Scripts in the generator's frame.
    scripts: [Vec<Waypoint>; 2],
    start: Option<[RobotObservation; 2]>,
    next_index: u64,
    tick_dt: f64,
}

impl ScriptedGenerator {
    /// `tick_dt` is the control period the chunk tick counter refers to.
    pub fn new(
        task: Task,
        layout: &TaskLayout,
        mode: FrameMode,
        params: ChunkParams,
        tick_dt: f64,
    ) -> Result<Self, RefgenError> {
        params.validate()?;
        layout.validate()?;
        if !(tick_dt > 0.0) {
            return Err(RefgenError::Params("tick_dt must be positive".into()));
        }
        // The absolute baseline keeps the nominal world waypoints, i.e. the
        // canonical script re-expressed at the nominal reference.
        let t_ref = layout.robots[0];
        let scripts = layout.scripts.clone().map(|s| {
            s.into_iter()
                .map(|w| Waypoint {
                    pose: match mode {
                        FrameMode::Canonical => canonicalize(&t_ref, &w.pose),
                        FrameMode::AbsoluteWorld => w.pose,
                    },
                    ..w
                })
                .collect()
        });
        Ok(Self {
            task,
            mode,
            params,
            scripts,
            start: None,
            next_index: 0,
            tick_dt,
        })
    }

    /// Emits `t_p` actions following the observation at control tick
    /// `tick`. The first call latches the observed poses as the script start.
    pub fn generate_chunk(
        &mut self,
        obs: &Observation,
        tick: u64,
    ) -> Result<ActionChunk, RefgenError> {
        if obs.history.len() < self.params.t_o {
            return Err(RefgenError::IncompleteHistory {
                expected: self.params.t_o,
                actual: obs.history.len(),
            });
        }
        let start = *self.start.get_or_insert(obs.history[0]);
        let t0 = tick as f64 * self.tick_dt;
        let actions = (0..self.params.t_p)
            .map(|j| {
                let t = t0 + (j + 1) as f64 / self.params.rate_hz;
                [0, 1].map(|i| sample_script(&start[i], &self.scripts[i], t))
            })
            .collect();
        let index = self.next_index;
        self.next_index += 1;
        Ok(ActionChunk {
            index,
            tick,
            actions,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExecutorStep {
    Action([Action; 2]),
    NeedChunk,
}

/// Next action of `chunk` after `executed` have been consumed, or a request
/// for a new chunk once `t_a` actions are spent.
pub fn receding_executor_step(chunk: &ActionChunk, executed: usize, t_a: usize) -> ExecutorStep {
    if executed >= t_a || executed >= chunk.actions.len() {
        ExecutorStep::NeedChunk
    } else {
        ExecutorStep::Action(chunk.actions[executed])
    }
}

/// Single-reader end of the chunk handoff; stale chunks are dropped.
#[derive(Debug, Clone)]
pub struct RecedingExecutor {
    pub t_a: usize,
    chunk: Option<ActionChunk>,
    executed: usize,
}

impl RecedingExecutor {
    pub fn new(t_a: usize) -> Self {
        Self {
            t_a,
            chunk: None,
            executed: 0,
        }
    }

    /// Installs `chunk` unless it is older than the current one.
    pub fn accept(&mut self, chunk: ActionChunk) -> bool {
        if self.chunk.as_ref().is_some_and(|c| c.index >= chunk.index) {
            return false;
        }
        self.chunk = Some(chunk);
        self.executed = 0;
        true
    }

    pub fn needs_chunk(&self) -> bool {
        match &self.chunk {
            None => true,
            Some(c) => {
                receding_executor_step(c, self.executed, self.t_a) == ExecutorStep::NeedChunk
            }
        }
    }

    pub fn step(&mut self) -> ExecutorStep {
        let Some(chunk) = &self.chunk else {
            return ExecutorStep::NeedChunk;
        };
        let step = receding_executor_step(chunk, self.executed, self.t_a);
        if matches!(step, ExecutorStep::Action(_)) {
            self.executed += 1;
        }
        step
    }

    /// Actions not yet consumed, including those beyond `t_a`.
    pub fn lookahead(&self) -> &[[Action; 2]] {
        match &self.chunk {
            Some(c) => &c.actions[self.executed.min(c.actions.len())..],
            None => &[],
        }
    }
}

/// Per-sample weight of a first-order low-pass with cutoff `cutoff_hz`
/// sampled at `rate_hz` (exact discretisation).
pub fn lowpass_alpha(cutoff_hz: f64, rate_hz: f64) -> Result<f64, RefgenError> {
    if !(cutoff_hz > 0.0) || !(rate_hz > 2.0 * cutoff_hz) {
        return Err(RefgenError::Params(format!(
            "low-pass needs rate > 2 * cutoff > 0, got cutoff {cutoff_hz} Hz at {rate_hz} Hz"
        )));
    }
    Ok(1.0 - (-2.0 * PI * cutoff_hz / rate_hz).exp())
}

/// Streaming first-order filter on translation and rotation.
#[derive(Debug, Clone)]
pub struct PoseLowPass {
    alpha: f64,
    state: Option<Pose>,
}

impl PoseLowPass {
    pub fn new(cutoff_hz: f64, rate_hz: f64) -> Result<Self, RefgenError> {
        Ok(Self {
            alpha: lowpass_alpha(cutoff_hz, rate_hz)?,
            state: None,
        })
    }

    pub fn update(&mut self, x: &Pose) -> Pose {
        let next = match &self.state {
            None => *x,
            Some(s) => {
                let t = s.translation() + (x.translation() - s.translation()) * self.alpha;
                let (a, mut b) = (s.rotation().coords, x.rotation().coords);
                if a.dot(&b) < 0.0 {
                    b = -b;
                }
                let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(
                    a + (b - a) * self.alpha,
                ));
                Pose::from_parts(q, t)
            }
        };
        self.state = Some(next);
        next
    }
}

pub fn lowpass_filter(
    traj: &[Pose],
    cutoff_hz: f64,
    rate_hz: f64,
) -> Result<Vec<Pose>, RefgenError> {
    let mut f = PoseLowPass::new(cutoff_hz, rate_hz)?;
    Ok(traj.iter().map(|x| f.update(x)).collect())
}

/// Uncoordinated per-robot reference drift: a planar random walk on the
/// drift velocity, active inside a time window and clamped in speed and
/// magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftSchedule {
    pub enabled: bool,
    pub start_s: f64,
    pub end_s: f64,
    /// Random-walk intensity of the drift velocity, m/s per sqrt(s).
    pub accel_std: f64,
    pub max_speed: f64,
    pub max_offset: f64,
}

impl Default for DriftSchedule {
    fn default() -> Self {
        Self {
            enabled: false,
            start_s: 3.5,
            end_s: 8.0,
            accel_std: 0.15,
            max_speed: 0.05,
            max_offset: 0.15,
        }
    }
}

impl DriftSchedule {
    pub fn validate(&self) -> Result<(), RefgenError> {
        if !(self.end_s >= self.start_s) {
            return Err(RefgenError::Params(
                "drift end_s must not precede start_s".into(),
            ));
        }
        if [self.accel_std, self.max_speed, self.max_offset]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return Err(RefgenError::Params(
                "drift magnitudes must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn clamp_norm(v: Vector2<f64>, cap: f64) -> Vector2<f64> {
    let n = v.norm();
    if n > cap {
        v * (cap / n)
    } else {
        v
    }
}

#[derive(Debug, Clone)]
pub struct Drift {
    pub schedule: DriftSchedule,
    offsets: [Vector2<f64>; 2],
    velocities: [Vector2<f64>; 2],
    rngs: [ChaCha8Rng; 2],
}

/// Random streams 16 and 17 of the episode seed.
pub const DRIFT_STREAM: u64 = 16;

impl Drift {
    pub fn new(schedule: DriftSchedule, seed: u64) -> Self {
        Self {
            schedule,
            offsets: [Vector2::zeros(); 2],
            velocities: [Vector2::zeros(); 2],
            rngs: [0, 1].map(|i| stream_rng(seed, DRIFT_STREAM + i)),
        }
    }

    /// Advances the walk over `[t, t + dt)`.
    pub fn advance(&mut self, t: f64, dt: f64) {
        let s = self.schedule;
        if !s.enabled || t < s.start_s || t >= s.end_s {
            self.velocities = [Vector2::zeros(); 2];
            return;
        }
        let scale = s.accel_std * dt.sqrt();
        for i in 0..2 {
            let rng = &mut self.rngs[i];
            let n = Vector2::new(StandardNormal.sample(rng), StandardNormal.sample(rng));
            self.velocities[i] = clamp_norm(self.velocities[i] + n * scale, s.max_speed);
            self.offsets[i] = clamp_norm(self.offsets[i] + self.velocities[i] * dt, s.max_offset);
        }
    }

    /// Offset of robot `i` in the provider frame's horizontal plane.
    pub fn offset(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.offsets[i].x, self.offsets[i].y, 0.0)
    }

    pub fn apply(&self, i: usize, action: &Action) -> Action {
        let t = action.target.translation() + self.offset(i);
        Action {
            target: Pose::from_parts(*action.target.rotation(), t),
            ..*action
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs_at(layout: &TaskLayout, mode: FrameMode, g: &Pose, ee: [Pose; 2]) -> Observation {
        let t_ref = g.compose(&layout.robots[0]);
        let frame = ee.map(|e| RobotObservation {
            ee: mode.observe(&t_ref, &g.compose(&e)),
            gripper_closed: false,
        });
        Observation {
            history: vec![frame, frame],
        }
    }

    fn layout_ee(layout: &TaskLayout) -> [Pose; 2] {
        [0, 1].map(|i| layout.robots[i].compose(&p(0.67, 0.0, 0.24, 0.0)))
    }

    #[test]
    fn task_names_round_trip() {
        for t in Task::ALL {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
        }
        assert_eq!(
            "juggling".parse::<Task>(),
            Err(RefgenError::UnknownTask("juggling".into()))
        );
        assert_eq!("BW".parse::<FrameMode>().unwrap(), FrameMode::Canonical);
    }

    #[test]
    fn handover_targets_meet_at_transfer() {
        let layout = TaskLayout::default_for(Task::Handover);
        let mut gen = ScriptedGenerator::new(
            Task::Handover,
            &layout,
            FrameMode::Canonical,
            ChunkParams::default(),
            0.01,
        )
        .unwrap();
        let obs = obs_at(
            &layout,
            FrameMode::Canonical,
            &Pose::identity(),
            layout_ee(&layout),
        );
        // chunk starting 0.05 s before the receiver closes at 7.5 s
        let chunk = gen.generate_chunk(&obs, 745).unwrap();
        let [giver, receiver] = chunk.actions[0];
        assert!(receiver.gripper_closed && giver.gripper_closed);
        // both grasp frames of the bottle, 8 cm apart along its axis
        let bottle = giver
            .target
            .compose(&layout.objects[0].grasp_frames[0].inverse());
        let expected = bottle.compose(&layout.objects[0].grasp_frames[1]);
        let (dt, dr) = expected.distance(&receiver.target);
        assert!(dt < 1e-12 && dr < 1e-12, "{dt} {dr}");
    }

    #[test]
    fn canonical_chunks_are_invariant() {
        let layout = TaskLayout::default_for(Task::Packing);
        let ee = layout_ee(&layout);
        let g = Pose::new(0.3, -0.5, 0.7, 0.2, Vector3::new(4.0, -2.0, 1.0));
        let mut a = ScriptedGenerator::new(
            Task::Packing,
            &layout,
            FrameMode::Canonical,
            ChunkParams::default(),
            0.01,
        )
        .unwrap();
        let mut b = a.clone();
        let ca = a
            .generate_chunk(
                &obs_at(&layout, FrameMode::Canonical, &Pose::identity(), ee),
                300,
            )
            .unwrap();
        let cb = b
            .generate_chunk(&obs_at(&layout, FrameMode::Canonical, &g, ee), 300)
            .unwrap();
        for (x, y) in ca.actions.iter().zip(&cb.actions) {
            for i in 0..2 {
                let (dt, dr) = x[i].target.distance(&y[i].target);
                assert!(dt < 1e-9 && dr < 1e-9);
            }
        }
    }

    #[test]
    fn absolute_mode_ignores_global_yaw() {
        let layout = TaskLayout::default_for(Task::Handover);
        let g = p(0.0, 0.0, 0.0, PI / 2.0);
        let mut gen = ScriptedGenerator::new(
            Task::Handover,
            &layout,
            FrameMode::AbsoluteWorld,
            ChunkParams::default(),
            0.01,
        )
        .unwrap();
        let chunk = gen
            .generate_chunk(
                &obs_at(&layout, FrameMode::AbsoluteWorld, &g, layout_ee(&layout)),
                350,
            )
            .unwrap();
        // the giver heads for the nominal grasp although the bottle was rotated
        let grasp = layout.objects[0]
            .pose
            .compose(&layout.objects[0].grasp_frames[0]);
        let moved = g.compose(&grasp);
        let target = chunk.actions[0][0].target;
        assert!((target.translation() - grasp.translation()).norm() < 1e-3);
        let miss = (target.translation() - moved.translation()).norm();
        let displacement = (moved.translation() - grasp.translation()).norm();
        assert!((miss - displacement).abs() < 1e-3 && displacement > 1.5);
    }

    #[test]
    fn executor_consumes_t_a_actions_per_chunk() {
        let actions: Vec<_> = (0..16)
            .map(|j| {
                let a = Action {
                    target: p(j as f64, 0.0, 0.0, 0.0),
                    gripper_closed: false,
                };
                [a, a]
            })
            .collect();
        let mut ex = RecedingExecutor::new(8);
        assert_eq!(ex.step(), ExecutorStep::NeedChunk);
        let mut consumed = Vec::new();
        for index in 0..3 {
            assert!(ex.accept(ActionChunk {
                index,
                tick: 0,
                actions: actions.clone(),
            }));
            while let ExecutorStep::Action(a) = ex.step() {
                consumed.push(a[0].target.translation().x);
            }
        }
        let expected: Vec<f64> = (0..3).flat_map(|_| (0..8).map(|j| j as f64)).collect();
        assert_eq!(consumed, expected);
        // stale chunk rejected
        assert!(!ex.accept(ActionChunk {
            index: 1,
            tick: 0,
            actions,
        }));
    }

    #[test]
    fn single_action_execution_replans_every_tick() {
        let a = Action {
            target: Pose::identity(),
            gripper_closed: true,
        };
        let chunk = ActionChunk {
            index: 0,
            tick: 0,
            actions: vec![[a, a]; 16],
        };
        assert_eq!(
            receding_executor_step(&chunk, 0, 1),
            ExecutorStep::Action([a, a])
        );
        assert_eq!(
            receding_executor_step(&chunk, 1, 1),
            ExecutorStep::NeedChunk
        );
    }

    #[test]
    fn constant_trajectory_is_a_fixed_point() {
        let x = Pose::new(0.9, 0.1, -0.3, 0.2, Vector3::new(1.0, 2.0, 3.0));
        let out = lowpass_filter(&vec![x; 50], 5.0, 100.0).unwrap();
        for y in out {
            let (dt, dr) = x.distance(&y);
            assert!(dt < 1e-15 && dr < 1e-7);
        }
        assert!(lowpass_filter(&[x], 60.0, 100.0).is_err());
    }

    #[test]
    fn step_response_time_constant() {
        let (f, rate) = (2.0, 1000.0);
        let mut traj = vec![Pose::identity()];
        traj.extend(vec![Pose::from_translation(Vector3::x()); 2000]);
        let out = lowpass_filter(&traj, f, rate).unwrap();
        let k = (rate / (2.0 * PI * f)).round() as usize;
        let y = out[k].translation().x;
        let expected = 1.0 - (-1.0f64).exp();
        assert!((y - expected).abs() / expected < 0.05, "{y}");
    }

    #[test]
    fn drift_is_windowed_and_clamped() {
        let schedule = DriftSchedule {
            enabled: true,
            start_s: 1.0,
            end_s: 3.0,
            accel_std: 1.0,
            max_speed: 0.05,
            max_offset: 0.06,
        };
        let mut d = Drift::new(schedule, 7);
        let mut prev = [Vector3::zeros(); 2];
        for k in 0..100 {
            let t = k as f64 * 0.05;
            d.advance(t, 0.05);
            for i in 0..2 {
                let o = d.offset(i);
                assert!(o.norm() <= 0.06 + 1e-12);
                assert!((o - prev[i]).norm() <= 0.05 * 0.05 + 1e-12);
                if !(1.0..3.0).contains(&t) {
                    assert_eq!(o, prev[i]);
                }
                prev[i] = o;
            }
        }
        assert_ne!(d.offset(0), d.offset(1));
        let mut again = Drift::new(schedule, 7);
        for k in 0..100 {
            again.advance(k as f64 * 0.05, 0.05);
        }
        assert_eq!(again.offset(0), d.offset(0));
    }
}
