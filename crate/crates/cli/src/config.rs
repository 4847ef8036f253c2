//! Scenario configuration: JSON with a schema version, unknown keys
//! rejected, every numeric field validated with its path.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use duoloco::geometry::Pose;
use duoloco::kinematics::Sphere;
use duoloco::mpc::MpcParams;
use duoloco::refgen::{ChunkParams, DriftSchedule, FrameMode, Task, TaskLayout};
use duoloco::sim::{SimParams, SuccessTolerances};
use duoloco::wbc::WbcParams;
use duoloco::RobotModel;
use nalgebra::{DVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: at `{field}`: {msg}")]
    Parse {
        file: String,
        field: String,
        msg: String,
    },
    #[error("`{field}`: {msg}")]
    Invalid { field: String, msg: String },
}

fn invalid(field: &str, msg: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        msg: msg.to_string(),
    }
}

/// Global placement of the whole scene. The rigid transform `g` is a yaw
/// about the world z axis followed by a translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct InitialConfig {
    pub global_yaw: f64,
    /// When set, a seeded uniform draw from this range is added to `global_yaw`.
    pub yaw_range: Option<[f64; 2]>,
    pub global_translation: [f64; 3],
    /// Initial arm posture for both robots; the model's nominal one if unset.
    pub arm_posture: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmittanceConfig {
    pub enabled: bool,
    /// Diagonal of the admittance damping, N s/m for forces.
    pub damping_linear: f64,
    /// N m s/rad for torques.
    pub damping_angular: f64,
    /// Desired squeeze along the grasp axis (N).
    pub desired_squeeze_n: f64,
    /// Cap on the integrated per-arm yield offset (m).
    pub max_offset_m: f64,
}

impl Default for AdmittanceConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            damping_linear: 200.0,
            damping_angular: 50.0,
            desired_squeeze_n: 5.0,
            max_offset_m: 0.15,
        }
    }
}

/// Base push in the robot's base frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub robot: usize,
    pub force: [f64; 3],
    pub duration_s: f64,
    pub start_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub task: Task,
    #[serde(default = "default_frame")]
    pub frame_mode: FrameMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ticks")]
    pub episode_ticks: u64,
    /// JSON robot model shared by both robots, relative to the config file.
    #[serde(default)]
    pub robot_model: Option<PathBuf>,
    #[serde(default)]
    pub initial: InitialConfig,
    /// Task geometry and scripts; the built-in layout of `task` if unset.
    #[serde(default)]
    pub layout: Option<TaskLayout>,
    /// Obstacles in the nominal world frame (moved with the scene).
    #[serde(default)]
    pub obstacles: Vec<Sphere>,
    #[serde(default)]
    pub mpc: MpcParams,
    /// Plan every this many control ticks.
    #[serde(default = "default_mpc_every")]
    pub mpc_every: u64,
    #[serde(default)]
    pub wbc: WbcParams,
    #[serde(default)]
    pub admittance: AdmittanceConfig,
    #[serde(default)]
    pub perturbations: Vec<PerturbationSpec>,
    #[serde(default)]
    pub drift: DriftSchedule,
    #[serde(default)]
    pub tolerances: SuccessTolerances,
    #[serde(default)]
    pub sim: SimParams,
    #[serde(default)]
    pub chunk: ChunkParams,
    /// Cutoff of the observation low-pass (Hz).
    #[serde(default = "default_cutoff")]
    pub observation_cutoff_hz: f64,
}

fn default_frame() -> FrameMode {
    FrameMode::Canonical
}
fn default_ticks() -> u64 {
    1300
}
fn default_mpc_every() -> u64 {
    10
}
fn default_cutoff() -> f64 {
    10.0
}

impl ScenarioConfig {
    /// Built-in scenario for `task` with every default.
    pub fn for_task(task: Task) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            task,
            frame_mode: default_frame(),
            seed: 0,
            episode_ticks: default_ticks(),
            robot_model: None,
            initial: InitialConfig::default(),
            layout: None,
            obstacles: Vec::new(),
            mpc: MpcParams::default(),
            mpc_every: default_mpc_every(),
            wbc: WbcParams::default(),
            admittance: AdmittanceConfig::default(),
            perturbations: Vec::new(),
            drift: DriftSchedule::default(),
            tolerances: SuccessTolerances::default(),
            sim: SimParams::default(),
            chunk: ChunkParams::default(),
            observation_cutoff_hz: default_cutoff(),
        }
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            file: origin.to_string(),
            field: e.path().to_string(),
            msg: e.inner().to_string(),
        })
    }

    /// Reads, parses and validates a config; relative model paths are
    /// resolved against the config's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json(&text, &path.display().to_string())?;
        if let Some(model) = &cfg.robot_model {
            if model.is_relative() {
                let dir = path.parent().unwrap_or(Path::new("."));
                cfg.robot_model = Some(dir.join(model));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn layout(&self) -> TaskLayout {
        self.layout
            .clone()
            .unwrap_or_else(|| TaskLayout::default_for(self.task))
    }

    pub fn robot(&self) -> Result<RobotModel, ConfigError> {
        let Some(path) = &self.robot_model else {
            return Ok(RobotModel::quadruped_arm());
        };
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.clone(),
            source,
        })?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let model: RobotModel =
            serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
                file: path.display().to_string(),
                field: e.path().to_string(),
                msg: e.inner().to_string(),
            })?;
        model.validate().map_err(|e| invalid("robot_model", e))?;
        Ok(model)
    }

    pub fn posture(&self, model: &RobotModel) -> DVector<f64> {
        match &self.initial.arm_posture {
            Some(q) => DVector::from_column_slice(q),
            None if model.dof() == 6 => RobotModel::quadruped_arm_posture(),
            None => DVector::from_iterator(
                model.dof(),
                model.joint_limits.iter().map(|[lo, hi]| 0.5 * (lo + hi)),
            ),
        }
    }

    /// Global yaw of the scene including the seeded draw, if configured.
    pub fn effective_yaw(&self) -> f64 {
        use rand::Rng;
        match self.initial.yaw_range {
            Some([lo, hi]) if hi > lo => {
                let mut rng = duoloco::stream_rng(self.seed, 32);
                self.initial.global_yaw + rng.random_range(lo..hi)
            }
            _ => self.initial.global_yaw,
        }
    }

    pub fn global_transform(&self) -> Pose {
        let t = self.initial.global_translation;
        Pose::from_parts(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.effective_yaw()),
            Vector3::new(t[0], t[1], t[2]),
        )
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!(
                    "unsupported version {} (expected {SCHEMA_VERSION})",
                    self.schema_version
                ),
            ));
        }
        if self.episode_ticks == 0 || self.episode_ticks > 1_000_000 {
            return Err(invalid("episode_ticks", "must lie in 1..=1000000"));
        }
        let model = self.robot()?;
        let n = model.dof();
        self.mpc.validate(n).map_err(|e| invalid("mpc", e))?;
        if self.mpc_every == 0 {
            return Err(invalid("mpc_every", "must be at least 1"));
        }
        self.wbc.validate(6 + n).map_err(|e| invalid("wbc", e))?;
        self.sim.validate().map_err(|e| invalid("sim", e))?;
        if (self.wbc.dt - self.sim.dt).abs() > 1e-12 {
            return Err(invalid("wbc.dt", "must equal sim.dt"));
        }
        self.chunk.validate().map_err(|e| invalid("chunk", e))?;
        let per_action = 1.0 / (self.chunk.rate_hz * self.sim.dt);
        if (per_action - per_action.round()).abs() > 1e-9 || per_action < 1.0 {
            return Err(invalid(
                "chunk.rate_hz",
                "control rate must be an integer multiple of the policy rate",
            ));
        }
        let rate = 1.0 / self.sim.dt;
        if !(self.observation_cutoff_hz > 0.0 && rate > 2.0 * self.observation_cutoff_hz) {
            return Err(invalid(
                "observation_cutoff_hz",
                "must lie in (0, control rate / 2)",
            ));
        }
        self.drift.validate().map_err(|e| invalid("drift", e))?;
        let a = &self.admittance;
        if !(a.damping_linear > 0.0 && a.damping_angular > 0.0) {
            return Err(invalid("admittance", "damping must be positive"));
        }
        if !(a.desired_squeeze_n.is_finite() && a.max_offset_m >= 0.0) {
            return Err(invalid(
                "admittance",
                "desired_squeeze_n must be finite and max_offset_m non-negative",
            ));
        }
        for (i, p) in self.perturbations.iter().enumerate() {
            let field = format!("perturbations[{i}]");
            if p.robot > 1 {
                return Err(invalid(&field, "robot must be 0 or 1"));
            }
            if !(p.duration_s > 0.0 && p.start_s >= 0.0) || !p.force.iter().all(|f| f.is_finite()) {
                return Err(invalid(
                    &field,
                    "needs duration_s > 0, start_s >= 0 and a finite force",
                ));
            }
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.radius > 0.0) || !o.center.iter().all(|c| c.is_finite()) {
                return Err(invalid(
                    &format!("obstacles[{i}]"),
                    "needs a finite centre and positive radius",
                ));
            }
        }
        if let Some(q) = &self.initial.arm_posture {
            if q.len() != n {
                return Err(invalid(
                    "initial.arm_posture",
                    format!("expected {n} joint angles"),
                ));
            }
        }
        if let Some([lo, hi]) = self.initial.yaw_range {
            if !(lo <= hi && lo >= -2.0 * PI && hi <= 2.0 * PI) {
                return Err(invalid(
                    "initial.yaw_range",
                    "needs lo <= hi within [-2 pi, 2 pi]",
                ));
            }
        }
        let layout = self.layout();
        layout.validate().map_err(|e| invalid("layout", e))?;
        let expected = match self.task {
            Task::Packing => 2,
            Task::Handover | Task::Carrying => 1,
        };
        if layout.objects.len() != expected {
            return Err(invalid(
                "layout.objects",
                format!("{} needs {expected} object(s)", self.task),
            ));
        }
        let t = &self.tolerances;
        if [
            t.placement_m,
            t.goal_radius_m,
            t.insertion_m,
            t.max_internal_force_n,
            t.max_tilt_rad,
        ]
        .iter()
        .any(|v| !(*v > 0.0))
        {
            return Err(invalid("tolerances", "all tolerances must be positive"));
        }
        Ok(())
    }
}
