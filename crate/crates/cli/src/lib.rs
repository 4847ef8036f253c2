//! Scenario runner and experiment harness for the duoloco stack.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod metrics;
pub mod runner;
pub mod sweep;

pub use config::{ConfigError, ScenarioConfig};
pub use metrics::{export_metrics, ExportPaths};
pub use runner::{run_scenario, EpisodeMetrics, RunError};
pub use sweep::{run_sweep, SweepSpec, SweepTable};

use config::PerturbationSpec;
use duoloco::refgen::{FrameMode, Task};

/// Command-line overrides, applied on top of a config in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub task: Option<Task>,
    pub frame: Option<FrameMode>,
    pub no_admittance: bool,
    /// `(force N, duration s, start s)`: a lateral push on robot 0.
    pub perturb: Option<(f64, f64, f64)>,
    pub yaw: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ScenarioConfig) {
        if let Some(task) = self.task {
            if task != cfg.task {
                cfg.task = task;
                cfg.layout = None;
            }
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(frame) = self.frame {
            cfg.frame_mode = frame;
        }
        if self.no_admittance {
            cfg.admittance.enabled = false;
        }
        if let Some((f, dur, start)) = self.perturb {
            cfg.perturbations = vec![PerturbationSpec {
                robot: 0,
                force: [0.0, f, 0.0],
                duration_s: dur,
                start_s: start,
            }];
        }
        if let Some(yaw) = self.yaw {
            cfg.initial.global_yaw = yaw;
            cfg.initial.yaw_range = None;
        }
    }
}

/// Parses `F,DUR,T_START`.
pub fn parse_perturb(s: &str) -> Result<(f64, f64, f64), String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [f, d, t] if d.is_finite() && *d > 0.0 && *t >= 0.0 && f.is_finite() => Ok((*f, *d, *t)),
        [_, _, _] => Err("need a finite force, positive duration and non-negative start".into()),
        _ => Err(format!("expected F,DUR,T_START, got `{s}`")),
    }
}
