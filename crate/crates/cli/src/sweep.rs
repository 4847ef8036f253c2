//! Sweeps over perturbation magnitude x duration, global yaw, or seeds.

use std::f64::consts::TAU;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{PerturbationSpec, ScenarioConfig};
use crate::runner::{run_scenario, EpisodeMetrics, EpisodeSummary};

#[derive(Debug, Error, PartialEq)]
pub enum SweepError {
    #[error("bad sweep spec `{spec}`: {msg}")]
    Spec { spec: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "axis")]
pub enum SweepAxis {
    /// Every magnitude (N) against every duration (s).
    Perturbation {
        magnitudes: Vec<f64>,
        durations: Vec<f64>,
    },
    Yaw {
        angles: Vec<f64>,
    },
    Seeds,
}

/// Parsed `--sweep` argument. Forms:
/// `perturb:25,50,100x0.1,0.2,0.4`, `yaw:8` (uniform), `yaw:0,1.57`,
/// `seeds:5`; the first two take an optional `@n` episodes per cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub episodes_per_cell: usize,
}

fn list(spec: &str, s: &str) -> Result<Vec<f64>, SweepError> {
    let v: Result<Vec<f64>, _> = s.split(',').map(|x| x.trim().parse::<f64>()).collect();
    match v {
        Ok(v) if !v.is_empty() && v.iter().all(|x| x.is_finite()) => Ok(v),
        _ => Err(SweepError::Spec {
            spec: spec.into(),
            msg: format!("`{s}` is not a list of numbers"),
        }),
    }
}

impl FromStr for SweepSpec {
    type Err = SweepError;

    fn from_str(spec: &str) -> Result<Self, Self::Err> {
        let bad = |msg: &str| SweepError::Spec {
            spec: spec.into(),
            msg: msg.into(),
        };
        let (kind, rest) = spec
            .split_once(':')
            .ok_or_else(|| bad("expected AXIS:VALUES"))?;
        let (values, n) = match rest.split_once('@') {
            Some((v, n)) => (
                v,
                n.trim()
                    .parse::<usize>()
                    .map_err(|_| bad("episode count after @ must be an integer"))?,
            ),
            None => (rest, 1),
        };
        let axis = match kind.trim() {
            "perturb" => {
                let (m, d) = values
                    .split_once('x')
                    .ok_or_else(|| bad("expected MAGNITUDESxDURATIONS"))?;
                let durations = list(spec, d)?;
                if durations.iter().any(|d| *d <= 0.0) {
                    return Err(bad("durations must be positive"));
                }
                SweepAxis::Perturbation {
                    magnitudes: list(spec, m)?,
                    durations,
                }
            }
            "yaw" => {
                let angles = if values.contains(',') || values.contains('.') {
                    list(spec, values)?
                } else {
                    let k: usize = values
                        .trim()
                        .parse()
                        .map_err(|_| bad("yaw count must be an integer"))?;
                    (0..k).map(|j| TAU * j as f64 / k as f64).collect()
                };
                SweepAxis::Yaw { angles }
            }
            "seeds" => {
                if rest.contains('@') {
                    return Err(bad("seeds takes its count directly"));
                }
                let k: usize = values
                    .trim()
                    .parse()
                    .map_err(|_| bad("seed count must be an integer"))?;
                return if k == 0 {
                    Err(bad("axis must not be empty"))
                } else {
                    Ok(Self {
                        axis: SweepAxis::Seeds,
                        episodes_per_cell: k,
                    })
                };
            }
            other => return Err(bad(&format!("unknown axis `{other}`"))),
        };
        let empty = match &axis {
            SweepAxis::Perturbation {
                magnitudes,
                durations,
            } => magnitudes.is_empty() || durations.is_empty(),
            SweepAxis::Yaw { angles } => angles.is_empty(),
            SweepAxis::Seeds => false,
        };
        if empty || n == 0 {
            return Err(bad("axis must not be empty"));
        }
        Ok(Self {
            axis,
            episodes_per_cell: n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub label: String,
    pub magnitude_n: Option<f64>,
    pub duration_s: Option<f64>,
    pub yaw: Option<f64>,
    pub episodes: usize,
    pub successes: usize,
    pub faults: usize,
    /// Peak deviation from the unperturbed run of the same seed, averaged
    /// over the cell's episodes (perturbation axis only).
    pub ee_dev_vs_nominal_m: Option<f64>,
    pub base_dev_vs_nominal_m: Option<f64>,
    pub ee_err_rms_m: f64,
    pub f_int_peak_n: f64,
    pub outcomes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub spec: SweepSpec,
    pub cells: Vec<CellSummary>,
    pub total_episodes: usize,
    pub total_successes: usize,
    /// Per-episode summaries in cell order.
    pub episodes: Vec<EpisodeSummary>,
}

impl SweepTable {
    /// Fixed-width success-rate table for the terminal.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<28} {:>9} {:>8} {:>11} {:>11}\n",
            "cell", "success", "faults", "ee_dev_m", "base_dev_m"
        );
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        for c in &self.cells {
            s += &format!(
                "{:<28} {:>4}/{:<4} {:>8} {:>11} {:>11}\n",
                c.label,
                c.successes,
                c.episodes,
                c.faults,
                opt(c.ee_dev_vs_nominal_m),
                opt(c.base_dev_vs_nominal_m)
            );
        }
        s + &format!("total {}/{}\n", self.total_successes, self.total_episodes)
    }
}

/// Peak end-effector and base distance between two runs over the ticks
/// both reached.
pub fn deviation_from(run: &EpisodeMetrics, nominal: &EpisodeMetrics) -> (f64, f64) {
    let mut ee: f64 = 0.0;
    let mut base: f64 = 0.0;
    for (a, b) in run.trajectory.iter().zip(&nominal.trajectory) {
        for i in 0..2 {
            ee = ee.max((a.ee[i].translation() - b.ee[i].translation()).norm());
            base = base.max((a.base[i].translation() - b.base[i].translation()).norm());
        }
    }
    (ee, base)
}

struct Cell {
    label: String,
    magnitude: Option<f64>,
    duration: Option<f64>,
    yaw: Option<f64>,
    configs: Vec<ScenarioConfig>,
}

/// Perturbation template: the base config's first push, else a lateral
/// push on robot 0 at 6 s.
fn push_template(base: &ScenarioConfig) -> PerturbationSpec {
    base.perturbations
        .first()
        .cloned()
        .unwrap_or(PerturbationSpec {
            robot: 0,
            force: [0.0, 1.0, 0.0],
            duration_s: 0.2,
            start_s: 6.0,
        })
}

fn with_push(base: &ScenarioConfig, magnitude: f64, duration: f64) -> ScenarioConfig {
    let t = push_template(base);
    let norm = t.force.iter().map(|f| f * f).sum::<f64>().sqrt();
    let dir = if norm > 0.0 {
        t.force.map(|f| f / norm)
    } else {
        [0.0, 1.0, 0.0]
    };
    let mut cfg = base.clone();
    cfg.perturbations = vec![PerturbationSpec {
        force: dir.map(|d| d * magnitude),
        duration_s: duration,
        ..t
    }];
    cfg
}

fn seeded(cfg: &ScenarioConfig, k: usize) -> ScenarioConfig {
    ScenarioConfig {
        seed: cfg.seed + k as u64,
        ..cfg.clone()
    }
}

fn cells(base: &ScenarioConfig, spec: &SweepSpec) -> Vec<Cell> {
    let n = spec.episodes_per_cell;
    match &spec.axis {
        SweepAxis::Perturbation {
            magnitudes,
            durations,
        } => magnitudes
            .iter()
            .flat_map(|&m| durations.iter().map(move |&d| (m, d)))
            .map(|(m, d)| {
                let cfg = with_push(base, m, d);
                Cell {
                    label: format!("{m} N x {d} s"),
                    magnitude: Some(m),
                    duration: Some(d),
                    yaw: None,
                    configs: (0..n).map(|k| seeded(&cfg, k)).collect(),
                }
            })
            .collect(),
        SweepAxis::Yaw { angles } => angles
            .iter()
            .map(|&yaw| {
                let mut cfg = base.clone();
                cfg.initial.global_yaw = yaw;
                cfg.initial.yaw_range = None;
                Cell {
                    label: format!("yaw {:.1} deg", yaw.to_degrees()),
                    magnitude: None,
                    duration: None,
                    yaw: Some(yaw),
                    configs: (0..n).map(|k| seeded(&cfg, k)).collect(),
                }
            })
            .collect(),
        SweepAxis::Seeds => vec![Cell {
            label: format!("seeds {}..{}", base.seed, base.seed + n as u64),
            magnitude: None,
            duration: None,
            yaw: None,
            configs: (0..n).map(|k| seeded(base, k)).collect(),
        }],
    }
}

/// Runs every cell of `spec` on top of `base`. Episodes run in parallel but
/// results are gathered in a fixed order; a setup error in one episode is
/// counted as a fault, never aborting the sweep.
pub fn run_sweep(base: &ScenarioConfig, spec: &SweepSpec) -> SweepTable {
    let cells = cells(base, spec);
    let jobs: Vec<&ScenarioConfig> = cells.iter().flat_map(|c| c.configs.iter()).collect();
    let results: Vec<Result<EpisodeMetrics, String>> = jobs
        .par_iter()
        .map(|cfg| run_scenario(cfg).map_err(|e| e.to_string()))
        .collect();

    let nominal: Vec<Option<EpisodeMetrics>> = match spec.axis {
        SweepAxis::Perturbation { .. } => {
            let mut cfg = base.clone();
            cfg.perturbations.clear();
            (0..spec.episodes_per_cell)
                .into_par_iter()
                .map(|k| run_scenario(&seeded(&cfg, k)).ok())
                .collect()
        }
        _ => Vec::new(),
    };

    let mut out = SweepTable {
        spec: spec.clone(),
        cells: Vec::new(),
        total_episodes: 0,
        total_successes: 0,
        episodes: Vec::new(),
    };
    let mut it = results.into_iter();
    for cell in &cells {
        let mut c = CellSummary {
            label: cell.label.clone(),
            magnitude_n: cell.magnitude,
            duration_s: cell.duration,
            yaw: cell.yaw,
            episodes: cell.configs.len(),
            successes: 0,
            faults: 0,
            ee_dev_vs_nominal_m: None,
            base_dev_vs_nominal_m: None,
            ee_err_rms_m: 0.0,
            f_int_peak_n: 0.0,
            outcomes: Vec::new(),
        };
        let mut devs = Vec::new();
        for k in 0..cell.configs.len() {
            match it.next().expect("one result per job") {
                Ok(m) => {
                    if m.summary.success {
                        c.successes += 1;
                    }
                    if m.summary.fault.is_some() {
                        c.faults += 1;
                    }
                    c.ee_err_rms_m += m.summary.ee_err_rms_m / c.episodes as f64;
                    c.f_int_peak_n = c.f_int_peak_n.max(m.summary.f_int_peak_n);
                    c.outcomes.push(m.summary.outcome_label.clone());
                    if let Some(Some(nom)) = nominal.get(k) {
                        devs.push(deviation_from(&m, nom));
                    }
                    out.episodes.push(m.summary);
                }
                Err(e) => {
                    c.faults += 1;
                    c.outcomes.push(format!("fault: {e}"));
                }
            }
        }
        if !devs.is_empty() {
            let len = devs.len() as f64;
            c.ee_dev_vs_nominal_m = Some(devs.iter().map(|d| d.0).sum::<f64>() / len);
            c.base_dev_vs_nominal_m = Some(devs.iter().map(|d| d.1).sum::<f64>() / len);
        }
        out.total_episodes += c.episodes;
        out.total_successes += c.successes;
        out.cells.push(c);
    }
    out
}
