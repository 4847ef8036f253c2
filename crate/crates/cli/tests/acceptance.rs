//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::f64::consts::FRAC_PI_4;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use duoloco::geometry::canonicalize;
use duoloco::kinematics::forward_kinematics;
use duoloco::qp::{solve_qp, QpStatus};
use duoloco::refgen::{
    FrameMode, Observation, RobotObservation, ScriptedGenerator, Task, TaskLayout,
};
use duoloco::sim::{FailureReason, Outcome};
use duoloco::RobotModel;
use duoloco_cli::metrics::{metrics_csv, ExportPaths};
use duoloco_cli::runner::EpisodeMetrics;
use duoloco_cli::sweep::deviation_from;
use duoloco_cli::{export_metrics, run_scenario, run_sweep, ScenarioConfig, SweepSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

#[path = "../../core/tests/support/oracles.rs"]
mod oracles;

fn config(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    ScenarioConfig::load(&path).unwrap_or_else(|e| panic!("{e}"))
}

fn run(cfg: &ScenarioConfig) -> EpisodeMetrics {
    run_scenario(cfg).unwrap_or_else(|e| panic!("{e}"))
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// Position distance or rotation angle, whichever is larger.
fn pose_gap(a: &duoloco::Pose, b: &duoloco::Pose) -> f64 {
    let (dp, dq) = a.distance(b);
    dp.max(dq)
}

/// Largest difference between two chunk logs over their common prefix.
fn chunk_gap(a: &EpisodeMetrics, b: &EpisodeMetrics) -> f64 {
    let mut worst = 0.0f64;
    for (ca, cb) in a.chunks.iter().zip(&b.chunks) {
        for (xa, xb) in ca.actions.iter().zip(&cb.actions) {
            for i in 0..2 {
                worst = worst.max(pose_gap(&xa[i].target, &xb[i].target));
                if xa[i].gripper_closed != xb[i].gripper_closed {
                    worst = f64::INFINITY;
                }
            }
        }
    }
    worst
}

/// Generator-level check: the scene moved by a random rigid `g` yields the
/// same canonical chunks as the untransformed scene.
fn generator_invariance(rng: &mut ChaCha8Rng) -> f64 {
    let model = RobotModel::quadruped_arm();
    let posture = RobotModel::quadruped_arm_posture();
    let mut worst = 0.0f64;
    for task in Task::ALL {
        let layout = TaskLayout::default_for(task);
        let ee = |base: &duoloco::Pose| {
            let s = duoloco::WholeBodyState::at_rest(*base, posture.clone());
            forward_kinematics(&model, &s).unwrap()
        };
        let chunks = |g: &duoloco::Pose| {
            let mut generator = ScriptedGenerator::new(
                task,
                &layout,
                FrameMode::Canonical,
                Default::default(),
                0.01,
            )
            .unwrap();
            let t_ref = g.compose(&layout.robots[0]);
            let frame = [0, 1].map(|i| RobotObservation {
                ee: canonicalize(&t_ref, &ee(&g.compose(&layout.robots[i]))),
                gripper_closed: false,
            });
            let mut obs = Observation::default();
            obs.push(frame, 2);
            obs.push(frame, 2);
            (0..30)
                .map(|k| generator.generate_chunk(&obs, k * 40).unwrap())
                .collect::<Vec<_>>()
        };
        let reference = chunks(&duoloco::Pose::identity());
        for _ in 0..5 {
            let g = oracles::random_pose(rng, 20.0);
            for (a, b) in reference.iter().zip(chunks(&g)) {
                for (xa, xb) in a.actions.iter().zip(&b.actions) {
                    for i in 0..2 {
                        worst = worst.max(pose_gap(&xa[i].target, &xb[i].target));
                    }
                }
            }
        }
    }
    worst
}

fn criterion_1() -> (Verdict, Option<EpisodeMetrics>) {
    let start = Instant::now();
    let yaws: Vec<f64> = (0..8).map(|k| k as f64 * FRAC_PI_4).collect();
    let files = [
        (Task::Handover, "handover.json"),
        (Task::Carrying, "carrying_drift.json"),
        (Task::Packing, "packing.json"),
    ];
    let mut jobs = Vec::new();
    for (task, file) in files {
        let mut base = config(file);
        base.drift.enabled = false;
        for mode in [FrameMode::Canonical, FrameMode::AbsoluteWorld] {
            for seed in 0..3u64 {
                for (k, &yaw) in yaws.iter().enumerate() {
                    let mut cfg = base.clone();
                    cfg.frame_mode = mode;
                    cfg.seed = seed;
                    cfg.initial.global_yaw = yaw;
                    jobs.push(((task, mode, seed, k), cfg));
                }
            }
        }
    }
    let results: Vec<_> = jobs.par_iter().map(|(key, cfg)| (*key, run(cfg))).collect();
    let find = |task, mode, seed, k| {
        &results
            .iter()
            .find(|(key, _)| *key == (task, mode, seed, k))
            .unwrap()
            .1
    };

    let mut bw_ok = true;
    let mut w_ok = true;
    let mut chunk_worst = 0.0f64;
    let (mut bw_success, mut w_success, mut zero_success) = (0, 0, 0);
    for task in Task::ALL {
        for seed in 0..3 {
            let zero = find(task, FrameMode::Canonical, seed, 0);
            let zero_ok = zero.summary.success;
            zero_success += zero_ok as usize;
            for k in 0..8 {
                let bw = find(task, FrameMode::Canonical, seed, k);
                let w = find(task, FrameMode::AbsoluteWorld, seed, k);
                bw_success += bw.summary.success as usize;
                w_success += w.summary.success as usize;
                if zero_ok && !bw.summary.success {
                    bw_ok = false;
                    println!(
                        "  BW {task} seed {seed} yaw {k}x45: {}",
                        bw.summary.outcome_label
                    );
                }
                if k > 0 && w.summary.success {
                    w_ok = false;
                    println!("  W {task} seed {seed} yaw {k}x45 unexpectedly succeeded");
                }
                chunk_worst = chunk_worst.max(chunk_gap(zero, bw));
            }
        }
    }
    let gen_worst = generator_invariance(&mut ChaCha8Rng::seed_from_u64(99));
    let elapsed = start.elapsed().as_secs_f64();
    let pass = bw_ok && w_ok && chunk_worst < 1e-9 && gen_worst < 1e-9 && elapsed < 300.0;
    let nominal = results
        .into_iter()
        .find(|(key, _)| *key == (Task::Handover, FrameMode::Canonical, 0, 0))
        .map(|(_, m)| m);
    (
        verdict(
            pass,
            format!(
                "BW {bw_success}/72 (0-yaw cells {zero_success}/9), W {w_success}/72 with none at yaw >= 45 deg; \
                 chunk gap across yaws {chunk_worst:.1e}, generator gap under random g {gen_worst:.1e}; {elapsed:.0} s"
            ),
        ),
        nominal,
    )
}

fn criterion_2() -> Verdict {
    let cfg = config("handover_perturbed.json");
    let mut nominal_cfg = cfg.clone();
    nominal_cfg.perturbations.clear();
    let (perturbed, nominal) = rayon::join(|| run(&cfg), || run(&nominal_cfg));
    let (ee_dev, base_dev) = deviation_from(&perturbed, &nominal);

    let spec: SweepSpec = "perturb:25,50,100x0.1,0.2,0.4".parse().unwrap();
    let table = run_sweep(&cfg, &spec);
    let mut cells: Vec<(f64, f64)> = table
        .cells
        .iter()
        .map(|c| {
            (
                c.magnitude_n.unwrap() * c.duration_s.unwrap(),
                c.base_dev_vs_nominal_m.unwrap_or(f64::NAN),
            )
        })
        .collect();
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    let monotone = cells
        .iter()
        .all(|a| cells.iter().all(|b| a.0 >= b.0 - 1e-9 || a.1 <= b.1 + 1e-9));
    let profile: Vec<String> = cells.iter().map(|(i, d)| format!("{i}:{:.3}", d)).collect();
    verdict(
        ee_dev <= 0.03 && base_dev >= 0.05 && monotone && perturbed.summary.success,
        format!(
            "100 N x 0.2 s: EE dev {:.2} cm (<= 3), base dev {:.2} cm (>= 5), {}; sweep {}/9, base dev by impulse [N s:m] {} monotone={monotone}",
            ee_dev * 100.0,
            base_dev * 100.0,
            perturbed.summary.outcome_label,
            table.total_successes,
            profile.join(" ")
        ),
    )
}

fn criterion_3() -> Verdict {
    let base = config("carrying_drift.json");
    let mut pass = true;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let on = ScenarioConfig {
            seed,
            ..base.clone()
        };
        let mut off = on.clone();
        off.admittance.enabled = false;
        let (a, b) = rayon::join(|| run(&on), || run(&off));
        let tracking = a.summary.f_int_tracking_final_n.unwrap_or(f64::INFINITY);
        let ok_on = a.summary.f_int_peak_n < 25.0 && tracking < 2.0 && a.summary.success;
        let ok_off = b.summary.f_int_peak_n > 50.0
            && b.summary.outcome == Outcome::Failure(FailureReason::Overstress);
        pass &= ok_on && ok_off;
        lines.push(format!(
            "seed {seed}: admittance peak {:.1} N, steady |f_int - f_des| {:.2} N, {}; ablation peak {:.1} N, {}",
            a.summary.f_int_peak_n, tracking, a.summary.outcome_label, b.summary.f_int_peak_n, b.summary.outcome_label
        ));
    }
    let again = run(&ScenarioConfig {
        seed: 0,
        ..base.clone()
    });
    let first = run(&ScenarioConfig { seed: 0, ..base });
    let deterministic = again == first;
    pass &= deterministic;
    verdict(
        pass,
        format!("{}; repeat run identical={deterministic}", lines.join("; ")),
    )
}

fn criterion_4() -> Verdict {
    let base = config("carrying_bypass.json");
    let mut pass = true;
    let mut lines = Vec::new();
    for seed in 0..2u64 {
        let m = run(&ScenarioConfig {
            seed,
            ..base.clone()
        });
        let plan_h = m
            .plans
            .iter()
            .filter(|p| p.converged)
            .map(|p| p.min_h)
            .fold(f64::INFINITY, f64::min);
        let converged = m.plans.iter().filter(|p| p.converged).count();
        // the bypass is the stretch where a base sphere is within 30 cm of the obstacle
        let near: Vec<f64> = m
            .ticks
            .iter()
            .filter(|t| t.h_min_m < 0.3)
            .map(|t| t.ee_err_m)
            .collect();
        let rms = (near.iter().map(|e| e * e).sum::<f64>() / near.len().max(1) as f64).sqrt();
        let clearance = m.summary.obstacle_clearance_min_m;
        let ok = plan_h >= -1e-3
            && !near.is_empty()
            && rms < 0.05
            && clearance > base.mpc.margin
            && m.summary.success;
        pass &= ok;
        lines.push(format!(
            "seed {seed}: min h over {converged}/{} converged plans {plan_h:.4} m, EE RMS in bypass {:.2} cm over {} ticks, \
             base clearance {clearance:.4} m vs margin {}, {}",
            m.plans.len(),
            rms * 100.0,
            near.len(),
            base.mpc.margin,
            m.summary.outcome_label
        ));
    }
    verdict(pass, lines.join("; "))
}

fn criterion_5(nominal: Option<&EpisodeMetrics>) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut qp_gap = 0.0f64;
    let mut qp_ok = true;
    for _ in 0..500 {
        let n = rng.random_range(1..=8);
        let m = rng.random_range(1..=8);
        let p = oracles::random_qp(&mut rng, n, m);
        let (_, f_star) = oracles::enumerate_optimum(&p);
        let s = solve_qp(&p, 1e-6, 4000).unwrap();
        qp_ok &= s.status == QpStatus::Solved;
        qp_gap = qp_gap.max((s.objective - f_star).abs());
    }
    let kkt = match nominal {
        Some(m) => m.summary.wbc_kkt_max,
        None => run(&config("handover.json")).summary.wbc_kkt_max,
    };
    let model = RobotModel::quadruped_arm();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let jac = (0..200)
        .map(|_| {
            oracles::jacobian_fd_error(&model, &oracles::random_whole_body_state(&mut rng, &model))
        })
        .fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let grasp = (0..200)
        .map(|_| {
            let g = oracles::random_grasp(&mut rng);
            oracles::grasp_identity_error(&mut rng, &g)
        })
        .fold(0.0, f64::max);
    verdict(
        qp_ok && qp_gap < 1e-6 && kkt < 1e-6 && jac < 1e-5 && grasp < 1e-9,
        format!(
            "QP vs enumeration gap {qp_gap:.1e} on 500 problems; WBC KKT max {kkt:.1e} over a nominal handover; \
             Jacobian FD {jac:.1e} on 200 states; grasp identities {grasp:.1e} on 200 geometries"
        ),
    )
}

fn hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn digest(path: &std::path::Path) -> String {
    hex(&std::fs::read(path).unwrap())
}

fn criterion_6() -> Verdict {
    let cfg = config("handover.json");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut hashes = Vec::new();
    for d in &dirs {
        let m = run(&cfg);
        let paths = ExportPaths::in_dir(d.path());
        export_metrics(&m, &paths).unwrap();
        hashes.push(
            [
                &paths.metrics_csv,
                &paths.summary_json,
                &paths.trajectory_jsonl,
                &paths.chunks_jsonl,
            ]
            .map(|p| digest(p)),
        );
        assert_eq!(
            digest(&paths.metrics_csv),
            hex(metrics_csv(&m.ticks).as_bytes())
        );
    }
    let identical = hashes[0] == hashes[1];

    let long = config("carrying_30s.json");
    let start = Instant::now();
    let m = run(&long);
    let wall = start.elapsed().as_secs_f64();
    let solves = m.summary.mpc_solves;
    verdict(
        identical && m.summary.ticks == 3000 && wall < 60.0,
        format!(
            "metrics.csv sha256 {}.. identical across runs={identical} (all four files); 30 s episode: {} ticks, {solves} MPC solves, {wall:.1} s wall",
            &hashes[0][0][..16],
            m.summary.ticks
        ),
    )
}

fn main() -> ExitCode {
    let mut verdicts = Vec::new();
    let (c1, nominal) = criterion_1();
    verdicts.push(("1 SE(3) invariance", c1));
    verdicts.push(("2 disturbance rejection", criterion_2()));
    verdicts.push(("3 closed-chain compliance", criterion_3()));
    verdicts.push(("4 DCBF safety", criterion_4()));
    verdicts.push(("5 solver correctness", criterion_5(nominal.as_ref())));
    verdicts.push(("6 determinism and throughput", criterion_6()));
    let mut all = true;
    for (name, v) in &verdicts {
        all &= v.pass;
        println!(
            "criterion {name}: {} | {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
