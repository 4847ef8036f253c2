use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use duoloco::refgen::{FrameMode, Task};
use duoloco_cli::{
    export_metrics, parse_perturb, run_scenario, run_sweep, ExportPaths, Overrides, ScenarioConfig,
    SweepSpec,
};

/// Runs dual-robot loco-manipulation episodes and sweeps.
///
/// Flags override the config file; when no config is given the built-in
/// scenario of --task (default handover) is used.
#[derive(Debug, Parser)]
#[command(name = "duoloco", version)]
struct Args {
    /// Scenario config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// handover, carrying or packing.
    #[arg(long)]
    task: Option<Task>,
    /// bw (canonical frame) or w (absolute world frame).
    #[arg(long)]
    frame: Option<FrameMode>,
    #[arg(long)]
    no_admittance: bool,
    /// Lateral push on robot 0: F,DUR,T_START in N, s, s.
    #[arg(long, value_parser = parse_perturb, allow_hyphen_values = true)]
    perturb: Option<(f64, f64, f64)>,
    /// Global scene yaw in radians.
    #[arg(long, allow_hyphen_values = true)]
    yaw: Option<f64>,
    /// Output directory for metrics files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// perturb:25,50,100x0.1,0.2,0.4[@n] | yaw:8[@n] | yaw:0,1.57[@n] | seeds:n
    #[arg(long)]
    sweep: Option<SweepSpec>,
    /// Print the effective config, layout included, and exit.
    #[arg(long)]
    print_config: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let mut cfg = match &args.config {
        Some(path) => match ScenarioConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => ScenarioConfig::for_task(args.task.unwrap_or(Task::Handover)),
    };
    Overrides {
        seed: args.seed,
        task: args.task,
        frame: args.frame,
        no_admittance: args.no_admittance,
        perturb: args.perturb,
        yaw: args.yaw,
    }
    .apply(&mut cfg);
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }

    if args.print_config {
        cfg.layout = Some(cfg.layout());
        out(format_args!("{}\n", cfg.to_json()));
        return ExitCode::SUCCESS;
    }

    if let Some(spec) = &args.sweep {
        let table = run_sweep(&cfg, spec);
        out(format_args!("{}", table.render()));
        if let Some(dir) = &args.out {
            let path = dir.join("sweep.json");
            let text = serde_json::to_string_pretty(&table).expect("sweep table serialises") + "\n";
            if let Err(e) = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, text)) {
                eprintln!("error: {}: {e}", path.display());
                return ExitCode::from(3);
            }
        }
        let faults: usize = table.cells.iter().map(|c| c.faults).sum();
        return if faults == 0 {
            ExitCode::SUCCESS
        } else {
            ExitCode::FAILURE
        };
    }

    let metrics = match run_scenario(&cfg) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let s = &metrics.summary;
    out(format_args!(
        "{} [{}] seed {} yaw {:.3}: {} after {} ticks\n",
        s.task, cfg.frame_mode, s.seed, s.global_yaw, s.outcome_label, s.ticks
    ));
    out(format_args!(
        "  ee err rms {:.4} m, peak {:.4} m | base dev peak {:.4} m | f_int peak {:.2} N | h min {:.4} m\n",
        s.ee_err_rms_m, s.ee_err_peak_m, s.base_dev_peak_m, s.f_int_peak_n, s.h_min_m
    ));
    out(format_args!(
        "  mpc {}/{} converged, {} errors | wbc kkt max {:.2e}, {} safe stops\n",
        s.mpc_converged, s.mpc_solves, s.mpc_errors, s.wbc_kkt_max, s.wbc_safe_stops
    ));
    if let Some(f) = &s.fault {
        out(format_args!("  fault: {f}\n"));
    }
    if let Some(dir) = &args.out {
        if let Err(e) = export_metrics(&metrics, &ExportPaths::in_dir(dir)) {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    if s.fault.is_some() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

/// Stdout write that tolerates a closed pipe (e.g. `| head`).
fn out(args: std::fmt::Arguments<'_>) {
    let _ = std::io::stdout().lock().write_fmt(args);
}
