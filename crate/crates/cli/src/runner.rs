//! Closed-loop episode: reference generator at the policy rate, MPC every
//! few control ticks, WBC and simulator at the control rate.

use duoloco::geometry::{pose_error, so3_exp, Pose};
use duoloco::kinematics::{forward_kinematics, sphere_centers, sphere_gap, Sphere};
use duoloco::mpc::{MpcError, MpcPlan, MpcSolver, Scene};
use duoloco::refgen::{
    interpolate, Action, ActionChunk, Drift, ExecutorStep, FrameMode, Observation, PoseLowPass,
    RecedingExecutor, RobotObservation, ScriptedGenerator,
};
use duoloco::sim::{
    closed_chain, collision_clearance, FailureReason, GraspEvent, Outcome, PerturbationEvent,
    RobotCommand, SimObject, Simulator, SuccessCheck, WorldState,
};
use duoloco::wbc::{
    cooperative_admittance, ee_reference_velocity, WbcController, WbcInput, WbcParams, WbcStatus,
};
use duoloco::{RobotModel, WholeBodyState};
use nalgebra::{DVector, Vector3, Vector6};
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ScenarioConfig};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("setup failed: {0}")]
    Setup(String),
}

/// One row of the per-tick metrics table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TickMetrics {
    pub tick: u64,
    pub time_s: f64,
    /// Largest end-effector distance from its (drifted) target.
    pub ee_err_m: f64,
    /// Largest base distance from the position the current plan predicted.
    pub base_dev_m: f64,
    pub f_int_n: f64,
    /// Smallest sphere gap to obstacles or the other robot.
    pub h_min_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanRecord {
    pub tick: u64,
    pub robot: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Smallest nonlinear barrier value along the predicted states.
    pub min_h: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChunkRecord {
    pub index: u64,
    pub tick: u64,
    /// Actions as emitted, in the generator's frame.
    pub actions: Vec<[Action; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectorySample {
    pub tick: u64,
    pub time_s: f64,
    pub base: [Pose; 2],
    pub ee: [Pose; 2],
    pub target: [Pose; 2],
    pub q_arm: [Vec<f64>; 2],
    pub gripper_closed: [bool; 2],
    pub objects: Vec<Pose>,
    pub admittance_offset: [[f64; 3]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventRecord {
    pub tick: u64,
    pub event: GraspEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeSummary {
    pub task: String,
    pub frame_mode: FrameMode,
    pub seed: u64,
    pub global_yaw: f64,
    pub admittance: bool,
    pub outcome: Outcome,
    pub outcome_label: String,
    pub success: bool,
    pub fault: Option<String>,
    pub ticks: u64,
    pub ee_err_rms_m: f64,
    pub ee_err_peak_m: f64,
    pub base_dev_peak_m: f64,
    pub f_int_peak_n: f64,
    /// Mean of |f_int - f_des| over the last second of closed-chain contact.
    pub f_int_tracking_final_n: Option<f64>,
    pub h_min_m: f64,
    pub obstacle_clearance_min_m: f64,
    pub mpc_solves: usize,
    pub mpc_converged: usize,
    pub mpc_errors: usize,
    /// Smallest barrier value over converged plans.
    pub plan_h_min_m: f64,
    pub wbc_kkt_max: f64,
    pub wbc_safe_stops: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeMetrics {
    pub summary: EpisodeSummary,
    pub ticks: Vec<TickMetrics>,
    pub plans: Vec<PlanRecord>,
    pub chunks: Vec<ChunkRecord>,
    pub events: Vec<EventRecord>,
    pub trajectory: Vec<TrajectorySample>,
    /// |f_int - f_des| per tick while both grippers hold one object.
    pub f_int_tracking: Vec<(u64, f64)>,
}

impl EpisodeMetrics {
    pub fn outcome(&self) -> Outcome {
        self.summary.outcome
    }
}

/// Time-stamped actions known at a tick, in the generator's frame.
fn sample_sequence(seq: &[(f64, Action)], t: f64) -> Action {
    let Some(first) = seq.first() else {
        panic!("empty action sequence");
    };
    if t <= first.0 {
        return first.1;
    }
    for w in seq.windows(2) {
        let ((t0, a), (t1, b)) = (w[0], w[1]);
        if t < t1 {
            let s = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
            return Action {
                target: interpolate(&a.target, &b.target, s),
                gripper_closed: a.gripper_closed,
            };
        }
    }
    seq[seq.len() - 1].1
}

fn rotate_twist(mode: FrameMode, t_ref: &Pose, v: Vector6<f64>) -> Vector6<f64> {
    match mode {
        FrameMode::AbsoluteWorld => v,
        FrameMode::Canonical => {
            let r = t_ref.rotation();
            let lin = r * v.fixed_rows::<3>(0);
            let ang = r * v.fixed_rows::<3>(3);
            Vector6::new(lin.x, lin.y, lin.z, ang.x, ang.y, ang.z)
        }
    }
}

/// Adds an admittance displacement to a world pose.
fn displaced(pose: &Pose, lin: &Vector3<f64>, rot: &Vector3<f64>) -> Pose {
    Pose::from_parts(so3_exp(rot) * pose.rotation(), pose.translation() + lin)
}

/// Predicted state of `plan` (made at `plan_tick`) at control tick `tick`.
fn plan_state(plan: &MpcPlan, plan_tick: u64, tick: u64, dt: f64, mpc_dt: f64) -> DVector<f64> {
    let tau = (tick.saturating_sub(plan_tick)) as f64 * dt / mpc_dt;
    let last = plan.predicted_states.len() - 1;
    let k = (tau.floor() as usize).min(last);
    if k == last {
        return plan.predicted_states[last].clone();
    }
    let s = tau - k as f64;
    &plan.predicted_states[k] * (1.0 - s) + &plan.predicted_states[k + 1] * s
}

fn obstacle_clearance(
    model: &RobotModel,
    robots: &[WholeBodyState; 2],
    obstacles: &[Sphere],
) -> f64 {
    let mut h = f64::INFINITY;
    for r in robots {
        if let Ok(spheres) = sphere_centers(model, &r.base_pose, &r.q_arm) {
            for a in &spheres {
                for b in obstacles {
                    h = h.min(sphere_gap(a, b));
                }
            }
        }
    }
    h
}

struct Planner {
    solver: MpcSolver,
    plan: Option<(u64, MpcPlan)>,
}

/// Everything an episode needs, built from a validated config.
struct Setup {
    model: RobotModel,
    posture: DVector<f64>,
    world: WorldState,
    sim: Simulator,
    generator: ScriptedGenerator,
    check: SuccessCheck,
    t_ref: Pose,
    yaw: f64,
}

fn setup(cfg: &ScenarioConfig) -> Result<Setup, RunError> {
    let model = cfg.robot()?;
    let posture = cfg.posture(&model);
    let layout = cfg.layout();
    let g = cfg.global_transform();
    let robots =
        [0, 1].map(|i| WholeBodyState::at_rest(g.compose(&layout.robots[i]), posture.clone()));
    let objects = layout
        .objects
        .iter()
        .map(|o| SimObject::from_spec(o, &g))
        .collect();
    let obstacles = cfg
        .obstacles
        .iter()
        .map(|o| Sphere {
            center: g.transform_point(&o.center),
            radius: o.radius,
        })
        .collect();
    let world = WorldState::new(robots, objects, obstacles, cfg.seed);
    let dt = cfg.sim.dt;
    let events = cfg
        .perturbations
        .iter()
        .map(|p| PerturbationEvent {
            robot: p.robot,
            force: Vector3::from(p.force),
            duration_s: p.duration_s,
            start_tick: (p.start_s / dt).round() as u64,
        })
        .collect();
    let sim = Simulator::new(cfg.sim, model.clone(), events, cfg.seed)
        .map_err(|e| RunError::Setup(e.to_string()))?;
    let generator = ScriptedGenerator::new(cfg.task, &layout, cfg.frame_mode, cfg.chunk, dt)
        .map_err(|e| RunError::Setup(e.to_string()))?;
    let check = SuccessCheck {
        task: cfg.task,
        goal: g.compose(&layout.goal),
        tolerances: cfg.tolerances,
        success_tick: (layout.success_time_s / dt).round() as u64,
        timeout_tick: cfg.episode_ticks,
    };
    let t_ref = world.robots[0].base_pose;
    Ok(Setup {
        model,
        posture,
        world,
        sim,
        generator,
        check,
        t_ref,
        yaw: cfg.effective_yaw(),
    })
}

/// Runs one episode. Configuration problems are errors; anything that goes
/// wrong while running ends the episode as `failure(fault)`.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<EpisodeMetrics, RunError> {
    cfg.validate()?;
    let Setup {
        model,
        posture,
        mut world,
        mut sim,
        mut generator,
        check,
        t_ref,
        yaw,
    } = setup(cfg)?;
    let n = model.dof();
    let dt = cfg.sim.dt;
    let mode = cfg.frame_mode;
    let ticks_per_action = (1.0 / (cfg.chunk.rate_hz * dt)).round() as u64;
    let period = ticks_per_action as f64 * dt;
    let mpc_dt = cfg.mpc.dt;
    let horizon = cfg.mpc.horizon;
    let shift = ((cfg.mpc_every as f64 * dt) / mpc_dt).round() as usize;
    let adm = cfg.admittance.clone();
    let damping = {
        let mut d = [0.0; 12];
        for (k, v) in d.iter_mut().enumerate() {
            *v = if k % 6 < 3 {
                adm.damping_linear
            } else {
                adm.damping_angular
            };
        }
        nalgebra::SVector::<f64, 12>::from(d)
    };

    let wbc_params = WbcParams {
        admittance_enabled: adm.enabled,
        ..cfg.wbc.clone()
    };
    let mut controllers = [
        WbcController::new(wbc_params.clone()),
        WbcController::new(wbc_params),
    ];
    let mut planners = [0, 1].map(|_| Planner {
        solver: MpcSolver::new(cfg.mpc.clone()),
        plan: None,
    });
    let mut executor = RecedingExecutor::new(cfg.chunk.t_a);
    let mut drift = Drift::new(cfg.drift, cfg.seed);
    let rate = 1.0 / dt;
    let mut filters = [0, 1]
        .map(|_| PoseLowPass::new(cfg.observation_cutoff_hz, rate).expect("validated cutoff"));
    let mut obs = Observation::default();

    let mut adm_lin = [Vector3::zeros(); 2];
    let mut adm_rot = [Vector3::zeros(); 2];
    let mut yield_twist = [Vector6::zeros(); 2];

    let ee0 =
        [0, 1].map(|i| forward_kinematics(&model, &world.robots[i]).expect("validated model"));
    let observe = |ee: &Pose| mode.observe(&t_ref, ee);
    let mut prev = ee0.map(|e| Action {
        target: observe(&e),
        gripper_closed: false,
    });
    let mut cur = prev;
    let mut action_tick = 0u64;

    let mut out = EpisodeMetrics {
        summary: EpisodeSummary {
            task: cfg.task.name().to_string(),
            frame_mode: mode,
            seed: cfg.seed,
            global_yaw: yaw,
            admittance: adm.enabled,
            outcome: Outcome::Running,
            outcome_label: String::new(),
            success: false,
            fault: None,
            ticks: 0,
            ee_err_rms_m: 0.0,
            ee_err_peak_m: 0.0,
            base_dev_peak_m: 0.0,
            f_int_peak_n: 0.0,
            f_int_tracking_final_n: None,
            h_min_m: f64::INFINITY,
            obstacle_clearance_min_m: f64::INFINITY,
            mpc_solves: 0,
            mpc_converged: 0,
            mpc_errors: 0,
            plan_h_min_m: f64::INFINITY,
            wbc_kkt_max: 0.0,
            wbc_safe_stops: 0,
        },
        ticks: Vec::new(),
        plans: Vec::new(),
        chunks: Vec::new(),
        events: Vec::new(),
        trajectory: Vec::new(),
        f_int_tracking: Vec::new(),
    };
    let mut fault: Option<String> = None;
    let mut outcome = Outcome::Running;

    for tick in 0..cfg.episode_ticks {
        // observation, low-passed at the control rate
        let ee_now = match [0, 1].map(|i| forward_kinematics(&model, &world.robots[i])) {
            [Ok(a), Ok(b)] => [a, b],
            [Err(e), _] | [_, Err(e)] => {
                fault = Some(e.to_string());
                break;
            }
        };
        let filtered = [0, 1].map(|i| filters[i].update(&observe(&ee_now[i])));

        if tick % ticks_per_action == 0 {
            let frame = [0, 1].map(|i| RobotObservation {
                ee: filtered[i],
                gripper_closed: world.robots[i].gripper == duoloco::kinematics::Gripper::Closed,
            });
            if obs.history.is_empty() {
                for _ in 0..cfg.chunk.t_o {
                    obs.push(frame, cfg.chunk.t_o);
                }
            } else {
                obs.push(frame, cfg.chunk.t_o);
            }
            if executor.needs_chunk() {
                match generator.generate_chunk(&obs, tick) {
                    Ok(chunk) => {
                        out.chunks.push(ChunkRecord {
                            index: chunk.index,
                            tick: chunk.tick,
                            actions: chunk.actions.clone(),
                        });
                        executor.accept(chunk);
                    }
                    Err(e) => {
                        fault = Some(e.to_string());
                        break;
                    }
                }
            }
            drift.advance(tick as f64 * dt, period);
            prev = cur;
            action_tick = tick;
            match executor.step() {
                ExecutorStep::Action(a) => cur = [0, 1].map(|i| drift.apply(i, &a[i])),
                ExecutorStep::NeedChunk => {
                    fault = Some("executor ran dry".into());
                    break;
                }
            }
        }

        let t_action = action_tick as f64 * dt;
        let s = ((tick - action_tick + 1) as f64 / ticks_per_action as f64).min(1.0);
        let provider_target = [0, 1].map(|i| interpolate(&prev[i].target, &cur[i].target, s));
        let target = provider_target.map(|p| mode.to_world(&t_ref, &p));
        let feedforward = [0, 1].map(|i| {
            rotate_twist(
                mode,
                &t_ref,
                pose_error(&cur[i].target, &prev[i].target) / period,
            )
        });
        let gripper = [prev[0].gripper_closed, prev[1].gripper_closed];

        if tick % cfg.mpc_every == 0 {
            let refs: [Vec<Pose>; 2] = [0, 1].map(|i| {
                let mut seq = vec![(t_action, prev[i]), (t_action + period, cur[i])];
                for (j, a) in executor.lookahead().iter().enumerate() {
                    seq.push((t_action + (j + 2) as f64 * period, drift.apply(i, &a[i])));
                }
                (1..=horizon)
                    .map(|k| {
                        let a = sample_sequence(&seq, tick as f64 * dt + k as f64 * mpc_dt);
                        displaced(&mode.to_world(&t_ref, &a.target), &adm_lin[i], &adm_rot[i])
                    })
                    .collect()
            });
            let scenes = [0, 1].map(|i| Scene {
                obstacles: world.obstacles.clone(),
                partner: sphere_centers(
                    &model,
                    &world.robots[1 - i].base_pose,
                    &world.robots[1 - i].q_arm,
                )
                .unwrap_or_default(),
            });
            let [p0, p1] = &mut planners;
            let solve = |p: &mut Planner, i: usize| -> Result<MpcPlan, MpcError> {
                p.solver.shift_previous(shift);
                p.solver
                    .solve(&model, &world.robots[i], &refs[i], &posture, &scenes[i])
            };
            let (r0, r1) = rayon::join(|| solve(p0, 0), || solve(p1, 1));
            for (i, r) in [r0, r1].into_iter().enumerate() {
                out.summary.mpc_solves += 1;
                match r {
                    Ok(plan) => {
                        let min_h = plan
                            .barrier_trace
                            .iter()
                            .cloned()
                            .fold(f64::INFINITY, f64::min);
                        if plan.converged {
                            out.summary.mpc_converged += 1;
                            out.summary.plan_h_min_m = out.summary.plan_h_min_m.min(min_h);
                        }
                        out.plans.push(PlanRecord {
                            tick,
                            robot: i,
                            converged: plan.converged,
                            iterations: plan.sqp_iterations,
                            min_h,
                            error: None,
                        });
                        planners[i].plan = Some((tick, plan));
                    }
                    Err(e) => {
                        out.summary.mpc_errors += 1;
                        out.plans.push(PlanRecord {
                            tick,
                            robot: i,
                            converged: false,
                            iterations: 0,
                            min_h: f64::NAN,
                            error: Some(e.to_string()),
                        });
                    }
                }
            }
        }

        let mut commands = [
            RobotCommand::idle(n, gripper[0]),
            RobotCommand::idle(n, gripper[1]),
        ];
        let mut predicted_base = [None, None];
        for i in 0..2 {
            let state = &world.robots[i];
            let (posture_ref, base_ref) = match &planners[i].plan {
                Some((pt, plan)) => {
                    let x = plan_state(plan, *pt, tick + 1, dt, mpc_dt);
                    predicted_base[i] = Some(Vector3::new(x[0], x[1], x[2]));
                    let k = ((tick - pt) as f64 * dt / mpc_dt).floor() as usize;
                    let u = plan.control(k);
                    (
                        x.rows(6, n).into_owned(),
                        Some(Vector6::from_fn(|r, _| u[r])),
                    )
                }
                None => (posture.clone(), None),
            };
            let goal = displaced(&target[i], &adm_lin[i], &adm_rot[i]);
            let p = &controllers[i].params;
            let fb = match ee_reference_velocity(
                &goal,
                &ee_now[i],
                p.ee_gain,
                p.max_ee_linear_speed,
                p.max_ee_angular_speed,
            ) {
                Ok(v) => v,
                Err(e) => {
                    fault = Some(e.to_string());
                    break;
                }
            };
            let input = WbcInput {
                ee_target_velocity: feedforward[i] + fb,
                posture_ref: &posture_ref,
                base_velocity_ref: base_ref,
                admittance_offset: adm.enabled.then_some(yield_twist[i]),
                measured_base_twist: Some(state.base_twist.to_vector()),
            };
            match controllers[i].step(&model, state, &input) {
                Ok(cmd) => {
                    out.summary.wbc_kkt_max = out.summary.wbc_kkt_max.max(cmd.kkt.max());
                    if cmd.status == WbcStatus::SafeStop {
                        out.summary.wbc_safe_stops += 1;
                    }
                    commands[i].base_twist = cmd.base_twist.to_vector();
                    commands[i].dq_arm = cmd.dq_arm;
                }
                Err(e) => {
                    fault = Some(e.to_string());
                    break;
                }
            }
        }
        if fault.is_some() {
            break;
        }

        let report = match sim.step(&mut world, &commands) {
            Ok(r) => r,
            Err(e) => {
                fault = Some(e.to_string());
                break;
            }
        };
        for e in &report.events {
            out.events.push(EventRecord { tick, event: *e });
        }

        let chain = match closed_chain(&world, &model, &cfg.sim.contact) {
            Ok(c) => c,
            Err(e) => {
                fault = Some(e.to_string());
                break;
            }
        };
        let f_int = chain.as_ref().map_or(0.0, |c| c.internal_norm());
        match &chain {
            Some(c) => {
                let desired = c.grasp.squeeze(adm.desired_squeeze_n);
                out.f_int_tracking
                    .push((tick, (c.split.internal - desired).norm()));
                if adm.enabled {
                    match cooperative_admittance(&c.grasp, &c.measured, &desired, &damping) {
                        Ok(y) => yield_twist = y,
                        Err(e) => {
                            fault = Some(e.to_string());
                            break;
                        }
                    }
                    for i in 0..2 {
                        adm_lin[i] += yield_twist[i].fixed_rows::<3>(0) * dt;
                        adm_rot[i] += yield_twist[i].fixed_rows::<3>(3) * dt;
                        let norm = adm_lin[i].norm();
                        if norm > adm.max_offset_m {
                            adm_lin[i] *= adm.max_offset_m / norm;
                        }
                    }
                }
            }
            None => {
                yield_twist = [Vector6::zeros(); 2];
                let decay = (-dt / 0.5f64).exp();
                for i in 0..2 {
                    adm_lin[i] *= decay;
                    adm_rot[i] *= decay;
                }
            }
        }

        let ee_after = match [0, 1].map(|i| forward_kinematics(&model, &world.robots[i])) {
            [Ok(a), Ok(b)] => [a, b],
            [Err(e), _] | [_, Err(e)] => {
                fault = Some(e.to_string());
                break;
            }
        };
        let ee_err = (0..2)
            .map(|i| (target[i].translation() - ee_after[i].translation()).norm())
            .fold(0.0, f64::max);
        let base_dev = (0..2)
            .filter_map(|i| {
                predicted_base[i].map(|p| (world.robots[i].base_pose.translation() - p).norm())
            })
            .fold(0.0, f64::max);
        let h_min = match collision_clearance(&world, &model) {
            Ok(h) => h,
            Err(e) => {
                fault = Some(e.to_string());
                break;
            }
        };
        let obstacle_h = obstacle_clearance(&model, &world.robots, &world.obstacles);
        out.summary.obstacle_clearance_min_m = out.summary.obstacle_clearance_min_m.min(obstacle_h);
        out.ticks.push(TickMetrics {
            tick,
            time_s: (tick + 1) as f64 * dt,
            ee_err_m: ee_err,
            base_dev_m: base_dev,
            f_int_n: f_int,
            h_min_m: h_min,
        });
        out.trajectory.push(TrajectorySample {
            tick,
            time_s: (tick + 1) as f64 * dt,
            base: [world.robots[0].base_pose, world.robots[1].base_pose],
            ee: ee_after,
            target,
            q_arm: [0, 1].map(|i| world.robots[i].q_arm.iter().copied().collect()),
            gripper_closed: gripper,
            objects: world.objects.iter().map(|o| o.pose).collect(),
            admittance_offset: adm_lin.map(|v| [v.x, v.y, v.z]),
        });

        outcome = check.check(&world, &report.events, f_int, h_min);
        if outcome.is_terminal() {
            break;
        }
    }

    if let Some(msg) = fault {
        outcome = Outcome::Failure(FailureReason::Fault);
        out.summary.fault = Some(msg);
    } else if outcome == Outcome::Running {
        outcome = Outcome::Failure(FailureReason::Timeout);
    }
    finish_summary(&mut out, outcome, dt);
    Ok(out)
}

fn finish_summary(out: &mut EpisodeMetrics, outcome: Outcome, dt: f64) {
    let s = &mut out.summary;
    s.outcome = outcome;
    s.outcome_label = outcome.to_string();
    s.success = outcome == Outcome::Success;
    s.ticks = out.ticks.len() as u64;
    if !out.ticks.is_empty() {
        let sq: f64 = out.ticks.iter().map(|m| m.ee_err_m * m.ee_err_m).sum();
        s.ee_err_rms_m = (sq / out.ticks.len() as f64).sqrt();
    }
    for m in &out.ticks {
        s.ee_err_peak_m = s.ee_err_peak_m.max(m.ee_err_m);
        s.base_dev_peak_m = s.base_dev_peak_m.max(m.base_dev_m);
        s.f_int_peak_n = s.f_int_peak_n.max(m.f_int_n);
        s.h_min_m = s.h_min_m.min(m.h_min_m);
    }
    if let Some(&(last, _)) = out.f_int_tracking.last() {
        let window = (1.0 / dt).round() as u64;
        let tail: Vec<f64> = out
            .f_int_tracking
            .iter()
            .filter(|(t, _)| *t + window > last)
            .map(|(_, v)| *v)
            .collect();
        s.f_int_tracking_final_n = Some(tail.iter().sum::<f64>() / tail.len() as f64);
    }
}

/// Chunks an episode's generator emitted, for invariance checks.
pub fn chunk_targets(chunks: &[ChunkRecord]) -> Vec<ActionChunk> {
    chunks
        .iter()
        .map(|c| ActionChunk {
            index: c.index,
            tick: c.tick,
            actions: c.actions.clone(),
        })
        .collect()
}
