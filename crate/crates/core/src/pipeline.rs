//! Dense rollout, critical-event selection, parallel sparse re-evaluation and
//! the roll-out / probe / fallback decision.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{step, DynamicsError, SystemState};
use crate::safety::{is_safe, safety_score, Cause, FosField, FosSample, MotorReduction, SafetyError};
use crate::scenario::{build_handover, reward, HandoverWorld, RewardMode, ScenarioConfig, ScenarioError, WorldParams};
use crate::uncertainty::{
    apply_probe, make_grid, nominal, nominal_close, DistributionSpec, ParamGrid, ProbeResult, UncertaintyError,
};

/// Version of the serialized report layout.
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("nominal rollout unsafe at step {step}: {reason}")]
    NominalUnsafe { step: usize, reason: String },
    #[error("horizon must be positive")]
    EmptyHorizon,
    #[error("event step {step} outside trajectory of {len} transitions")]
    EventOutOfRange { step: usize, len: usize },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Safety(#[from] SafetyError),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub per_cause: usize,
    pub window: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            per_cause: 1,
            window: 50,
        }
    }
}

/// Everything the filter needs besides the distribution itself.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSettings {
    pub scenario: ScenarioConfig,
    pub horizon: usize,
    pub dt: f64,
    pub grid_n: usize,
    pub epsilon: f64,
    pub selection: SelectionConfig,
    pub reduction: MotorReduction,
    /// Steps advanced per sparse evaluation.
    pub sparse_steps: usize,
    pub probe: ProbeResult,
    pub probe_budget: usize,
    /// Sigma above which the distribution counts as wide.
    pub probe_thresholds: WorldParams,
    pub nominal_tolerance: WorldParams,
    pub workers: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub theta: WorldParams,
    pub dt: f64,
    /// `horizon + 1` states, the first one being the initial state.
    pub states: Vec<SystemState>,
    /// Control applied on each transition.
    pub controls: Vec<Vec<f64>>,
    /// Inverse FOS of the state reached by each transition.
    pub fos: Vec<FosSample>,
    /// Reward after each transition.
    pub rewards: Vec<RewardMode>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    /// Reward in force before transition `k`.
    pub fn reward_before(&self, k: usize) -> RewardMode {
        if k == 0 {
            RewardMode::default()
        } else {
            self.rewards[k - 1]
        }
    }

    pub fn final_reward(&self) -> RewardMode {
        self.rewards.last().copied().unwrap_or_default()
    }
}

/// Simulates the scripted policy for `horizon` steps at the world's parameters.
///
/// With `abort_unsafe`, stops with `NominalUnsafe` as soon as the combined
/// inverse FOS reaches 1, or at the end if the handover did not complete.
pub fn rollout(
    world: &HandoverWorld,
    horizon: usize,
    dt: f64,
    reduction: MotorReduction,
    abort_unsafe: bool,
) -> Result<Trajectory, PipelineError> {
    if horizon == 0 {
        return Err(PipelineError::EmptyHorizon);
    }
    let mut states = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    let mut fos = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    let mut state = world.initial_state();
    let mut r = RewardMode::default();
    states.push(state.clone());
    for k in 0..horizon {
        let u = world.policy(&state, k, dt);
        state = step(&world.system, &state, &u, &world.theta, dt)?;
        r = reward(world.contact_flags(&state), r);
        let f = world.fos(&state, r, reduction);
        if abort_unsafe && f.combined_inv >= 1.0 {
            let cause = if f.motor_inv >= 1.0 { "actuator saturation" } else { "grasp slip" };
            return Err(PipelineError::NominalUnsafe {
                step: k,
                reason: cause.into(),
            });
        }
        controls.push(u);
        fos.push(f);
        rewards.push(r);
        states.push(state.clone());
    }
    if abort_unsafe && r.value() < 4 {
        return Err(PipelineError::NominalUnsafe {
            step: horizon,
            reason: format!("handover incomplete (reward {})", r.value()),
        });
    }
    Ok(Trajectory {
        theta: world.theta,
        dt,
        states,
        controls,
        fos,
        rewards,
    })
}

/// Builds the world at the distribution's expectation and rolls it out.
pub fn dense_rollout(
    spec: &DistributionSpec,
    scenario: &ScenarioConfig,
    horizon: usize,
    dt: f64,
    reduction: MotorReduction,
) -> Result<(HandoverWorld, Trajectory), PipelineError> {
    let theta = nominal(spec);
    let world = build_handover(theta, scenario, &spec.domain)?;
    let traj = rollout(&world, horizon, dt, reduction, true)?;
    Ok((world, traj))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalEvent {
    /// Transition index; the event state is the one reached from `step`.
    pub step: usize,
    pub cause: Cause,
    pub nominal_fos_inv: f64,
}

/// Highest-risk transitions per cause, at least `window` steps apart.
pub fn select_critical(traj: &Trajectory, selection: &SelectionConfig) -> Vec<CriticalEvent> {
    let n = traj.fos.len();
    if n < selection.window {
        return Vec::new();
    }
    let mut out = Vec::new();
    for cause in Cause::ALL {
        let mut order: Vec<usize> = (0..n).collect();
        // stable sort keeps earlier steps first among ties
        order.sort_by(|&a, &b| cause.of(&traj.fos[b]).total_cmp(&cause.of(&traj.fos[a])));
        let mut picked: Vec<usize> = Vec::new();
        for k in order {
            if picked.len() == selection.per_cause {
                break;
            }
            if picked.iter().all(|&p| p.abs_diff(k) >= selection.window) {
                picked.push(k);
            }
        }
        out.extend(picked.into_iter().map(|k| CriticalEvent {
            step: k,
            cause,
            nominal_fos_inv: cause.of(&traj.fos[k]),
        }));
    }
    out
}

/// Result of re-running one transition at one grid point.
fn evaluate_point(
    world: &HandoverWorld,
    traj: &Trajectory,
    c: usize,
    steps: usize,
    theta: &WorldParams,
    reduction: MotorReduction,
) -> Option<FosSample> {
    let mut state = traj.states[c].clone();
    let mut r = traj.reward_before(c);
    let last = (c + steps).min(traj.horizon());
    for k in c..last {
        state = step(&world.system, &state, &traj.controls[k], theta, traj.dt).ok()?;
        r = reward(world.contact_flags(&state), r);
    }
    Some(world.fos(&state, r, reduction))
}

pub fn worker_pool(workers: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))
}

/// Inverse FOS over the grid after substituting each grid point at the event.
///
/// Each point restarts from the nominal state (positions, velocities and
/// multiplier warm start) and applies the nominal control. Points whose step
/// fails to solve count as maximally unsafe.
pub fn sparse_evaluate(
    world: &HandoverWorld,
    traj: &Trajectory,
    event: &CriticalEvent,
    grid: &ParamGrid,
    steps: usize,
    reduction: MotorReduction,
    pool: &rayon::ThreadPool,
) -> Result<FosField, PipelineError> {
    if event.step >= traj.horizon() {
        return Err(PipelineError::EventOutOfRange {
            step: event.step,
            len: traj.horizon(),
        });
    }
    let steps = steps.max(1);
    let samples: Vec<Option<FosSample>> = pool.install(|| {
        grid.points
            .par_iter()
            .map(|theta| evaluate_point(world, traj, event.step, steps, theta, reduction))
            .collect()
    });
    let n = samples.len();
    let mut field = FosField {
        n_m: grid.n_m,
        n_mu: grid.n_mu,
        values: Vec::with_capacity(n),
        contact: Vec::with_capacity(n),
        motor: Vec::with_capacity(n),
        failed: Vec::new(),
        event: event.step,
    };
    for (i, s) in samples.into_iter().enumerate() {
        match s {
            Some(f) => {
                field.values.push(f.combined_inv);
                field.contact.push(f.contact_inv);
                field.motor.push(f.motor_inv);
            }
            None => {
                field.values.push(1.0);
                field.contact.push(1.0);
                field.motor.push(1.0);
                field.failed.push(i);
            }
        }
    }
    Ok(field)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    RollOut,
    Probe,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FallbackReason {
    NominalUnsafe { step: usize, reason: String },
    NarrowUncertainty,
    ProbeBudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventScore {
    pub event: CriticalEvent,
    pub score: f64,
    pub safe: bool,
    pub failed_points: usize,
}

/// One pass through scoring under one distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub distribution: DistributionSpec,
    pub nominal: WorldParams,
    /// Stage whose fields were re-weighted instead of re-simulated.
    pub rescored_from: Option<usize>,
    pub events: Vec<EventScore>,
    pub decision: Decision,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fallback_reason: Option<FallbackReason>,
    #[serde(skip)]
    pub fields: Vec<FosField>,
    #[serde(skip)]
    pub timings: StageTimings,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub dense_seconds: f64,
    pub sparse_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub version: u32,
    pub decision: Decision,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fallback_reason: Option<FallbackReason>,
    pub epsilon: f64,
    pub grid_n: usize,
    pub seed: u64,
    pub probes_used: usize,
    pub stages: Vec<Stage>,
}

impl SafetyReport {
    /// Distribution in force when the decision was taken.
    pub fn distribution(&self) -> Option<&DistributionSpec> {
        self.stages.last().map(|s| &s.distribution)
    }
}

/// Scores fields under the grid weights and classifies the outcome.
pub fn evaluate_events(
    events: &[CriticalEvent],
    fields: &[FosField],
    grid: &ParamGrid,
    spec: &DistributionSpec,
    epsilon: f64,
    probe_thresholds: &WorldParams,
) -> Result<(Vec<EventScore>, Decision), PipelineError> {
    let mut scores = Vec::with_capacity(events.len());
    for (event, field) in events.iter().zip(fields) {
        let score = safety_score(field, &grid.weights)?;
        scores.push(EventScore {
            event: *event,
            score,
            safe: is_safe(score, epsilon)?,
            failed_points: field.failed.len(),
        });
    }
    let decision = if scores.iter().all(|s| s.safe) {
        Decision::RollOut
    } else if spec.is_wide(probe_thresholds) {
        Decision::Probe
    } else {
        Decision::Fallback
    };
    Ok((scores, decision))
}

fn finish(mut report: SafetyReport, decision: Decision, reason: Option<FallbackReason>) -> SafetyReport {
    report.decision = decision;
    report.fallback_reason = reason.clone();
    if let Some(last) = report.stages.last_mut() {
        if decision == Decision::Fallback && last.fallback_reason.is_none() {
            last.fallback_reason = reason;
        }
    }
    report
}

/// Runs the complete filter starting from `spec`.
pub fn filter_run(spec: &DistributionSpec, settings: &FilterSettings) -> Result<SafetyReport, PipelineError> {
    spec.validate()?;
    let pool = worker_pool(settings.workers)?;
    let mut report = SafetyReport {
        version: REPORT_VERSION,
        decision: Decision::Fallback,
        fallback_reason: None,
        epsilon: settings.epsilon,
        grid_n: settings.grid_n,
        seed: settings.seed,
        probes_used: 0,
        stages: Vec::new(),
    };
    let mut spec = *spec;
    // fields and events of the last simulated stage, for re-weighting
    let mut reusable: Option<(usize, WorldParams, Vec<CriticalEvent>, Vec<FosField>, ParamGrid)> = None;

    loop {
        let theta = nominal(&spec);
        let stage_start = Instant::now();
        let mut timings = StageTimings::default();
        let (events, fields, grid, rescored_from) = match reusable.take() {
            Some((from, prev_theta, events, fields, grid)) if nominal_close(&prev_theta, &theta, &settings.nominal_tolerance) => {
                let grid = grid.reweighted(&spec)?;
                (events, fields, grid, Some(from))
            }
            _ => {
                let dense = dense_rollout(&spec, &settings.scenario, settings.horizon, settings.dt, settings.reduction);
                let (world, traj) = match dense {
                    Ok(ok) => ok,
                    Err(PipelineError::NominalUnsafe { step, reason }) => {
                        let why = FallbackReason::NominalUnsafe { step, reason };
                        report.stages.push(Stage {
                            distribution: spec,
                            nominal: theta,
                            rescored_from: None,
                            events: Vec::new(),
                            decision: Decision::Fallback,
                            fallback_reason: Some(why.clone()),
                            fields: Vec::new(),
                            timings: StageTimings {
                                dense_seconds: stage_start.elapsed().as_secs_f64(),
                                sparse_seconds: 0.0,
                            },
                        });
                        return Ok(finish(report, Decision::Fallback, Some(why)));
                    }
                    Err(e) => return Err(e),
                };
                timings.dense_seconds = stage_start.elapsed().as_secs_f64();
                let sparse_start = Instant::now();
                let events = select_critical(&traj, &settings.selection);
                let grid = make_grid(&spec, settings.grid_n)?;
                let fields = events
                    .iter()
                    .map(|e| sparse_evaluate(&world, &traj, e, &grid, settings.sparse_steps, settings.reduction, &pool))
                    .collect::<Result<Vec<_>, _>>()?;
                timings.sparse_seconds = sparse_start.elapsed().as_secs_f64();
                (events, fields, grid, None)
            }
        };

        let (scores, decision) = evaluate_events(
            &events,
            &fields,
            &grid,
            &spec,
            settings.epsilon,
            &settings.probe_thresholds,
        )?;
        let stage_index = report.stages.len();
        report.stages.push(Stage {
            distribution: spec,
            nominal: theta,
            rescored_from,
            events: scores,
            decision,
            fallback_reason: None,
            fields: fields.clone(),
            timings,
        });
        match decision {
            Decision::RollOut => return Ok(finish(report, Decision::RollOut, None)),
            Decision::Fallback => return Ok(finish(report, Decision::Fallback, Some(FallbackReason::NarrowUncertainty))),
            Decision::Probe if report.probes_used >= settings.probe_budget => {
                return Ok(finish(report, Decision::Fallback, Some(FallbackReason::ProbeBudgetExhausted)));
            }
            Decision::Probe => {
                report.probes_used += 1;
                let source = rescored_from.unwrap_or(stage_index);
                reusable = Some((source, theta, events, fields, grid));
                spec = apply_probe(&spec, &settings.probe)?;
            }
        }
    }
}
