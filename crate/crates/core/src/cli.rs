//! Command-line front end writing CSV and JSON artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::feasibility::{budget, budget_ratio_variant, FeasibilityInput};
use crate::pipeline::{dense_rollout, filter_run, Decision, FallbackReason, PipelineError, SafetyReport, Trajectory};
use crate::scenario::{HandoverWorld, WorldParams};
use crate::uncertainty::make_grid;

pub const EXIT_ROLL_OUT: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_FALLBACK: u8 = 2;
pub const EXIT_PROBE_EXHAUSTED: u8 = 3;

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const TRAJECTORY_META_FILE: &str = "trajectory_meta.json";
pub const REPORT_FILE: &str = "report.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const SCORES_FILE: &str = "scores.csv";

pub const SCORES_HEADER: [&str; 8] = [
    "cause",
    "rank",
    "nominal_step",
    "nominal_score",
    "nominal_exceeds",
    "updated_step",
    "updated_score",
    "updated_exceeds",
];

pub const FIELD_HEADER: [&str; 10] = [
    "i_m", "i_mu", "theta_m", "theta_mu", "weight", "fos_inv", "contact_inv", "motor_inv", "failed", "event_step",
];

#[derive(Debug, Parser)]
#[command(name = "physfilter", version, about = "Physics-based safety filter for a scripted bimanual handover")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Nominal rollout; writes trajectory.csv and trajectory_meta.json.
    Rollout(RunArgs),
    /// Full filter; writes report.json, scores.csv and one field CSV per event.
    Filter(RunArgs),
    /// Evaluation budget for a given simulator speed and thread count.
    Feasibility(FeasibilityArgs),
    /// Pretty-prints a report.json.
    Report {
        path: PathBuf,
    },
}

#[derive(Debug, Args, Clone, Default)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct FeasibilityArgs {
    /// Simulator speed relative to real time.
    #[arg(long, default_value_t = 10.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 100)]
    pub threads: u64,
    /// Sparse fraction, as a decimal or a ratio like 1/600.
    #[arg(long, default_value = "1/1000", value_parser = parse_fraction)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub penalty: f64,
    #[arg(long, default_value_t = 0.0)]
    pub overhead: f64,
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let parse = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"));
    match s.split_once('/') {
        Some((n, d)) => Ok(parse(n)? / parse(d)?),
        None => parse(s),
    }
}

/// Config file (or defaults) with the environment and flag overrides applied.
pub fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let cfg = match &args.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("config {}", path.display()))?,
        None => RunConfig::default(),
    };
    let mut cfg = cfg.with_env_overrides();
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Rollout(args) => cmd_rollout(&resolve_config(&args)?),
        Command::Filter(args) => cmd_filter(&resolve_config(&args)?).map(|r| exit_code(&r)),
        Command::Feasibility(args) => cmd_feasibility(&args, &mut std::io::stdout()).map(|_| EXIT_ROLL_OUT),
        Command::Report { path } => {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let report: SafetyReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            print_report(&report, &mut std::io::stdout())?;
            Ok(EXIT_ROLL_OUT)
        }
    }
}

pub fn exit_code(report: &SafetyReport) -> u8 {
    match (report.decision, &report.fallback_reason) {
        (Decision::RollOut, _) => EXIT_ROLL_OUT,
        (_, Some(FallbackReason::ProbeBudgetExhausted)) => EXIT_PROBE_EXHAUSTED,
        _ => EXIT_FALLBACK,
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Peak {
    pub step: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotorInfo {
    pub name: String,
    pub max_effort: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub version: u32,
    pub theta: WorldParams,
    pub dt: f64,
    pub horizon: usize,
    pub final_reward: u8,
    pub peak_contact: Peak,
    pub peak_motor: Peak,
    pub motors: Vec<MotorInfo>,
}

fn peak(traj: &Trajectory, pick: impl Fn(&crate::safety::FosSample) -> f64) -> Peak {
    let mut best = Peak { step: 0, value: 0.0 };
    for (k, f) in traj.fos.iter().enumerate() {
        if pick(f) > best.value {
            best = Peak { step: k, value: pick(f) };
        }
    }
    best
}

pub fn trajectory_header(world: &HandoverWorld) -> Vec<String> {
    let mut h: Vec<String> = [
        "step", "time", "box_x", "box_z", "box_angle", "box_vx", "box_vz", "box_omega", "box_ax", "box_az",
        "box_alpha",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(world.system.motors.iter().map(|m| format!("ratio_{}", m.name)));
    h.extend(["contact_inv", "motor_inv", "combined_inv", "reward"].map(String::from));
    h
}

/// One row per transition, describing the state it reaches.
pub fn write_trajectory_csv(path: &Path, world: &HandoverWorld, traj: &Trajectory) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(trajectory_header(world))?;
    let b = world.box_body;
    let all: Vec<usize> = (0..world.system.motors.len()).collect();
    for k in 0..traj.horizon() {
        let s = &traj.states[k + 1];
        let p = s.poses[b];
        let v = s.velocities[b];
        let v0 = traj.states[k].velocities[b];
        let mut row = vec![
            (k + 1).to_string(),
            ((k + 1) as f64 * traj.dt).to_string(),
            p.x.to_string(),
            p.z.to_string(),
            p.theta.to_string(),
            v.vx.to_string(),
            v.vz.to_string(),
            v.omega.to_string(),
            ((v.vx - v0.vx) / traj.dt).to_string(),
            ((v.vz - v0.vz) / traj.dt).to_string(),
            ((v.omega - v0.omega) / traj.dt).to_string(),
        ];
        row.extend(
            world
                .motor_loads(s, &all)
                .into_iter()
                .map(|(e, lim)| (e.abs() / lim).to_string()),
        );
        let f = &traj.fos[k];
        row.push(f.contact_inv.to_string());
        row.push(f.motor_inv.to_string());
        row.push(f.combined_inv.to_string());
        row.push(traj.rewards[k].value().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_rollout(cfg: &RunConfig) -> Result<u8> {
    let (world, traj) = match dense_rollout(
        &cfg.distribution,
        &cfg.scenario,
        cfg.horizon,
        cfg.dt,
        cfg.motor_reduction,
    ) {
        Ok(ok) => ok,
        Err(PipelineError::NominalUnsafe { step, reason }) => {
            eprintln!("nominal rollout unsafe at step {step}: {reason}");
            return Ok(EXIT_FALLBACK);
        }
        Err(e) => return Err(e.into()),
    };
    create_out(&cfg.output_dir)?;
    write_trajectory_csv(&cfg.output_dir.join(TRAJECTORY_FILE), &world, &traj)?;
    let meta = TrajectoryMeta {
        version: crate::pipeline::REPORT_VERSION,
        theta: traj.theta,
        dt: traj.dt,
        horizon: traj.horizon(),
        final_reward: traj.final_reward().value(),
        peak_contact: peak(&traj, |f| f.contact_inv),
        peak_motor: peak(&traj, |f| f.motor_inv),
        motors: world
            .system
            .motors
            .iter()
            .map(|m| MotorInfo {
                name: m.name.clone(),
                max_effort: m.max_effort,
            })
            .collect(),
    };
    write_json(&cfg.output_dir.join(TRAJECTORY_META_FILE), &meta)?;
    Ok(EXIT_ROLL_OUT)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timings {
    pub workers: usize,
    pub total_seconds: f64,
    pub stages: Vec<crate::pipeline::StageTimings>,
}

/// File name of the field CSV for an event of a stage.
pub fn field_file_name(stage: usize, cause: &str, step: usize) -> String {
    format!("fos_field_s{stage}_{cause}_{step}.csv")
}

pub fn cmd_filter(cfg: &RunConfig) -> Result<SafetyReport> {
    let settings = cfg.filter_settings();
    let start = Instant::now();
    let report = filter_run(&cfg.distribution, &settings)?;
    let total = start.elapsed().as_secs_f64();

    let out = &cfg.output_dir;
    create_out(out)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    write_json(
        &out.join(TIMINGS_FILE),
        &Timings {
            workers: settings.workers,
            total_seconds: total,
            stages: report.stages.iter().map(|s| s.timings).collect(),
        },
    )?;
    for (si, stage) in report.stages.iter().enumerate() {
        if stage.fields.is_empty() {
            continue;
        }
        let grid = make_grid(&stage.distribution, cfg.grid_n)?;
        for (ev, field) in stage.events.iter().zip(&stage.fields) {
            let path = out.join(field_file_name(si, ev.event.cause.name(), ev.event.step));
            let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
            w.write_record(FIELD_HEADER)?;
            for i_m in 0..grid.n_m {
                for i_mu in 0..grid.n_mu {
                    let i = grid.index(i_m, i_mu);
                    let theta = grid.points[i];
                    w.write_record([
                        i_m.to_string(),
                        i_mu.to_string(),
                        theta.theta_m.to_string(),
                        theta.theta_mu.to_string(),
                        grid.weights[i].to_string(),
                        field.values[i].to_string(),
                        field.contact[i].to_string(),
                        field.motor[i].to_string(),
                        u8::from(field.failed.contains(&i)).to_string(),
                        field.event.to_string(),
                    ])?;
                }
            }
            w.flush()?;
        }
    }
    write_scores_csv(&out.join(SCORES_FILE), &report)?;
    Ok(report)
}

/// Causes as rows, first and last distribution as column groups.
pub fn write_scores_csv(path: &Path, report: &SafetyReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(SCORES_HEADER)?;
    let first = report.stages.first();
    let updated = if report.stages.len() > 1 { report.stages.last() } else { None };
    let cell = |stage: Option<&crate::pipeline::Stage>, cause, rank: usize| -> [String; 3] {
        stage
            .and_then(|s| s.events.iter().filter(|e| e.event.cause == cause).nth(rank))
            .map(|e| [e.event.step.to_string(), e.score.to_string(), (!e.safe).to_string()])
            .unwrap_or_default()
    };
    for cause in crate::safety::Cause::ALL {
        let count = report
            .stages
            .iter()
            .map(|s| s.events.iter().filter(|e| e.event.cause == cause).count())
            .max()
            .unwrap_or(0);
        for rank in 0..count {
            let mut row = vec![cause.name().to_string(), rank.to_string()];
            row.extend(cell(first, cause, rank));
            row.extend(cell(updated, cause, rank));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_feasibility(args: &FeasibilityArgs, out: &mut impl std::io::Write) -> Result<()> {
    let input = FeasibilityInput {
        sequential_penalty: args.penalty,
        overhead_fraction: args.overhead,
        ..FeasibilityInput::new(args.tau, args.threads, args.alpha)
    };
    let product = budget(&input)?;
    let ratio = budget_ratio_variant(&input)?;
    writeln!(
        out,
        "tau = {}  threads = {}  alpha = {}  penalty = {}  overhead = {}",
        args.tau, args.threads, args.alpha, args.penalty, args.overhead
    )?;
    writeln!(out, "{:<12}{:>16}{:>16}", "variant", "n_dense", "n_sparse")?;
    writeln!(out, "{:<12}{:>16}{:>16}", "K*tau", product.n_dense, product.n_sparse)?;
    writeln!(out, "{:<12}{:>16}{:>16}", "K/tau", ratio.n_dense, ratio.n_sparse)?;
    Ok(())
}

pub fn print_report(report: &SafetyReport, out: &mut impl std::io::Write) -> Result<()> {
    if report.version != crate::pipeline::REPORT_VERSION {
        bail!("unsupported report version {}", report.version);
    }
    writeln!(
        out,
        "decision: {:?}  epsilon: {}  grid: {}x{}  probes used: {}  seed: {}",
        report.decision, report.epsilon, report.grid_n, report.grid_n, report.probes_used, report.seed
    )?;
    if let Some(reason) = &report.fallback_reason {
        writeln!(out, "fallback: {}", serde_json::to_string(reason)?)?;
    }
    for (i, stage) in report.stages.iter().enumerate() {
        let d = &stage.distribution;
        writeln!(
            out,
            "stage {i}: mean ({}, {}) sigma ({}, {}) nominal ({:.5}, {:.5}) -> {:?}{}",
            d.mean.theta_m,
            d.mean.theta_mu,
            d.sigma.theta_m,
            d.sigma.theta_mu,
            stage.nominal.theta_m,
            stage.nominal.theta_mu,
            stage.decision,
            stage.rescored_from.map(|s| format!(" (re-weighted from stage {s})")).unwrap_or_default()
        )?;
        for e in &stage.events {
            writeln!(
                out,
                "  {:<8} step {:>5}  nominal {:.4}  S = {:.4}  {}{}",
                e.event.cause.name(),
                e.event.step,
                e.event.nominal_fos_inv,
                e.score,
                if e.safe { "ok" } else { "exceeds" },
                if e.failed_points > 0 { format!("  ({} failed points)", e.failed_points) } else { String::new() }
            )?;
        }
    }
    Ok(())
}
