//! Acceptance gate: runs every criterion and prints one line per criterion.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use common::{classify, enumerate_active_sets, random_mlcp};
use physfilter::cli::{cmd_filter, REPORT_FILE};
use physfilter::config::RunConfig;
use physfilter::dynamics::{
    step, Body, BodyRef, ColliderRef, ConstraintKind, ContactPair, Friction, HalfPlane, Joint, Pose, Shape,
    StepSettings, System, Vec2,
};
use physfilter::feasibility::{budget, FeasibilityInput};
use physfilter::lcp::{solve_direct, solve_pgs, DirectOptions, PgsOptions};
use physfilter::pipeline::{
    dense_rollout, filter_run, rollout, select_critical, sparse_evaluate, worker_pool, Decision,
};
use physfilter::safety::{fos_contact, fos_motor, is_safe, safety_score, Cause, FosField, MotorReduction};
use physfilter::scenario::{build_handover, RewardMode, ScenarioConfig, WorldParams, GRAVITY};
use physfilter::uncertainty::{apply_probe, density, make_grid, DistributionSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DT: f64 = 1.0 / 240.0;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn reference_spec() -> DistributionSpec {
    RunConfig::default().distribution
}

fn lcp_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_y = 0.0f64;
    let mut worst_pgs = 0.0f64;
    for i in 0..200 {
        let p = random_mlcp(&mut rng, 8);
        let oracle = enumerate_active_sets(&p, 1e-10);
        ensure!(oracle.len() == 1, "problem {i}: {} oracle solutions", oracle.len());
        let (ref pattern, ref y_star) = oracle[0];
        let direct = solve_direct(&p, &DirectOptions::default()).map_err(|e| format!("problem {i}: {e}"))?;
        ensure!(
            classify(&p, &direct.y, 1e-9) == classify(&p, y_star, 1e-9),
            "problem {i}: active set differs from {pattern:?}"
        );
        worst_y = worst_y.max((&direct.y - y_star).amax());
        let pgs = solve_pgs(&p, &PgsOptions::default()).map_err(|e| format!("problem {i}: pgs {e}"))?;
        worst_pgs = worst_pgs.max(pgs.residual);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst_y <= 1e-9, "max |y - y*| = {worst_y:e}");
    ensure!(worst_pgs <= 1e-8, "max pgs residual = {worst_pgs:e}");
    ensure!(secs < 10.0, "took {secs:.1} s");
    Ok(format!("200 problems, max |y - y*| {worst_y:.1e}, max PGS residual {worst_pgs:.1e}, {secs:.2} s"))
}

fn resting_box() -> System {
    System {
        bodies: vec![Body::new("box", 1.0, 1.0, Pose::new(0.0, 0.06, 0.0)).with_shape(Shape::Rect {
            half_w: 0.025,
            half_h: 0.06,
        })],
        joints: vec![],
        motors: vec![],
        planes: vec![HalfPlane {
            normal: Vec2::new(0.0, 1.0),
            offset: 0.0,
        }],
        contact_pairs: vec![ContactPair {
            a: ColliderRef::Static(0),
            b: ColliderRef::Body(0),
            friction: Friction::Fixed(0.8),
            tag: 0,
        }],
        gravity: Vec2::new(0.0, -GRAVITY),
        settings: StepSettings::default(),
        mass_param_body: Some(0),
    }
}

fn statics() -> Outcome {
    let sys = resting_box();
    let th = WorldParams::new(0.73, 0.63);
    let weight = th.theta_m * GRAVITY;
    let mut st = sys.initial_state();
    let mut worst_box = 0.0f64;
    for k in 0..100 {
        st = step(&sys, &st, &[], &th, DT).map_err(|e| e.to_string())?;
        let total: f64 = st.contacts.iter().map(|c| c.lambda_n).sum();
        let rel = (total - weight).abs() / weight;
        ensure!(rel <= 1e-6, "step {k}: sum of normal forces {total} vs {weight}");
        worst_box = worst_box.max(rel);
    }

    let (m, l) = (0.8, 0.3);
    let pendulum = System {
        bodies: vec![Body::new("rod", m, m * l * l / 12.0, Pose::new(l, 0.5, 0.0))],
        joints: vec![
            Joint::Hinge {
                a: BodyRef::Ground,
                b: BodyRef::Body(0),
                anchor_a: Vec2::new(0.0, 0.5),
                anchor_b: Vec2::new(-l, 0.0),
            },
            Joint::Lock {
                a: BodyRef::Ground,
                b: BodyRef::Body(0),
                ref_angle: 0.0,
            },
        ],
        motors: vec![],
        planes: vec![],
        contact_pairs: vec![],
        gravity: Vec2::new(0.0, -GRAVITY),
        settings: StepSettings::default(),
        mass_param_body: None,
    };
    let mut st = pendulum.initial_state();
    for _ in 0..20 {
        st = step(&pendulum, &st, &[], &th, DT).map_err(|e| e.to_string())?;
    }
    let lock = st
        .rows
        .iter()
        .position(|r| r.kind == ConstraintKind::Lock)
        .ok_or("no lock row")?;
    let expected = m * GRAVITY * l;
    let rel = (st.lambda[lock] - expected).abs() / expected;
    ensure!(rel <= 1e-6, "hinge torque {} vs {expected}", st.lambda[lock]);
    Ok(format!("box weight rel. err {worst_box:.1e} over 100 steps, pendulum torque rel. err {rel:.1e}"))
}

/// Box held between two pads pushed together with force `squeeze`, no gravity.
fn squeeze_rig(squeeze: f64) -> System {
    let (bw, pw) = (0.025, 0.005);
    let pad = |name: &str, x: f64| {
        Body::new(name, 0.05, 1e-5, Pose::new(x, 0.0, 0.0)).with_shape(Shape::Rect {
            half_w: pw,
            half_h: 0.015,
        })
    };
    let mut left = pad("left", -(bw + pw));
    left.external_force = [squeeze, 0.0, 0.0];
    let mut right = pad("right", bw + pw);
    right.external_force = [-squeeze, 0.0, 0.0];
    let slide = |b: usize, x: f64| Joint::Prismatic {
        a: BodyRef::Ground,
        b: BodyRef::Body(b),
        anchor_a: Vec2::new(x, 0.0),
        anchor_b: Vec2::ZERO,
        axis: Vec2::new(1.0, 0.0),
        ref_angle: 0.0,
    };
    let grasp = |b: usize| ContactPair {
        a: ColliderRef::Body(b),
        b: ColliderRef::Body(2),
        friction: Friction::Uncertain,
        tag: 1,
    };
    System {
        bodies: vec![
            left,
            right,
            Body::new("box", 0.25, 0.25 * (0.05f64.powi(2) + 0.12f64.powi(2)) / 12.0, Pose::new(0.0, 0.0, 0.0))
                .with_shape(Shape::Rect {
                    half_w: bw,
                    half_h: 0.06,
                }),
        ],
        joints: vec![slide(0, -(bw + pw)), slide(1, bw + pw)],
        motors: vec![],
        planes: vec![],
        contact_pairs: vec![grasp(0), grasp(1)],
        gravity: Vec2::ZERO,
        settings: StepSettings::default(),
        mass_param_body: Some(2),
    }
}

fn stick_slip() -> Outcome {
    let squeeze = 10.0;
    let th = WorldParams::new(0.25, 0.5);
    let capacity = 2.0 * th.theta_mu * squeeze;
    // 0.6% of the capacity per step
    let rate = 0.006 * capacity;
    let mut sys = squeeze_rig(squeeze);
    let mut st = sys.initial_state();
    for _ in 0..40 {
        st = step(&sys, &st, &[], &th, DT).map_err(|e| e.to_string())?;
    }
    let normal: f64 = st.contacts.iter().map(|c| c.lambda_n).sum();
    ensure!((normal - 2.0 * squeeze).abs() < 1e-6 * squeeze, "settled normal force {normal}");

    let (mut onset, mut cross) = (None, None);
    for j in 1..400usize {
        let load = rate * j as f64;
        sys.bodies[2].external_force = [0.0, load, 0.0];
        st = step(&sys, &st, &[], &th, DT).map_err(|e| e.to_string())?;
        let f = fos_contact(st.contacts.iter().filter(|c| c.tag == 1), RewardMode(2));
        if cross.is_none() && f >= 0.99 {
            cross = Some(j);
        }
        if onset.is_none() && st.velocities[2].vz.abs() > 1e-6 {
            onset = Some((j, load));
        }
        if onset.is_some() && cross.is_some() {
            break;
        }
    }
    let (k_onset, load) = onset.ok_or("box never slipped")?;
    let k_cross = cross.ok_or("inverse FOS never reached 0.99")?;
    let rel = (load - capacity).abs() / capacity;
    ensure!(rel <= 0.02, "onset at {load:.4} N vs 2 mu N = {capacity} N");
    ensure!(k_cross.abs_diff(k_onset) <= 2, "FOS crossed at step {k_cross}, onset at {k_onset}");
    Ok(format!(
        "onset {load:.3} N vs 2 mu N {capacity:.3} N ({:.2}%), FOS crossed 0.99 {} step(s) from onset",
        rel * 100.0,
        k_cross.abs_diff(k_onset)
    ))
}

/// Peak lift-motor ratio and box rise through the end of the lift phase.
fn lift_with_limit(fraction: f64) -> Result<(f64, f64, f64), String> {
    let theta = physfilter::uncertainty::nominal(&reference_spec());
    let mut cfg = ScenarioConfig::default();
    cfg.lift_max_torque = fraction * cfg.static_lift_torque(theta.theta_m);
    let world = build_handover(theta, &cfg, &reference_spec().domain).map_err(|e| e.to_string())?;
    let horizon = cfg.phases.lift[1] + 24;
    let traj = rollout(&world, horizon, DT, MotorReduction::Max, false).map_err(|e| e.to_string())?;
    let z0 = world.box_pose(&traj.states[0]).z;
    let rise = world.box_pose(traj.states.last().unwrap()).z - z0;
    let lift = world.giving().lift_motor;
    let lift_peak = traj
        .states
        .iter()
        .map(|s| s.motor_efforts[lift].abs() / cfg.lift_max_torque)
        .fold(0.0, f64::max);
    let fos_peak = traj.fos.iter().map(|f| f.motor_inv).fold(0.0, f64::max);
    Ok((fos_peak, lift_peak, rise))
}

fn motor_saturation() -> Outcome {
    let target = ScenarioConfig::default().lift_height;
    let (weak_fos, _, weak_rise) = lift_with_limit(0.9)?;
    ensure!(weak_fos == 1.0, "90%: peak motor inverse FOS {weak_fos}");
    ensure!(weak_rise < 0.1 * target, "90%: box rose {weak_rise:.4} m");
    let (strong_fos, strong_lift, strong_rise) = lift_with_limit(1.1)?;
    ensure!(strong_rise > 0.9 * target, "110%: box rose only {strong_rise:.4} m");
    ensure!(strong_fos <= 0.95, "110%: peak motor inverse FOS {strong_fos:.4}");
    Ok(format!(
        "90%: FOS 1, rise {:.1} mm; 110%: rise {:.1} mm, peak FOS {strong_fos:.3} (lift motor {strong_lift:.3})",
        weak_rise * 1e3,
        strong_rise * 1e3
    ))
}

fn score_calculus() -> Outcome {
    let spec = reference_spec();
    let grid = make_grid(&spec, 48).map_err(|e| e.to_string())?;
    for c in [0.0, 0.5, 1.0] {
        let s = safety_score(&FosField::constant(48, 48, c), &grid.weights).map_err(|e| e.to_string())?;
        ensure!((s - c).abs() <= 1e-9, "constant {c} scored {s}");
    }

    let n = 1024;
    let (dm, dmu) = (spec.domain.mass, spec.domain.friction);
    let (hm, hmu) = ((dm.upper - dm.lower) / n as f64, (dmu.upper - dmu.lower) / n as f64);
    let mut integral = 0.0;
    for i in 0..n {
        for j in 0..n {
            let theta = WorldParams::new(dm.lower + (i as f64 + 0.5) * hm, dmu.lower + (j as f64 + 0.5) * hmu);
            integral += density(&spec, &theta).map_err(|e| e.to_string())? * hm * hmu;
        }
    }
    ensure!((integral - 1.0).abs() <= 1e-6, "density integrates to {integral}");

    let settings = RunConfig::default().filter_settings();
    let (world, traj) = dense_rollout(&spec, &settings.scenario, settings.horizon, DT, settings.reduction)
        .map_err(|e| e.to_string())?;
    let pool = worker_pool(settings.workers).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for event in select_critical(&traj, &settings.selection) {
        let mut scores = [0.0; 2];
        for (slot, n) in [48, 96].into_iter().enumerate() {
            let grid = make_grid(&spec, n).map_err(|e| e.to_string())?;
            let field = sparse_evaluate(&world, &traj, &event, &grid, 1, settings.reduction, &pool)
                .map_err(|e| e.to_string())?;
            scores[slot] = safety_score(&field, &grid.weights).map_err(|e| e.to_string())?;
        }
        let diff = (scores[0] - scores[1]).abs();
        ensure!(diff < 1e-3, "{} event: S48 {} vs S96 {}", event.cause.name(), scores[0], scores[1]);
        worst = worst.max(diff);
    }
    Ok(format!("constant fields exact, density integral {integral:.9}, 48->96 max change {worst:.1e}"))
}

fn tolerance_boundary() -> Outcome {
    let cases = [(0.75, false), (0.733, true), (0.781, false)];
    for (s, expected) in cases {
        let got = is_safe(s, 0.75).map_err(|e| e.to_string())?;
        ensure!(got == expected, "is_safe({s}, 0.75) = {got}");
    }
    Ok("0.75 -> unsafe, 0.733 -> safe, 0.781 -> unsafe".into())
}

fn pipeline_direction() -> Outcome {
    let start = Instant::now();
    let mut settings = RunConfig::default().filter_settings();
    settings.workers = 8;
    let report = filter_run(&reference_spec(), &settings).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(report.stages.len() == 2, "{} stages", report.stages.len());
    let (first, second) = (&report.stages[0], &report.stages[1]);
    ensure!(first.decision == Decision::Probe, "first decision {:?}", first.decision);
    ensure!(first.events.iter().any(|e| e.score >= 0.75), "no event at or above tolerance");
    let expected = apply_probe(&reference_spec(), &settings.probe).map_err(|e| e.to_string())?;
    ensure!(second.distribution == expected, "second stage used {:?}", second.distribution);
    ensure!(second.rescored_from.is_none(), "second stage re-weighted instead of re-simulating");
    ensure!(second.decision == Decision::RollOut, "second decision {:?}", second.decision);
    ensure!(second.events.iter().all(|e| e.score < 0.75), "an updated event exceeds tolerance");
    ensure!(report.decision == Decision::RollOut, "final decision {:?}", report.decision);
    let mut parts = Vec::new();
    for cause in Cause::ALL {
        let score = |stage: &physfilter::pipeline::Stage| {
            stage
                .events
                .iter()
                .filter(|e| e.event.cause == cause)
                .map(|e| e.score)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let (p, q) = (score(first), score(second));
        ensure!(q < p, "{}: S(p') {q} not below S(p) {p}", cause.name());
        parts.push(format!("{} {p:.3} -> {q:.3}", cause.name()));
    }
    ensure!(secs < 300.0, "took {secs:.0} s");
    Ok(format!("Probe then RollOut; {}; {secs:.1} s", parts.join(", ")))
}

fn feasibility() -> Outcome {
    let out = budget(&FeasibilityInput::new(10.0, 100, 1.0 / 1000.0)).map_err(|e| e.to_string())?;
    ensure!(out.n_dense == 1_000 && out.n_sparse == 1_000_000, "{out:?}");
    Ok("tau 10, 100 threads, alpha 1/1000 -> (1000, 1000000)".into())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut reports = Vec::new();
    for workers in [1, 8] {
        let cfg = RunConfig {
            workers,
            output_dir: dir.path().join(format!("w{workers}")),
            ..RunConfig::default()
        };
        cmd_filter(&cfg).map_err(|e| e.to_string())?;
        reports.push(std::fs::read(cfg.output_dir.join(REPORT_FILE)).map_err(|e| e.to_string())?);
    }
    ensure!(reports[0] == reports[1], "report.json differs between 1 and 8 workers");
    Ok(format!("report.json identical for 1 and 8 workers ({} bytes)", reports[0].len()))
}

fn fos_units() -> Outcome {
    let base = squeeze_rig(10.0);
    let mut st = base.initial_state();
    let mut sys = base.clone();
    sys.bodies[2].external_force = [0.0, 3.0, 0.0];
    for _ in 0..20 {
        st = step(&sys, &st, &[], &WorldParams::new(0.25, 0.5), DT).map_err(|e| e.to_string())?;
    }
    let grasp: Vec<_> = st.contacts.iter().filter(|c| c.tag == 1).cloned().collect();
    let f = fos_contact(&grasp, RewardMode(2));
    ensure!(f > 0.0 && f < 1.0, "rig inverse FOS {f}");
    // power-of-two factors scale without rounding
    for s in [0.125, 2.0, 1024.0] {
        let scaled: Vec<_> = grasp
            .iter()
            .map(|c| {
                let mut c = c.clone();
                c.lambda_n *= s;
                c.lambda_t *= s;
                c
            })
            .collect();
        let g = fos_contact(&scaled, RewardMode(2));
        ensure!(g == f, "scaling by {s}: {g} vs {f}");
    }
    for r in [1, 3] {
        ensure!(fos_contact(&grasp, RewardMode(r)) == 0.0, "mode {r} not gated");
    }
    let loads = [(9.0, 10.0), (2.0, 20.0)];
    let max = fos_motor(&loads, MotorReduction::Max).map_err(|e| e.to_string())?;
    let min = fos_motor(&loads, MotorReduction::Min).map_err(|e| e.to_string())?;
    ensure!(max == 0.9, "max reduction {max}");
    ensure!(min == 0.1, "min reduction {min}");
    Ok(format!("scale invariant at {f:.4}, modes 1 and 3 gated, motor max 0.9 / min 0.1"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("LCP oracle equivalence", lcp_oracle),
        ("statics", statics),
        ("stick/slip onset", stick_slip),
        ("motor saturation", motor_saturation),
        ("safety-score calculus", score_calculus),
        ("tolerance boundary", tolerance_boundary),
        ("pipeline direction", pipeline_direction),
        ("feasibility arithmetic", feasibility),
        ("determinism", determinism),
        ("FOS unit properties", fos_units),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
