//! Acceptance suite: one PASS/FAIL line per criterion with the measured
//! numbers. Long-running (tens of minutes on one core), so it only runs
//! when selected:
//!
//! ```text
//! cargo test -p diffdyn-cli --test acceptance            # all criteria
//! cargo test -p diffdyn-cli --test acceptance -- 1 4 5   # a subset
//! ```
//!
//! Exits nonzero if any selected criterion fails.

#[path = "../../core/tests/common/oracles.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use diffdyn::control::param_count;
use diffdyn::dynamics::orthogonality_error;
use diffdyn::optimize::{optimize_loop, CmaEs, LogRow, Method, Outcome, Problem, Status, Workers};
use diffdyn::scenarios::{
    gradcheck_report, scenario, BallThrow, ControlTask, GradcheckKind, GradcheckReport, Scenario, BALL_RADIUS,
};
use diffdyn::solver::simulate;
use diffdyn::{SimConfig, WorldState};
use diffdyn_cli::benchmark::{quadruped_task, time_rollouts, Timing};
use diffdyn_cli::config::{resolve, Overrides, RunConfig};
use oracles::*;

const SAMPLES: usize = 20;
const GRADCHECK_SEED: u64 = 1;
const BENCH_DURATION: f64 = 0.1;

struct Line {
    pass: bool,
    text: String,
}

fn report(n: usize, title: &str, pass: bool, detail: String) -> Line {
    let text = format!(
        "criterion {n} {title}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    println!("{text}");
    Line { pass, text }
}

fn config(scenario: &str, method: Option<Method>) -> RunConfig {
    let flags = Overrides {
        scenario: Some(scenario.into()),
        method: method.map(|m| m.name().to_string()),
        workers: Some(1),
        ..Overrides::default()
    };
    resolve(flags, None).unwrap().0
}

fn ball() -> BallThrow {
    match Scenario::from_scene(&scenario("ball-throw").unwrap()).unwrap() {
        Scenario::Ball(b) => b,
        Scenario::Control(_) => unreachable!(),
    }
}

fn control(name: &str) -> ControlTask {
    match Scenario::from_scene(&scenario(name).unwrap()).unwrap() {
        Scenario::Control(c) => c,
        Scenario::Ball(_) => unreachable!(),
    }
}

/// Runs `cfg` with its budget replaced by `budget`.
fn run<P: Problem>(p: &P, cfg: &RunConfig, budget: usize) -> Outcome {
    let mut oc = cfg.optimize_config();
    oc.iterations = budget;
    optimize_loop::<f64, P>(p, p.initial_params(cfg.seed), &oc, &Workers::new(cfg.workers), |_| {})
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Log rows without their wall-time column, bit-exact.
fn payload(log: &[LogRow]) -> Vec<(usize, usize, u64, Option<u64>, u64)> {
    log.iter()
        .map(|r| {
            (
                r.iter,
                r.evals,
                r.loss.to_bits(),
                r.grad_norm.map(f64::to_bits),
                r.best_loss.to_bits(),
            )
        })
        .collect()
}

/// Runs kept for the determinism check.
#[derive(Default)]
struct Runs {
    gradcheck: Vec<GradcheckReport>,
    physics: Option<Physics>,
    logs: BTreeMap<&'static str, (RunConfig, Vec<LogRow>)>,
}

fn criterion_1(runs: &mut Runs) -> Line {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in GradcheckKind::ALL {
        let r = gradcheck_report(kind, kind.default_steps(), SAMPLES, GRADCHECK_SEED).unwrap();
        pass &= r.passed() && r.samples == SAMPLES;
        parts.push(format!(
            "{kind} {:.2e} < {:.0e} over {} samples, {} redrawn",
            r.max_rel_error(),
            r.tolerance,
            r.samples,
            r.redrawn
        ));
        runs.gradcheck.push(r);
    }
    let t = secs(start.elapsed());
    pass &= t < 120.0;
    report(
        1,
        "gradient correctness",
        pass,
        format!("{}; {t:.0} s < 120 s", parts.join("; ")),
    )
}

struct BallRuns {
    sgd: Option<usize>,
    cma: Option<usize>,
}

fn ball_success(p: &BallThrow, out: &Outcome) -> (bool, f64, f64) {
    let (pos, vel) = out.best_eval.as_ref().map_or((f64::NAN, f64::NAN), |e| p.errors(e)[0]);
    (out.status == Status::Converged && pos < 0.01 && vel < 0.01, pos, vel)
}

fn criterion_2(runs: &mut Runs, ball_runs: &mut BallRuns) -> Line {
    let p = ball();
    let cfg = config("ball-throw", None);
    let start = Instant::now();
    let out = run(&p, &cfg, cfg.iters);
    let t = secs(start.elapsed());
    let (ok, pos, vel) = ball_success(&p, &out);
    ball_runs.sgd = ok.then_some(out.evals);
    runs.logs.insert("ball sgd", (cfg.clone(), out.log.clone()));
    report(
        2,
        "ball throw with sgd",
        ok && out.iterations <= 500 && t < 300.0,
        format!(
            "{:?} after {} updates, lr {}, best loss {:.4}, position error {pos:.4} m, speed error {vel:.4} m/s, thresholds 0.01; {t:.0} s",
            out.status, out.iterations, cfg.lr, out.best_loss
        ),
    )
}

fn criterion_3(runs: &mut Runs, ball_runs: &mut BallRuns) -> Line {
    let p = ball();
    let cfg = config("ball-throw", Some(Method::CmaEs));
    let start = Instant::now();
    let out = run(&p, &cfg, cfg.iters);
    let t = secs(start.elapsed());
    let (ok, pos, vel) = ball_success(&p, &out);
    ball_runs.cma = ok.then_some(out.evals);
    runs.logs.insert("ball cma-es", (cfg.clone(), out.log.clone()));
    let cma = if ok {
        format!("cma-es reached the thresholds after {} evaluations", out.evals)
    } else {
        format!(
            "cma-es {:?} after {} evaluations (errors {pos:.4} m, {vel:.4} m/s)",
            out.status, out.evals
        )
    };
    let (pass, sgd) = match (ball_runs.sgd, ball_runs.cma) {
        (Some(s), Some(c)) => (
            c >= 5 * s,
            format!("sgd {s} evaluations, ratio {:.1} >= 5", c as f64 / s as f64),
        ),
        (None, _) => (false, "sgd did not reach the thresholds, so there is no ratio".into()),
        (Some(s), None) => (true, format!("sgd {s} evaluations")),
    };
    report(3, "derivative-free gap", pass, format!("{cma}; {sgd}; {t:.0} s"))
}

/// Everything criterion 4 measures.
#[derive(Debug, PartialEq)]
struct Physics {
    free_fall_error: f64,
    rebound: f64,
    /// Single-contact and stacked scenes at the default sweep count.
    single: Violations,
    stacked: Violations,
    active: usize,
    /// The same scenes solved to convergence.
    single_converged: Violations,
    stacked_converged: Violations,
}

fn physics() -> Physics {
    let cfg = SimConfig::default();
    let model = diffdyn::scenarios::build_free_fall().compile().unwrap();
    let expected = free_fall_heights(5.0, 9.81, cfg.dt, 100);
    let mut fall: f64 = 0.0;
    simulate(
        &model,
        &cfg,
        &WorldState::at_build_pose(&model, 1),
        100,
        None,
        |n, s| {
            fall = fall.max((s.body(0, 0).x[2] - expected[n - 1]).abs());
        },
    )
    .unwrap();

    // Resting depth inside the slop; gravity brings the approach to 1 m/s.
    let mut m = diffdyn::scenarios::build_ball();
    m.bodies[0].position[2] = BALL_RADIUS - cfg.slop / 2.0;
    m.bodies[0].velocity[2] = -1.0 + 9.81 * cfg.dt;
    m.bodies[0].restitution = 0.5;
    let model = m.compile().unwrap();
    let end = simulate(&model, &cfg, &WorldState::at_build_pose(&model, 1), 1, None, |_, _| {}).unwrap();

    let (single, stacked, active) = random_scene_violations(cfg.iterations);
    let (single_converged, stacked_converged, _) = random_scene_violations(128);
    Physics {
        free_fall_error: fall,
        rebound: end.body(0, 0).v[2],
        single,
        stacked,
        active,
        single_converged,
        stacked_converged,
    }
}

fn criterion_4(runs: &mut Runs) -> Line {
    let cfg = SimConfig::default();
    let m = physics();
    let expected_rebound = rebound_speed(1.0, 0.5, cfg.restitution_threshold);
    let admissible = [m.single, m.stacked]
        .iter()
        .all(|v| v.negative_impulse <= 0.0 && v.cone <= 1e-9);
    let complementary = m.single.penetrating_velocity <= 1e-6
        && m.single.complementarity <= 1e-6
        && m.single_converged.complementarity <= 1e-6
        && m.stacked_converged.penetrating_velocity <= 1e-3
        && m.stacked_converged.complementarity <= 1e-3;
    let pass = m.free_fall_error <= 1e-9
        && (m.rebound - 0.45).abs() <= 1e-3
        && (m.rebound - expected_rebound).abs() < 1e-9
        && admissible
        && complementary;
    let detail =
        format!(
        "free fall {:.1e} <= 1e-9; rebound {:.6} m/s vs 0.45 +- 1e-3; 100 scenes, {} active contacts at {} sweeps: \
         negative impulse {:.1e}, cone excess {:.1e}, single-contact complementarity {:.1e}; \
         stacked residual approach speed {:.3} m/s at {} sweeps, complementarity {:.1e} at 128 sweeps",
        m.free_fall_error,
        m.rebound,
        m.active,
        cfg.iterations,
        m.single.negative_impulse.max(m.stacked.negative_impulse).max(0.0),
        m.single.cone.max(m.stacked.cone),
        m.single.complementarity,
        m.stacked.penetrating_velocity,
        cfg.iterations,
        m.stacked_converged.complementarity.max(m.stacked_converged.penetrating_velocity),
    );
    runs.physics = Some(m);
    report(4, "physics oracles", pass, detail)
}

fn criterion_5() -> Line {
    let fixed = param_count(&control("arm-fixed").spec);
    let random = param_count(&control("arm-random").spec);
    report(
        5,
        "parameter counts",
        fixed == 17_284 && random == 17_540,
        format!("arm-fixed {fixed} (17284), arm-random {random} (17540)"),
    )
}

fn criterion_6(runs: &mut Runs) -> Line {
    let p = control("arm-fixed");
    let adam_cfg = config("arm-fixed", None);
    let start = Instant::now();
    let adam = run(&p, &adam_cfg, adam_cfg.iters);
    let t_adam = secs(start.elapsed());
    let best_at = adam.log.iter().position(|r| r.best_loss == adam.best_loss).unwrap_or(0);
    runs.logs.insert("arm adam", (adam_cfg.clone(), adam.log.clone()));

    let cma_cfg = config("arm-fixed", Some(Method::CmaEs));
    let start = Instant::now();
    let cma = run(&p, &cma_cfg, cma_cfg.iters);
    let t_cma = secs(start.elapsed());
    runs.logs.insert("arm cma-es", (cma_cfg.clone(), cma.log.clone()));

    let adam_ok = adam.best_loss < 0.1 && !matches!(adam.status, Status::NumericalFailure(_));
    let cma_ok = cma.best_loss > 2.0 * adam.best_loss;
    let t = t_adam + t_cma;
    report(
        6,
        "arm fixed point",
        adam_ok && cma_ok && t < 1800.0,
        format!(
            "adam lr {} best mean distance {:.4} m at update {best_at} of {} ({:?}), < 0.1 {}; \
             cma-es sigma0 {} best {:.4} m after {} evaluations, > 2 x adam {}; {t:.0} s",
            adam_cfg.lr,
            adam.best_loss,
            adam.iterations,
            adam.status,
            if adam_ok { "yes" } else { "no" },
            cma_cfg.sigma0,
            cma.best_loss,
            cma.evals,
            if cma_ok { "yes" } else { "no" },
        ),
    )
}

fn criterion_7(runs: &mut Runs) -> Line {
    let p = control("quadruped-gait");
    let cfg = config("quadruped-gait", None);
    let start = Instant::now();
    let out = run(&p, &cfg, 200);
    let t = secs(start.elapsed());
    runs.logs.insert("quadruped adam", (cfg.clone(), out.log.clone()));
    let finite = out
        .log
        .iter()
        .all(|r| r.loss.is_finite() && r.grad_norm.is_some_and(f64::is_finite))
        && !matches!(out.status, Status::NumericalFailure(_));
    let (speed, orth) = match &out.best_eval {
        Some(e) => {
            let orth = (0..p.model.body_count())
                .flat_map(|b| e.final_state[4 * b + 1].chunks(9).map(orthogonality_error))
                .fold(0.0f64, f64::max);
            (p.forward_speed(e).unwrap(), orth)
        }
        None => (f64::NAN, f64::NAN),
    };
    report(
        7,
        "quadruped gait",
        finite && speed > 0.1 && orth < 1e-6 && t < 7200.0,
        format!(
            "adam lr {} best forward speed {speed:.4} m/s after {} updates, > 0.1 {}, finite {finite}, orthogonality error {orth:.1e} < 1e-6; {t:.0} s",
            cfg.lr,
            out.iterations,
            if speed > 0.1 { "yes" } else { "no" }
        ),
    )
}

/// Reruns every recorded criterion (optimizations as prefixes of their
/// logs) and compares the payloads bit for bit.
fn criterion_8(runs: &Runs) -> Line {
    let mut checked = Vec::new();
    let mut mismatched = Vec::new();
    for r in &runs.gradcheck {
        let again = gradcheck_report(r.kind, r.steps, r.samples, GRADCHECK_SEED).unwrap();
        checked.push(format!("gradcheck {}", r.kind));
        if &again != r {
            mismatched.push(format!("gradcheck {}", r.kind));
        }
    }
    if let Some(first) = &runs.physics {
        checked.push("physics".into());
        if &physics() != first {
            mismatched.push("physics".into());
        }
    }
    for (name, (cfg, log)) in &runs.logs {
        let short = match *name {
            "ball sgd" => rerun(&ball(), cfg, 25),
            "ball cma-es" => rerun(&ball(), cfg, 30 * population(&ball(), cfg)),
            "arm adam" => rerun(&control("arm-fixed"), cfg, 10),
            "arm cma-es" => rerun(&control("arm-fixed"), cfg, 6 * population(&control("arm-fixed"), cfg)),
            "quadruped adam" => rerun(&control("quadruped-gait"), cfg, 5),
            _ => unreachable!(),
        };
        let n = short.len().min(log.len());
        checked.push(format!("{name} ({n} rows)"));
        if n == 0 || payload(&short[..n]) != payload(&log[..n]) {
            mismatched.push(name.to_string());
        }
    }
    report(
        8,
        "determinism",
        mismatched.is_empty() && !checked.is_empty(),
        format!(
            "reran {}; mismatched: {}",
            checked.join(", "),
            if mismatched.is_empty() {
                "none".into()
            } else {
                mismatched.join(", ")
            }
        ),
    )
}

fn population<P: Problem>(p: &P, cfg: &RunConfig) -> usize {
    CmaEs::new(&p.initial_params(cfg.seed), cfg.sigma0, 0).population_size()
}

fn rerun<P: Problem>(p: &P, cfg: &RunConfig, budget: usize) -> Vec<LogRow> {
    run(p, cfg, budget).log
}

fn criterion_9() -> Line {
    let mut rows: Vec<Timing> = Vec::new();
    let workers = diffdyn_cli::default_workers().unwrap_or(1);
    for width in [128, 1066] {
        for batch in [1, 128] {
            let task = quadruped_task(batch, width, BENCH_DURATION).unwrap();
            let t = time_rollouts(&task, workers, 0, BENCH_DURATION).unwrap();
            println!(
                "  batch {:3} params {:8} workers {}: forward {:.3} s, forward+backward {:.3} s, ratio {:.2}, {:.0} model-seconds/day",
                t.batch,
                t.params,
                t.workers,
                t.fwd_s,
                t.fwd_bwd_s,
                t.ratio(),
                t.model_seconds_per_day()
            );
            rows.push(t);
        }
    }
    let ok = rows.len() == 4 && rows.iter().all(|t| t.fwd_s > 0.0 && t.ratio().is_finite());
    let ratios: Vec<String> = rows.iter().map(|t| format!("{:.1}", t.ratio())).collect();
    report(
        9,
        "benchmark grid",
        ok,
        format!(
            "batch {{1,128}} x params {{{}, {}}} over {BENCH_DURATION} s rollouts, backward/forward ratios {}",
            rows[0].params,
            rows[2].params,
            ratios.join(", ")
        ),
    )
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut runs = Runs::default();
    let mut ball_runs = BallRuns { sgd: None, cma: None };
    let mut lines = Vec::new();
    let start = Instant::now();
    if want(1) {
        lines.push(criterion_1(&mut runs));
    }
    if want(2) || want(3) {
        let l = criterion_2(&mut runs, &mut ball_runs);
        if want(2) {
            lines.push(l);
        }
    }
    if want(3) {
        lines.push(criterion_3(&mut runs, &mut ball_runs));
    }
    if want(4) {
        lines.push(criterion_4(&mut runs));
    }
    if want(5) {
        lines.push(criterion_5());
    }
    if want(6) {
        lines.push(criterion_6(&mut runs));
    }
    if want(7) {
        lines.push(criterion_7(&mut runs));
    }
    if want(8) {
        lines.push(criterion_8(&runs));
    }
    if want(9) {
        lines.push(criterion_9());
    }
    println!("\nsummary ({:.0} s):", secs(start.elapsed()));
    for l in &lines {
        println!("{}", l.text);
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    println!("{} passed, {failed} failed", lines.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
