//! `optimize`: runs a scenario's optimization and writes its artifacts.
//!
//! Output directory contents:
//! - `convergence.csv`: one row per update (per generation for cma-es)
//! - `config.json`: the effective run configuration
//! - `result.json`: status, best loss, task metrics and best parameters
//! - `checkpoint.bin` and `checkpoint.txt`: best controller (control tasks)

use std::fs;
use std::io::{BufWriter, Write};

use diffdyn::control::checkpoint::Checkpoint;
use diffdyn::dynamics::orthogonality_error;
use diffdyn::optimize::{optimize_loop, write_log, Evaluation, Outcome, Problem, Status, Workers};
use diffdyn::scenarios::Scenario;
use serde_json::{json, Value};

use crate::config::{resolve, RunConfig};
use crate::{CliResult, Exit, OptimizeArgs};

pub fn run(args: &OptimizeArgs, out: &mut dyn Write, log: &mut dyn Write) -> CliResult<Exit> {
    let (cfg, scene) = resolve(args.overrides(), args.config.as_deref())?;
    let scenario = Scenario::from_scene(&scene)?;
    let outcome = match &scenario {
        Scenario::Ball(p) => optimize(p, &cfg, log),
        Scenario::Control(p) => optimize(p, &cfg, log),
    };
    write_artifacts(&cfg, &scenario, &outcome)?;
    writeln!(
        out,
        "{} {} {} {} {} {:.3}",
        cfg.scenario, cfg.method, outcome.iterations, outcome.evals, outcome.best_loss, outcome.wall_s
    )?;
    let exit = match &outcome.status {
        Status::Converged => Exit::Success,
        Status::BudgetExhausted => Exit::BudgetExhausted,
        Status::NumericalFailure(_) => Exit::NumericalFailure,
    };
    match &outcome.status {
        Status::NumericalFailure(why) => writeln!(log, "numerical failure: {why}")?,
        Status::BudgetExhausted => writeln!(log, "budget of {} exhausted before success", cfg.iters)?,
        Status::Converged => {}
    }
    for (k, v) in metrics(&scenario, outcome.best_eval.as_ref()) {
        writeln!(log, "{k} {v}")?;
    }
    Ok(exit)
}

fn optimize<P: Problem>(p: &P, cfg: &RunConfig, log: &mut dyn Write) -> Outcome {
    let workers = Workers::new(cfg.workers);
    let params = p.initial_params(cfg.seed);
    optimize_loop::<f64, P>(p, params, &cfg.optimize_config(), &workers, |row| {
        if row.iter % 10 == 0 {
            let _ = writeln!(
                log,
                "iter {} evals {} loss {} best {}",
                row.iter, row.evals, row.loss, row.best_loss
            );
        }
    })
}

/// Task-specific figures of the best evaluation.
pub fn metrics(scenario: &Scenario, eval: Option<&Evaluation>) -> Vec<(&'static str, f64)> {
    let Some(e) = eval else {
        return Vec::new();
    };
    match scenario {
        Scenario::Ball(p) => {
            let (pos, vel) = p.errors(e)[0];
            vec![("position_error", pos), ("velocity_error", vel)]
        }
        Scenario::Control(p) => {
            let mut m = match p.forward_speed(e) {
                Some(v) => vec![("forward_speed", v)],
                None => vec![("mean_distance", e.loss)],
            };
            let orth = (0..p.model.body_count())
                .flat_map(|b| e.final_state[4 * b + 1].chunks(9).map(orthogonality_error))
                .fold(0.0f64, f64::max);
            m.push(("orthogonality_error", orth));
            m
        }
    }
}

fn write_artifacts(cfg: &RunConfig, scenario: &Scenario, outcome: &Outcome) -> CliResult<()> {
    fs::create_dir_all(&cfg.out)?;
    let mut w = BufWriter::new(fs::File::create(cfg.out.join("convergence.csv"))?);
    write_log(&mut w, &outcome.log)?;
    w.flush()?;
    fs::write(
        cfg.out.join("config.json"),
        serde_json::to_string_pretty(cfg).unwrap() + "\n",
    )?;

    let status = match &outcome.status {
        Status::Converged => json!("converged"),
        Status::BudgetExhausted => json!("budget_exhausted"),
        Status::NumericalFailure(why) => json!({ "numerical_failure": why }),
    };
    let metrics: serde_json::Map<String, Value> = metrics(scenario, outcome.best_eval.as_ref())
        .into_iter()
        .map(|(k, v)| (k.to_string(), json!(v)))
        .collect();
    let result = json!({
        "scenario": cfg.scenario,
        "method": cfg.method,
        "status": status,
        "iterations": outcome.iterations,
        "evals": outcome.evals,
        "best_loss": finite_or_null(outcome.best_loss),
        "wall_s": outcome.wall_s,
        "metrics": metrics,
        "best_params": outcome.best_params,
    });
    fs::write(
        cfg.out.join("result.json"),
        serde_json::to_string_pretty(&result).unwrap() + "\n",
    )?;

    if let Scenario::Control(p) = scenario {
        let ck = Checkpoint {
            spec: p.spec.clone(),
            seed: cfg.seed,
            params: outcome.best_params.clone(),
        };
        ck.save(&cfg.out.join("checkpoint.bin"))?;
    }
    Ok(())
}

fn finite_or_null(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}
