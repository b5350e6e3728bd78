//! Rollouts, BPTT gradients and the optimizers that consume them.

mod bptt;
mod cmaes;
mod driver;
mod update;

pub use bptt::{evaluate, Episode, Evaluation, Problem, RolloutOptions, StepOut, Workers, CHUNK};
pub use cmaes::{cma_es_minimize, CmaEs, CmaResult, FULL_COVARIANCE_LIMIT};
pub use driver::{optimize_loop, write_log, LogRow, Method, OptimizeConfig, Outcome, Status, LOG_HEADER};
pub use update::{clip_l2, l2, sgd_step, Adam};

use crate::gradcheck::{max_relative_error, numeric_gradient, GradCheck};
use crate::tape::Real;

/// Compares the BPTT gradient (α = 1) of `problem` at `params` with central
/// differences of its forward loss.
pub fn problem_gradcheck<T: Real, P: Problem>(
    problem: &P,
    params: &[f64],
    episode: &Episode,
    step: f64,
    workers: &Workers,
) -> crate::Result<(GradCheck, Evaluation)> {
    let eval = evaluate::<T, P>(
        problem,
        params,
        episode,
        RolloutOptions {
            alpha: 1.0,
            gradient: true,
        },
        workers,
    )?;
    let fwd = RolloutOptions {
        alpha: 1.0,
        gradient: false,
    };
    let mut failure = None;
    let numeric = numeric_gradient(
        |q| match evaluate::<T, P>(problem, q, episode, fwd, workers) {
            Ok(e) => e.loss,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        params,
        step,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let analytic = eval.grad.clone().unwrap();
    Ok((
        GradCheck {
            value: eval.loss,
            max_rel_error: max_relative_error(&analytic, &numeric),
            tape: analytic,
            numeric,
        },
        eval,
    ))
}
