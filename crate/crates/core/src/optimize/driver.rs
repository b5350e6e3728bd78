//! The outer optimization loop shared by all methods.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bptt::{evaluate, Evaluation, Problem, RolloutOptions, Workers};
use super::cmaes::CmaEs;
use super::update::{clip_l2, l2, sgd_step, Adam};
use crate::error::Error;
use crate::tape::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Sgd,
    Adam,
    CmaEs,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::Adam => "adam",
            Method::CmaEs => "cma-es",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sgd" => Ok(Method::Sgd),
            "adam" => Ok(Method::Adam),
            "cma-es" => Ok(Method::CmaEs),
            _ => Err(format!("unknown method {s:?} (expected sgd, adam or cma-es)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeConfig {
    pub method: Method,
    /// Update budget for gradient methods; evaluation budget for CMA-ES.
    pub iterations: usize,
    pub lr: f64,
    pub clip: f64,
    pub alpha: f64,
    pub sigma0: f64,
    pub seed: u64,
    /// Stop as soon as the problem reports success.
    pub stop_on_success: bool,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            method: Method::Adam,
            iterations: 100,
            lr: 1e-3,
            clip: 1.0,
            alpha: 0.99,
            sigma0: 0.1,
            seed: 0,
            stop_on_success: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub evals: usize,
    pub loss: f64,
    /// Norm of the batch gradient before clipping; `None` for CMA-ES.
    pub grad_norm: Option<f64>,
    pub wall_ms: f64,
    pub best_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Status {
    Converged,
    BudgetExhausted,
    NumericalFailure(String),
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub params: Vec<f64>,
    pub best_params: Vec<f64>,
    pub best_loss: f64,
    /// Evaluation at `best_params`, when one was made.
    pub best_eval: Option<Evaluation>,
    pub iterations: usize,
    pub evals: usize,
    pub log: Vec<LogRow>,
    pub status: Status,
    pub wall_s: f64,
}

pub const LOG_HEADER: &str = "iter,evals,loss,grad_norm,wall_ms,best_loss";

/// Writes the convergence log; floats use the shortest round-trip form.
pub fn write_log(mut w: impl Write, log: &[LogRow]) -> io::Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for r in log {
        let g = r.grad_norm.map(|g| g.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.iter, r.evals, r.loss, g, r.wall_ms, r.best_loss
        )?;
    }
    Ok(())
}

struct Tracker {
    best_loss: f64,
    best_params: Vec<f64>,
    best_eval: Option<Evaluation>,
    log: Vec<LogRow>,
    start: Instant,
}

impl Tracker {
    fn offer(&mut self, loss: f64, params: &[f64], eval: &Evaluation) {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_params = params.to_vec();
            self.best_eval = Some(eval.clone());
        }
    }

    /// A successful evaluation is reported even if an earlier failing one
    /// had a lower loss.
    fn accept(&mut self, loss: f64, params: &[f64], eval: &Evaluation) {
        self.best_loss = loss;
        self.best_params = params.to_vec();
        self.best_eval = Some(eval.clone());
    }

    fn row(&mut self, iter: usize, evals: usize, loss: f64, grad_norm: Option<f64>) -> &LogRow {
        self.log.push(LogRow {
            iter,
            evals,
            loss,
            grad_norm,
            wall_ms: self.start.elapsed().as_secs_f64() * 1e3,
            best_loss: self.best_loss,
        });
        self.log.last().unwrap()
    }
}

/// Runs `cfg.method` on `problem` from `params`. `on_row` sees every log
/// row as it is produced.
pub fn optimize_loop<T: Real, P: Problem>(
    problem: &P,
    params: Vec<f64>,
    cfg: &OptimizeConfig,
    workers: &Workers,
    mut on_row: impl FnMut(&LogRow),
) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut t = Tracker {
        best_loss: f64::INFINITY,
        best_params: params.clone(),
        best_eval: None,
        log: Vec::new(),
        start: Instant::now(),
    };
    let mut params = params;
    let mut evals = 0;
    let mut iterations = 0;
    let mut status = Status::BudgetExhausted;
    let mut succeeded = false;

    if params.is_empty() {
        let ep = problem.sample_episode(&mut rng);
        let opts = RolloutOptions {
            alpha: cfg.alpha,
            gradient: false,
        };
        status = match evaluate::<T, P>(problem, &params, &ep, opts, workers) {
            Ok(e) => {
                t.offer(e.loss, &params, &e);
                on_row(t.row(0, 1, e.loss, None));
                evals = 1;
                Status::Converged
            }
            Err(e) => Status::NumericalFailure(e.to_string()),
        };
    } else {
        match cfg.method {
            Method::Sgd | Method::Adam => {
                let mut adam = Adam::new(params.len());
                let opts = RolloutOptions {
                    alpha: cfg.alpha,
                    gradient: true,
                };
                while iterations < cfg.iterations {
                    let ep = problem.sample_episode(&mut rng);
                    let eval = match evaluate::<T, P>(problem, &params, &ep, opts, workers) {
                        Ok(e) => e,
                        Err(e) => {
                            status = Status::NumericalFailure(e.to_string());
                            break;
                        }
                    };
                    evals += 1;
                    t.offer(eval.loss, &params, &eval);
                    let mut g = eval.grad.clone().unwrap();
                    let norm = l2(&g);
                    if !norm.is_finite() {
                        status = Status::NumericalFailure(format!("non-finite gradient at iteration {iterations}"));
                        break;
                    }
                    on_row(t.row(iterations, evals, eval.loss, Some(norm)));
                    if cfg.stop_on_success && problem.success(&eval) == Some(true) {
                        t.accept(eval.loss, &params, &eval);
                        succeeded = true;
                        break;
                    }
                    clip_l2(&mut g, cfg.clip);
                    match cfg.method {
                        Method::Sgd => sgd_step(&mut params, &g, cfg.lr),
                        _ => adam.step(&mut params, &g, cfg.lr),
                    }
                    iterations += 1;
                }
            }
            Method::CmaEs => {
                let mut es = CmaEs::new(&params, cfg.sigma0, rng.next_u64());
                let opts = RolloutOptions {
                    alpha: cfg.alpha,
                    gradient: false,
                };
                'outer: while evals < cfg.iterations {
                    let ep = problem.sample_episode(&mut rng);
                    let pop = es.ask();
                    let mut fit = Vec::with_capacity(pop.len());
                    let mut gen_best = f64::INFINITY;
                    for x in &pop {
                        if evals == cfg.iterations {
                            break 'outer;
                        }
                        evals += 1;
                        let loss = match evaluate::<T, P>(problem, x, &ep, opts, workers) {
                            Ok(e) => {
                                t.offer(e.loss, x, &e);
                                if cfg.stop_on_success && problem.success(&e) == Some(true) {
                                    on_row(t.row(iterations, evals, e.loss, None));
                                    t.accept(e.loss, x, &e);
                                    succeeded = true;
                                    params.clone_from(x);
                                    break 'outer;
                                }
                                e.loss
                            }
                            // A candidate that blows the simulation up is
                            // simply a bad candidate.
                            Err(Error::NonFinite { .. }) => f64::INFINITY,
                            Err(e) => {
                                status = Status::NumericalFailure(e.to_string());
                                break 'outer;
                            }
                        };
                        gen_best = gen_best.min(loss);
                        fit.push(loss);
                    }
                    es.tell(&fit);
                    params = es.mean.iter().copied().collect();
                    on_row(t.row(iterations, evals, gen_best, None));
                    iterations += 1;
                }
            }
        }
        if succeeded {
            status = Status::Converged;
        } else if status == Status::BudgetExhausted
            && t.best_eval.as_ref().is_some_and(|e| problem.success(e).is_none())
        {
            // Tasks without a success threshold complete by spending the budget.
            status = Status::Converged;
        }
    }
    Outcome {
        params,
        best_params: t.best_params,
        best_loss: t.best_loss,
        best_eval: t.best_eval,
        iterations,
        evals,
        log: t.log,
        status,
        wall_s: t.start.elapsed().as_secs_f64(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ops::Range;

    use crate::optimize::Episode;
    use crate::tape::{Axis, Shape, Tape, Var};

    /// Scalar recurrence `x_{t+1} = a·x_t`, loss `x_N` on every row.
    struct Linear {
        steps: usize,
        batch: usize,
    }

    impl Problem for Linear {
        fn name(&self) -> &str {
            "linear"
        }
        fn param_shapes(&self) -> Vec<Shape> {
            vec![Shape::new(1, 1)]
        }
        fn initial_params(&self, _seed: u64) -> Vec<f64> {
            vec![0.5]
        }
        fn batch(&self) -> usize {
            self.batch
        }
        fn steps(&self) -> usize {
            self.steps
        }
        fn initial_state<T: Real>(
            &self,
            tape: &mut Tape<T>,
            _params: &[Var],
            rows: Range<usize>,
            _episode: &Episode,
        ) -> crate::Result<Vec<Var>> {
            let data: Vec<f64> = rows.map(|r| 1.0 + r as f64).collect();
            Ok(vec![tape.constant_f64(data.len(), 1, &data)])
        }
        fn step<T: Real>(
            &self,
            tape: &mut Tape<T>,
            _t: usize,
            state: &[Var],
            params: &[Var],
            _rows: Range<usize>,
            _episode: &Episode,
        ) -> crate::Result<super::super::StepOut> {
            let x = tape.mul(state[0], params[0])?;
            Ok(super::super::StepOut {
                state: vec![x],
                loss: None,
                guards: None,
            })
        }
        fn terminal<T: Real>(
            &self,
            tape: &mut Tape<T>,
            state: &[Var],
            _rows: Range<usize>,
            _episode: &Episode,
        ) -> crate::Result<Option<Var>> {
            Ok(Some(tape.sum(state[0], Axis::Cols)))
        }
        fn state_labels(&self) -> Vec<String> {
            vec!["x".into()]
        }
    }

    #[test]
    fn zero_parameter_problem_returns_immediately() {
        struct Empty;
        impl Problem for Empty {
            fn name(&self) -> &str {
                "empty"
            }
            fn param_shapes(&self) -> Vec<Shape> {
                Vec::new()
            }
            fn initial_params(&self, _seed: u64) -> Vec<f64> {
                Vec::new()
            }
            fn batch(&self) -> usize {
                1
            }
            fn steps(&self) -> usize {
                3
            }
            fn initial_state<T: Real>(
                &self,
                tape: &mut Tape<T>,
                _p: &[Var],
                _rows: Range<usize>,
                _e: &Episode,
            ) -> crate::Result<Vec<Var>> {
                Ok(vec![tape.scalar(2.0)])
            }
            fn step<T: Real>(
                &self,
                tape: &mut Tape<T>,
                _t: usize,
                s: &[Var],
                _p: &[Var],
                _rows: Range<usize>,
                _e: &Episode,
            ) -> crate::Result<super::super::StepOut> {
                let l = tape.add_scalar(s[0], 0.0)?;
                Ok(super::super::StepOut {
                    state: vec![s[0]],
                    loss: Some(l),
                    guards: None,
                })
            }
            fn state_labels(&self) -> Vec<String> {
                vec!["s".into()]
            }
        }
        let out = optimize_loop::<f64, _>(&Empty, Vec::new(), &OptimizeConfig::default(), &Workers::new(1), |_| {});
        assert_eq!(out.status, Status::Converged);
        assert_eq!(out.best_loss, 2.0);
        assert_eq!(out.log.len(), 1);
    }

    #[test]
    fn logs_are_reproducible() {
        let p = Linear { steps: 3, batch: 2 };
        for method in [Method::Sgd, Method::Adam, Method::CmaEs] {
            let cfg = OptimizeConfig {
                method,
                iterations: 20,
                lr: 0.01,
                ..OptimizeConfig::default()
            };
            let a = optimize_loop::<f64, _>(&p, vec![0.9], &cfg, &Workers::new(1), |_| {});
            let b = optimize_loop::<f64, _>(&p, vec![0.9], &cfg, &Workers::new(1), |_| {});
            let strip = |o: &Outcome| -> Vec<(usize, usize, u64, Option<u64>, u64)> {
                o.log
                    .iter()
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
            };
            assert_eq!(strip(&a), strip(&b), "{method}");
            assert!(a.best_loss < 0.9f64.powi(3) * 1.5, "{method}");
        }
    }

    #[test]
    fn csv_format() {
        let log = [LogRow {
            iter: 0,
            evals: 1,
            loss: 0.1,
            grad_norm: None,
            wall_ms: 2.5,
            best_loss: 0.1,
        }];
        let mut out = Vec::new();
        write_log(&mut out, &log).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "iter,evals,loss,grad_norm,wall_ms,best_loss\n0,1,0.1,,2.5,0.1\n"
        );
    }
}
