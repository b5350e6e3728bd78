//! Rollouts and backpropagation through time.
//!
//! A rollout is a recurrence `s₀ = init(θ)`, `s_{t+1} = step(t, s_t, θ)`
//! with loss `mean_{t,b} ℓ_t + mean_b terminal(s_N)`. Recording all steps on
//! one tape would need gigabytes for long horizons, so the gradient is
//! computed with per-step checkpoints: the forward pass keeps only the
//! states, and the backward pass re-records one step at a time, seeds it
//! with the adjoint of its output state and sweeps it. The adjoint passed
//! from `s_{t+1}` back to `s_t` is multiplied by the decay `α` at every
//! boundary between steps.
//!
//! Batch rows are split into fixed-size chunks that are independent of the
//! worker count; chunk results are reduced in chunk order, so results are
//! bit-identical for any number of workers.

use std::ops::Range;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::control::record_params;
use crate::error::{Error, Result};
use crate::tape::{Real, Shape, Tape, Tensor, Var};

/// Batch rows per independently processed chunk.
pub const CHUNK: usize = 8;

/// Task data drawn per episode, one entry per batch row (e.g. targets).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Episode {
    pub rows: Vec<Vec<f64>>,
}

impl Episode {
    /// `[rows.len(), k]` constant with this episode's data for `rows`.
    pub fn record<T: Real>(&self, tape: &mut Tape<T>, rows: Range<usize>) -> Option<Var> {
        let first = self.rows.first()?;
        let k = first.len();
        let data: Vec<f64> = rows.clone().flat_map(|r| self.rows[r].iter().copied()).collect();
        Some(tape.constant_f64(rows.len(), k, &data))
    }
}

/// Output of one recorded step.
pub struct StepOut {
    pub state: Vec<Var>,
    /// `[b,1]` per-row loss of this step.
    pub loss: Option<Var>,
    /// Values that must stay away from zero for the loss to be smooth
    /// (contact depths); only inspected, never differentiated.
    pub guards: Option<Var>,
}

/// A differentiable rollout problem. Methods record onto the given tape
/// for the batch rows `rows`; parameters arrive as tensors with
/// [`Problem::param_shapes`].
pub trait Problem: Sync {
    fn name(&self) -> &str;
    fn param_shapes(&self) -> Vec<Shape>;
    fn initial_params(&self, seed: u64) -> Vec<f64>;
    fn batch(&self) -> usize;
    fn steps(&self) -> usize;

    fn sample_episode(&self, _rng: &mut ChaCha8Rng) -> Episode {
        Episode::default()
    }

    fn initial_state<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        rows: Range<usize>,
        episode: &Episode,
    ) -> Result<Vec<Var>>;

    fn step<T: Real>(
        &self,
        tape: &mut Tape<T>,
        t: usize,
        state: &[Var],
        params: &[Var],
        rows: Range<usize>,
        episode: &Episode,
    ) -> Result<StepOut>;

    /// `[b,1]` per-row terminal loss.
    fn terminal<T: Real>(
        &self,
        _tape: &mut Tape<T>,
        _state: &[Var],
        _rows: Range<usize>,
        _episode: &Episode,
    ) -> Result<Option<Var>> {
        Ok(None)
    }

    /// Names of the state tensors, for diagnostics.
    fn state_labels(&self) -> Vec<String>;

    /// Whether an evaluation meets the task's success thresholds; `None`
    /// for tasks without thresholds.
    fn success(&self, _eval: &Evaluation) -> Option<bool> {
        None
    }

    fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.numel()).sum()
    }
}

/// Result of one rollout over the full batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: Option<Vec<f64>>,
    /// Batch-mean loss per step.
    pub step_losses: Vec<f64>,
    /// Final state tensors, rows in batch order.
    pub final_state: Vec<Vec<f64>>,
    /// Smallest `|guard|` seen during the rollout (∞ without guards).
    pub min_guard: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutOptions {
    /// Per-step adjoint decay; 1 gives the exact gradient.
    pub alpha: f64,
    pub gradient: bool,
}

/// Thread pool for batch chunks; one worker runs inline.
pub struct Workers {
    pool: Option<rayon::ThreadPool>,
    count: usize,
}

impl Workers {
    pub fn new(count: usize) -> Self {
        let count = count.max(1);
        let pool = (count > 1).then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(count)
                .build()
                .expect("thread pool")
        });
        Self { pool, count }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    fn map<R: Send>(&self, n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
        match &self.pool {
            Some(p) => p.install(|| (0..n).into_par_iter().map(&f).collect()),
            None => (0..n).map(f).collect(),
        }
    }
}

struct ChunkResult {
    loss: f64,
    grad: Option<Vec<f64>>,
    step_losses: Vec<f64>,
    final_state: Vec<Vec<f64>>,
    min_guard: f64,
}

/// Runs the rollout (and optionally its BPTT gradient) over the whole batch.
pub fn evaluate<T: Real, P: Problem>(
    problem: &P,
    params: &[f64],
    episode: &Episode,
    opts: RolloutOptions,
    workers: &Workers,
) -> Result<Evaluation> {
    if params.len() != problem.param_count() {
        return Err(Error::Contract(format!(
            "expected {} parameters, got {}",
            problem.param_count(),
            params.len()
        )));
    }
    let batch = problem.batch();
    let chunks = batch.div_ceil(CHUNK);
    let results = workers.map(chunks, |c| {
        let rows = c * CHUNK..((c + 1) * CHUNK).min(batch);
        run_chunk::<T, P>(problem, params, episode, rows, opts)
    });
    let mut out = Evaluation {
        loss: 0.0,
        grad: opts.gradient.then(|| vec![0.0; params.len()]),
        step_losses: vec![0.0; problem.steps()],
        final_state: Vec::new(),
        min_guard: f64::INFINITY,
    };
    for r in results {
        let r = r?;
        out.loss += r.loss;
        if let (Some(g), Some(rg)) = (&mut out.grad, &r.grad) {
            for (a, b) in g.iter_mut().zip(rg) {
                *a += b;
            }
        }
        for (a, b) in out.step_losses.iter_mut().zip(&r.step_losses) {
            *a += b;
        }
        if out.final_state.is_empty() {
            out.final_state = r.final_state;
        } else {
            for (a, b) in out.final_state.iter_mut().zip(r.final_state) {
                a.extend(b);
            }
        }
        out.min_guard = out.min_guard.min(r.min_guard);
    }
    Ok(out)
}

fn values<T: Real>(tape: &Tape<T>, vars: &[Var]) -> Vec<(Shape, Vec<T>)> {
    vars.iter().map(|&v| (tape.shape(v), tape.value(v).to_vec())).collect()
}

fn put<T: Real>(tape: &mut Tape<T>, state: &[(Shape, Vec<T>)], leaves: bool) -> Vec<Var> {
    state
        .iter()
        .map(|(s, d)| {
            if leaves {
                tape.leaf_slice(s.rows, s.cols, d)
            } else {
                tape.constant(Tensor::new(*s, d.clone()).unwrap())
            }
        })
        .collect()
}

fn sum_f64<T: Real>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).iter().map(|x| x.to_f64().unwrap()).sum()
}

fn run_chunk<T: Real, P: Problem>(
    problem: &P,
    params: &[f64],
    episode: &Episode,
    rows: Range<usize>,
    opts: RolloutOptions,
) -> Result<ChunkResult> {
    let shapes = problem.param_shapes();
    let labels = problem.state_labels();
    let n = problem.steps();
    let batch = problem.batch() as f64;
    let step_weight = if n > 0 { 1.0 / (batch * n as f64) } else { 0.0 };
    let term_weight = 1.0 / batch;
    let mut tape = Tape::<T>::new();

    // Forward pass, keeping every state as a checkpoint when differentiating.
    let p = record_params(&mut tape, params, &shapes, false);
    let s0 = problem.initial_state(&mut tape, &p, rows.clone(), episode)?;
    let mut state = values(&tape, &s0);
    let mut checkpoints = Vec::new();
    let mut step_losses = vec![0.0; n];
    let mut loss = 0.0;
    let mut min_guard = f64::INFINITY;
    for t in 0..n {
        tape.clear();
        let s = put(&mut tape, &state, false);
        let p = record_params(&mut tape, params, &shapes, false);
        let out = problem.step(&mut tape, t, &s, &p, rows.clone(), episode)?;
        if let Some(l) = out.loss {
            let v = sum_f64(&tape, l);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    step: t,
                    channel: "loss".into(),
                });
            }
            step_losses[t] = v / batch;
            loss += v * step_weight;
        }
        if let Some(g) = out.guards {
            for x in tape.value(g) {
                min_guard = min_guard.min(x.to_f64().unwrap().abs());
            }
        }
        let next = values(&tape, &out.state);
        for (k, (_, d)) in next.iter().enumerate() {
            if d.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    step: t,
                    channel: labels.get(k).cloned().unwrap_or_else(|| format!("state[{k}]")),
                });
            }
        }
        if opts.gradient {
            checkpoints.push(std::mem::replace(&mut state, next));
        } else {
            state = next;
        }
    }
    tape.clear();
    let s = put(&mut tape, &state, opts.gradient);
    let term = problem.terminal(&mut tape, &s, rows.clone(), episode)?;
    if let Some(l) = term {
        let v = sum_f64(&tape, l);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                step: n,
                channel: "terminal loss".into(),
            });
        }
        loss += v * term_weight;
    }
    let final_state = state
        .iter()
        .map(|(_, d)| d.iter().map(|x| x.to_f64().unwrap()).collect())
        .collect();
    if !opts.gradient {
        return Ok(ChunkResult {
            loss,
            grad: None,
            step_losses,
            final_state,
            min_guard,
        });
    }

    // Backward pass.
    let mut grad = vec![0.0; params.len()];
    let mut adj: Vec<Vec<T>> = match term {
        Some(l) => {
            let seed = vec![T::lit(term_weight); tape.shape(l).numel()];
            tape.backward_seeded(&[(l, &seed)])?;
            s.iter().map(|&v| tape.adjoint(v).to_vec()).collect()
        }
        None => state.iter().map(|(_, d)| vec![T::zero(); d.len()]).collect(),
    };
    let accumulate = |tape: &Tape<T>, p: &[Var], grad: &mut [f64]| {
        let mut off = 0;
        for &v in p {
            for (g, a) in grad[off..].iter_mut().zip(tape.adjoint(v)) {
                *g += a.to_f64().unwrap();
            }
            off += tape.shape(v).numel();
        }
    };
    for t in (0..n).rev() {
        tape.clear();
        let s = put(&mut tape, &checkpoints[t], true);
        let p = record_params(&mut tape, params, &shapes, true);
        let out = problem.step(&mut tape, t, &s, &p, rows.clone(), episode)?;
        let loss_seed;
        let mut seeds: Vec<(Var, &[T])> = out.state.iter().zip(&adj).map(|(&v, a)| (v, a.as_slice())).collect();
        if let Some(l) = out.loss {
            loss_seed = vec![T::lit(step_weight); tape.shape(l).numel()];
            seeds.push((l, &loss_seed));
        }
        tape.backward_seeded(&seeds)?;
        accumulate(&tape, &p, &mut grad);
        let decay = if t > 0 { T::lit(opts.alpha) } else { T::one() };
        adj = s
            .iter()
            .map(|&v| tape.adjoint(v).iter().map(|&a| a * decay).collect())
            .collect();
    }
    tape.clear();
    let p = record_params(&mut tape, params, &shapes, true);
    let s0 = problem.initial_state(&mut tape, &p, rows, episode)?;
    let seeds: Vec<(Var, &[T])> = s0.iter().zip(&adj).map(|(&v, a)| (v, a.as_slice())).collect();
    tape.backward_seeded(&seeds)?;
    accumulate(&tape, &p, &mut grad);

    Ok(ChunkResult {
        loss,
        grad: Some(grad),
        step_losses,
        final_state,
        min_guard,
    })
}
