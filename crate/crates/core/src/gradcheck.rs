//! Central finite differences as an independent check of tape gradients.

use crate::tape::{Tape, Tensor, TraceError, Var};

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub value: f64,
    pub tape: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `max_i |g_tape − g_fd| / max(1e-12, |g_fd|)`; NaN if any term is NaN.
    pub max_rel_error: f64,
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + step;
            let hi = f(&p);
            p[i] = x[i] - step;
            let lo = f(&p);
            p[i] = x[i];
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        let e = (a - n).abs() / n.abs().max(1e-12);
        if e.is_nan() {
            return f64::NAN;
        }
        worst = worst.max(e);
    }
    worst
}

/// `‖a − n‖₂ / max(1e-12, ‖n‖₂)`; NaN if any term is NaN.
pub fn normwise_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum();
    let norm: f64 = numeric.iter().map(|n| n * n).sum();
    diff.sqrt() / norm.sqrt().max(1e-12)
}

/// Compares the tape gradient of a scalar function of a `[1, n]` parameter
/// leaf against central differences of the same function.
pub fn finite_difference_check<F, E>(mut f: F, x: &[f64], step: f64) -> Result<GradCheck, E>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var, E>,
    E: From<TraceError>,
{
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::from_f64(1, x.len(), x));
    let loss = f(&mut tape, p)?;
    let value = tape.item(loss);
    tape.backward(loss)?;
    let analytic = tape.adjoint(p).to_vec();
    let mut failure = None;
    let numeric = numeric_gradient(
        |q| {
            tape.clear();
            let p = tape.constant(Tensor::from_f64(1, q.len(), q));
            match f(&mut tape, p) {
                Ok(l) => tape.item(l),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        x,
        step,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(GradCheck {
        value,
        max_rel_error: max_relative_error(&analytic, &numeric),
        tape: analytic,
        numeric,
    })
}
