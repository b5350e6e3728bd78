//! Projected Gauss-Seidel with a fixed sweep count, fully recorded.

use crate::dynamics::{world_inertia_inverse, BodyVars};
use crate::model::CompiledModel;
use crate::tape::{Axis, Cmp, Real, Tape, TraceError, Var};

use super::rows::{Limits, Row};

type Res<T = Var> = Result<T, TraceError>;

/// Rows whose effective mass `J·M⁻¹·Jᵀ + cfm` falls below this are skipped.
pub const MIN_DIAGONAL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct Solution {
    /// Accumulated impulse per row, `[B,1]`.
    pub impulses: Vec<Var>,
    /// Post-solve `(v, ω)` per body, `[B,6]`.
    pub velocities: Vec<Var>,
}

/// Per-body `M⁻¹` application: inverse mass and `[B,9]` world inverse inertia.
struct InverseMass {
    inv_mass: f64,
    inv_inertia: Option<Var>,
    /// Spherical inertia reduces to a scalar.
    inv_inertia_scalar: Option<f64>,
}

fn inverse_masses<T: Real>(tape: &mut Tape<T>, model: &CompiledModel, bodies: &[BodyVars]) -> Res<Vec<InverseMass>> {
    let mut out = Vec::with_capacity(bodies.len());
    for (i, b) in bodies.iter().enumerate() {
        let ib = model.inv_inertia[i];
        let spherical =
            ib[0] == ib[4] && ib[4] == ib[8] && [ib[1], ib[2], ib[3], ib[5], ib[6], ib[7]].iter().all(|&x| x == 0.0);
        let (inv_inertia, inv_inertia_scalar) = if spherical {
            (None, Some(ib[0]))
        } else {
            let c = tape.constant_f64(1, 9, &ib);
            (Some(world_inertia_inverse(tape, b.r, c)?), None)
        };
        out.push(InverseMass {
            inv_mass: model.inv_mass[i],
            inv_inertia,
            inv_inertia_scalar,
        });
    }
    Ok(out)
}

fn apply_inverse_mass<T: Real>(tape: &mut Tape<T>, m: &InverseMass, jac: Var) -> Res {
    let lin = tape.slice(jac, 0, 3)?;
    let ang = tape.slice(jac, 3, 3)?;
    let lin = tape.scale(lin, m.inv_mass)?;
    let ang = match (m.inv_inertia, m.inv_inertia_scalar) {
        (Some(i), _) => tape.bmv3(i, ang, false)?,
        (None, Some(s)) => tape.scale(ang, s)?,
        (None, None) => unreachable!(),
    };
    tape.concat(&[lin, ang])
}

/// Solves the rows by `iterations` Gauss-Seidel sweeps in row order:
/// `Δλ = (b − J·v)/(J·M⁻¹·Jᵀ + cfm)`, `λ ← clamp(λ + Δλ, lo, hi)`,
/// `v ← v + M⁻¹·Jᵀ·Δλ` with the clamped `Δλ`. Friction bounds follow the
/// current impulse of their normal row.
pub fn pgs_solve<T: Real>(
    tape: &mut Tape<T>,
    model: &CompiledModel,
    bodies: &[BodyVars],
    rows: &[Row],
    vel_pred: &[Var],
    iterations: usize,
) -> Res<Solution> {
    let batch = tape.shape(bodies[0].x).rows;
    let minv = inverse_masses(tape, model, bodies)?;

    // Per row: M⁻¹Jᵀ for each side and the inverse effective mass.
    let mut mj: Vec<[Option<Var>; 2]> = Vec::with_capacity(rows.len());
    let mut inv_d: Vec<Var> = Vec::with_capacity(rows.len());
    for row in rows {
        let mut pair = [None, None];
        let mut d: Option<Var> = None;
        for (k, s) in row.sides.iter().enumerate() {
            let Some(s) = s else { continue };
            let m = apply_inverse_mass(tape, &minv[s.body], s.jac)?;
            let p = tape.mul(s.jac, m)?;
            let dd = tape.sum(p, Axis::Cols);
            d = Some(match d {
                Some(a) => tape.add(a, dd)?,
                None => dd,
            });
            pair[k] = Some(m);
        }
        let d = match d {
            Some(d) => tape.add_scalar(d, row.cfm)?,
            None => tape.full(1, 1, row.cfm),
        };
        let ok = tape.indicator(d, Cmp::Ge, MIN_DIAGONAL);
        let floor = tape.full(1, 1, MIN_DIAGONAL);
        let safe = tape.max(d, floor)?;
        let one = tape.full(1, 1, 1.0);
        let inv = tape.div(one, safe)?;
        let zero = tape.full(1, 1, 0.0);
        let mut inv = tape.where_mask(ok, inv, zero)?;
        if let Some(mask) = row.mask {
            inv = tape.mul(inv, mask)?;
        }
        mj.push(pair);
        inv_d.push(inv);
    }

    let mut vel = vel_pred.to_vec();
    let zero = tape.full(batch, 1, 0.0);
    let mut lambda = vec![zero; rows.len()];
    for _ in 0..iterations {
        for (i, row) in rows.iter().enumerate() {
            let mut jv: Option<Var> = None;
            for s in row.sides.iter().flatten() {
                let p = tape.mul(s.jac, vel[s.body])?;
                let d = tape.sum(p, Axis::Cols);
                jv = Some(match jv {
                    Some(a) => tape.add(a, d)?,
                    None => d,
                });
            }
            let Some(jv) = jv else { continue };
            let r = tape.sub(row.bias, jv)?;
            let dl = tape.mul(r, inv_d[i])?;
            let cand = tape.add(lambda[i], dl)?;
            let next = match row.limits {
                Limits::Free => cand,
                Limits::NonNegative => tape.relu(cand),
                Limits::Symmetric(h) => tape.clamp(cand, -h, h)?,
                Limits::Friction { parent, coefficient } => {
                    let hi = tape.scale(lambda[parent], coefficient)?;
                    let lo = tape.neg(hi);
                    let c = tape.max(cand, lo)?;
                    tape.min(c, hi)?
                }
            };
            let delta = tape.sub(next, lambda[i])?;
            for (k, s) in row.sides.iter().enumerate() {
                let Some(s) = s else { continue };
                let dv = tape.mul(mj[i][k].unwrap(), delta)?;
                vel[s.body] = tape.add(vel[s.body], dv)?;
            }
            lambda[i] = next;
        }
    }
    Ok(Solution {
        impulses: lambda,
        velocities: vel,
    })
}
