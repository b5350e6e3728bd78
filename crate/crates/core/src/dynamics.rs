//! Rigid-body state, velocity prediction and semi-implicit Euler
//! integration with rotation-matrix renormalization.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::model::{flat, CompiledModel, Vec3};
use crate::tape::{Real, Tape, TraceError, Var};

type Res<T = Var> = Result<T, TraceError>;

/// Engine constants shared by every step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub gravity: Vec3,
    /// Projected Gauss-Seidel sweeps per step.
    pub iterations: usize,
    /// Fraction of positional error fed back into velocity biases.
    pub baumgarte: f64,
    /// Penetration tolerated without positional correction, m.
    pub slop: f64,
    /// Diagonal softening added to every constraint row.
    pub cfm: f64,
    /// Impact speeds below this produce no bounce, m/s.
    pub restitution_threshold: f64,
    /// Renormalization passes applied to each rotation after integration.
    pub renorm_iterations: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            gravity: [0.0, 0.0, -9.81],
            iterations: 16,
            baumgarte: 0.2,
            slop: 1e-3,
            cfm: 1e-3,
            restitution_threshold: 0.1,
            renorm_iterations: 4,
        }
    }
}

/// States of one body across a batch, each field row-major `[batch, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyBatch {
    pub x: Vec<f64>,
    pub r: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
}

/// Pose and twist of one body.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BodyState {
    pub x: Vec3,
    pub r: [f64; 9],
    pub v: Vec3,
    pub w: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub time: f64,
    pub batch: usize,
    pub bodies: Vec<BodyBatch>,
}

impl WorldState {
    /// Every batch element at the model's build pose.
    pub fn at_build_pose(model: &CompiledModel, batch: usize) -> Self {
        let bodies = model
            .model
            .bodies
            .iter()
            .map(|b| {
                let r = flat(&crate::model::mat(&b.rotation));
                BodyBatch {
                    x: b.position.repeat(batch),
                    r: r.repeat(batch),
                    v: b.velocity.repeat(batch),
                    w: b.angular_velocity.repeat(batch),
                }
            })
            .collect();
        Self {
            time: 0.0,
            batch,
            bodies,
        }
    }

    pub fn body(&self, body: usize, row: usize) -> BodyState {
        let b = &self.bodies[body];
        BodyState {
            x: b.x[row * 3..row * 3 + 3].try_into().unwrap(),
            r: b.r[row * 9..row * 9 + 9].try_into().unwrap(),
            v: b.v[row * 3..row * 3 + 3].try_into().unwrap(),
            w: b.w[row * 3..row * 3 + 3].try_into().unwrap(),
        }
    }

    pub fn set_body(&mut self, body: usize, row: usize, s: &BodyState) {
        let b = &mut self.bodies[body];
        b.x[row * 3..row * 3 + 3].copy_from_slice(&s.x);
        b.r[row * 9..row * 9 + 9].copy_from_slice(&s.r);
        b.v[row * 3..row * 3 + 3].copy_from_slice(&s.v);
        b.w[row * 3..row * 3 + 3].copy_from_slice(&s.w);
    }

    /// Rows `start..start + len` of the batch.
    pub fn rows(&self, start: usize, len: usize) -> Self {
        let take = |v: &[f64], k: usize| v[start * k..(start + len) * k].to_vec();
        Self {
            time: self.time,
            batch: len,
            bodies: self
                .bodies
                .iter()
                .map(|b| BodyBatch {
                    x: take(&b.x, 3),
                    r: take(&b.r, 9),
                    v: take(&b.v, 3),
                    w: take(&b.w, 3),
                })
                .collect(),
        }
    }

    /// Puts the state on a tape, as differentiable leaves or constants.
    pub fn record<T: Real>(&self, tape: &mut Tape<T>, leaves: bool) -> Vec<BodyVars> {
        let b = self.batch;
        let mut put = |data: &[f64], cols: usize| {
            let conv: Vec<T> = data.iter().map(|&x| T::lit(x)).collect();
            let t = crate::tape::Tensor::new(crate::tape::Shape::new(b, cols), conv).unwrap();
            if leaves {
                tape.leaf(t)
            } else {
                tape.constant(t)
            }
        };
        self.bodies
            .iter()
            .map(|s| BodyVars {
                x: put(&s.x, 3),
                r: put(&s.r, 9),
                v: put(&s.v, 3),
                w: put(&s.w, 3),
            })
            .collect()
    }

    /// Reads traced body states back into plain values.
    pub fn from_tape<T: Real>(tape: &Tape<T>, vars: &[BodyVars], time: f64) -> Self {
        let get = |v: Var| tape.value(v).iter().map(|x| x.to_f64().unwrap()).collect();
        let batch = tape.shape(vars[0].x).rows;
        Self {
            time,
            batch,
            bodies: vars
                .iter()
                .map(|b| BodyBatch {
                    x: get(b.x),
                    r: get(b.r),
                    v: get(b.v),
                    w: get(b.w),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bodies
            .iter()
            .all(|b| [&b.x, &b.r, &b.v, &b.w].iter().all(|v| v.iter().all(|x| x.is_finite())))
    }
}

/// Traced state of one body: position `[B,3]`, rotation `[B,9]`, linear
/// and angular velocity `[B,3]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BodyVars {
    pub x: Var,
    pub r: Var,
    pub v: Var,
    pub w: Var,
}

/// One renormalization pass `A' = (3A - A·(AᵀA)) / 2` on plain matrices.
pub fn renormalize_rotation(a: &Matrix3<f64>) -> Matrix3<f64> {
    (3.0 * a - a * (a.transpose() * a)) / 2.0
}

/// Traced [`renormalize_rotation`] on `[B,9]` matrices.
pub fn renormalize<T: Real>(tape: &mut Tape<T>, a: Var) -> Res {
    let ata = tape.bmm3(a, a, true, false)?;
    let p = tape.bmm3(a, ata, false, false)?;
    let a3 = tape.scale(a, 1.5)?;
    let p2 = tape.scale(p, 0.5)?;
    tape.sub(a3, p2)
}

/// Skew-symmetric cross-product matrices `[ω]ₓ` for `[B,3]` vectors.
pub fn skew<T: Real>(tape: &mut Tape<T>, w: Var) -> Res {
    let rows = tape.shape(w).rows;
    let zero = tape.full(rows, 1, 0.0);
    let (x, y, z) = (tape.col(w, 0)?, tape.col(w, 1)?, tape.col(w, 2)?);
    let (nx, ny, nz) = (tape.neg(x), tape.neg(y), tape.neg(z));
    tape.concat(&[zero, nz, y, z, zero, nx, ny, x, zero])
}

/// `R · I_body⁻¹ · Rᵀ` for `[B,9]` rotations and a `[1,9]` body inverse.
pub fn world_inertia_inverse<T: Real>(tape: &mut Tape<T>, r: Var, inv_body: Var) -> Res {
    let ri = tape.bmm3(r, inv_body, false, false)?;
    tape.bmm3(ri, r, false, true)
}

/// Velocities after gravity and the gyroscopic term, before constraints:
/// `v + dt·g` and `ω − dt·I_w⁻¹(ω × I_w ω)`.
pub fn predict_velocities<T: Real>(
    tape: &mut Tape<T>,
    model: &CompiledModel,
    body: usize,
    s: &BodyVars,
    cfg: &SimConfig,
) -> Res<(Var, Var)> {
    let def = &model.model.bodies[body];
    if def.fixed {
        return Ok((s.v, s.w));
    }
    let dv = tape.constant_f64(1, 3, &cfg.gravity.map(|g| g * cfg.dt));
    let v = tape.add(s.v, dv)?;
    let i = def.inertia;
    let spherical = i[0][0] == i[1][1]
        && i[1][1] == i[2][2]
        && [i[0][1], i[0][2], i[1][0], i[1][2], i[2][0], i[2][1]]
            .iter()
            .all(|&x| x == 0.0);
    if spherical {
        // ω × (cω) vanishes identically.
        return Ok((v, s.w));
    }
    let ib = tape.constant_f64(1, 9, &flat(&crate::model::mat(&i)));
    let ib_inv = tape.constant_f64(1, 9, &model.inv_inertia[body]);
    let ri = tape.bmm3(s.r, ib, false, false)?;
    let iw = tape.bmm3(ri, s.r, false, true)?;
    let iw_inv = world_inertia_inverse(tape, s.r, ib_inv)?;
    let l = tape.bmv3(iw, s.w, false)?;
    let gyro = tape.cross3(s.w, l)?;
    let dw = tape.bmv3(iw_inv, gyro, false)?;
    let dw = tape.scale(dw, cfg.dt)?;
    let w = tape.sub(s.w, dw)?;
    Ok((v, w))
}

/// Semi-implicit Euler position update with the post-solve velocities:
/// `x' = x + dt·v`, `R' = renorm(R + dt·[ω]ₓR)`.
pub fn integrate<T: Real>(tape: &mut Tape<T>, s: &BodyVars, v: Var, w: Var, cfg: &SimConfig) -> Res<BodyVars> {
    let dx = tape.scale(v, cfg.dt)?;
    let x = tape.add(s.x, dx)?;
    let k = skew(tape, w)?;
    let kr = tape.bmm3(k, s.r, false, false)?;
    let dr = tape.scale(kr, cfg.dt)?;
    let mut r = tape.add(s.r, dr)?;
    for _ in 0..cfg.renorm_iterations {
        r = renormalize(tape, r)?;
    }
    Ok(BodyVars { x, r, v, w })
}

/// Frobenius norm of `RᵀR − I`.
pub fn orthogonality_error(r: &[f64]) -> f64 {
    let m = crate::model::unflat(r);
    (m.transpose() * m - Matrix3::identity()).norm()
}
