//! Assembly of the scalar constraint rows solved by [`super::pgs_solve`].

use crate::dynamics::{BodyVars, SimConfig};
use crate::model::{CompiledModel, JointFrame, MotorFrame};
use crate::tape::{Axis, Cmp, Real, Tape, TraceError, Var};

use super::contact::{tangent_frame, Contact};

type Res<T = Var> = Result<T, TraceError>;

/// Impulse bounds of a row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Limits {
    /// Equality constraint, `(-∞, ∞)`.
    Free,
    /// `[0, ∞)`.
    NonNegative,
    /// `[-h, h]`.
    Symmetric(f64),
    /// `[-μλ_p, μλ_p]` where `λ_p` is the current impulse of row `parent`.
    Friction { parent: usize, coefficient: f64 },
}

/// One body's part of a row Jacobian: `[B,6]` (or `[1,6]`) over `(v, ω)`.
#[derive(Clone, Copy, Debug)]
pub struct Side {
    pub body: usize,
    pub jac: Var,
}

/// One scalar row `J·v = bias` (within `limits`) of the velocity LCP.
#[derive(Clone, Debug)]
pub struct Row {
    pub sides: [Option<Side>; 2],
    /// `[B,1]` target for `J·v`.
    pub bias: Var,
    pub limits: Limits,
    /// `[B,1]` constant; rows where it is 0 are inert.
    pub mask: Option<Var>,
    pub cfm: f64,
}

/// World-frame joint geometry at the current state.
pub struct JointKinematics {
    /// `R_p e_k` for the parent's joint frame.
    pub parent_axes: [Var; 3],
    /// `R_c e_k` for the child's joint frame.
    pub child_axes: [Var; 3],
}

pub fn joint_kinematics<T: Real>(tape: &mut Tape<T>, joint: &JointFrame, bodies: &[BodyVars]) -> Res<JointKinematics> {
    let mut world = |r: Var, local: &[[f64; 3]; 3]| -> Res<[Var; 3]> {
        let mut out = [r; 3];
        for (k, e) in local.iter().enumerate() {
            let c = tape.constant_f64(1, 3, e);
            out[k] = tape.bmv3(r, c, false)?;
        }
        Ok(out)
    };
    Ok(JointKinematics {
        parent_axes: world(bodies[joint.parent].r, &joint.frame_parent)?,
        child_axes: world(bodies[joint.child].r, &joint.frame_child)?,
    })
}

impl JointKinematics {
    /// World direction of rotation axis `axis` (0: carried by the parent,
    /// 1: carried by the child).
    pub fn axis(&self, axis: usize) -> Var {
        if axis == 0 {
            self.parent_axes[0]
        } else {
            self.child_axes[1]
        }
    }

    /// Encoder angle about `axis`, zero at the build pose.
    pub fn angle<T: Real>(&self, tape: &mut Tape<T>, axis: usize) -> Res {
        let (p, c) = (&self.parent_axes, &self.child_axes);
        let (y, x) = if axis == 0 {
            (tape.dot(p[2], c[1])?, tape.dot(p[1], c[1])?)
        } else {
            (tape.dot(p[0], c[2])?, tape.dot(p[0], c[0])?)
        };
        tape.atan2(y, x)
    }

    /// Relative angular velocity of child with respect to parent about `axis`.
    pub fn rate<T: Real>(&self, tape: &mut Tape<T>, axis: usize, joint: &JointFrame, bodies: &[BodyVars]) -> Res {
        let rel = tape.sub(bodies[joint.child].w, bodies[joint.parent].w)?;
        tape.dot(self.axis(axis), rel)
    }
}

/// Desired joint velocity of a servo: `clamp(K·(target − θ), ±v_max)`.
pub fn servo_velocity(gain: f64, angle: f64, target: f64, max_velocity: f64) -> f64 {
    (gain * (target - angle)).clamp(-max_velocity, max_velocity)
}

/// Velocity-motor row driving the joint rate about `axis` toward the servo
/// velocity, with impulse bounded by `max_torque·dt`. `gain` is `[1,1]` or
/// `[B,1]` so it can be differentiated.
#[allow(clippy::too_many_arguments)]
pub fn servo_row<T: Real>(
    tape: &mut Tape<T>,
    model: &CompiledModel,
    motor: &MotorFrame,
    axis_world: Var,
    angle: Var,
    target: Var,
    gain: Var,
    cfg: &SimConfig,
) -> Res<Row> {
    let joint = &model.joints[motor.joint];
    // A target outside the joint's range would push the joint into its limit
    // forever; one outside (−π, π] could never be reached by the encoder.
    let target = match &joint.limits {
        Some(l) => tape.clamp(target, l[motor.axis][0], l[motor.axis][1])?,
        None => target,
    };
    let err = tape.sub(target, angle)?;
    let desired = tape.mul(gain, err)?;
    let desired = tape.clamp(desired, -motor.max_velocity, motor.max_velocity)?;
    let sides = angular_sides(tape, model, joint, axis_world)?;
    Ok(Row {
        sides,
        bias: desired,
        limits: Limits::Symmetric(motor.max_torque * cfg.dt),
        mask: None,
        cfm: cfg.cfm,
    })
}

/// Sides for a row acting on `axis·(ω_child − ω_parent)`.
fn angular_sides<T: Real>(
    tape: &mut Tape<T>,
    model: &CompiledModel,
    joint: &JointFrame,
    axis: Var,
) -> Res<[Option<Side>; 2]> {
    let rows = tape.shape(axis).rows;
    let zero = tape.full(rows, 3, 0.0);
    let neg = tape.neg(axis);
    let jp = tape.concat(&[zero, neg])?;
    let jc = tape.concat(&[zero, axis])?;
    Ok([side(model, joint.parent, jp), side(model, joint.child, jc)])
}

fn side(model: &CompiledModel, body: usize, jac: Var) -> Option<Side> {
    (!model.model.bodies[body].fixed).then_some(Side { body, jac })
}

/// Linear part `d`, angular part `lever × d`.
fn point_jacobian<T: Real>(tape: &mut Tape<T>, dir: Var, lever: Var, negate: bool) -> Res {
    let ang = tape.cross3(lever, dir)?;
    let rows = tape.shape(ang).rows;
    let lin = if tape.shape(dir).rows == rows {
        dir
    } else {
        let z = tape.full(rows, 3, 0.0);
        tape.add(z, dir)?
    };
    let j = tape.concat(&[lin, ang])?;
    Ok(if negate { tape.neg(j) } else { j })
}

fn dot_velocity<T: Real>(tape: &mut Tape<T>, row: &Row, vel: &[Var]) -> Res {
    let mut acc: Option<Var> = None;
    for s in row.sides.iter().flatten() {
        let p = tape.mul(s.jac, vel[s.body])?;
        let d = tape.sum(p, Axis::Cols);
        acc = Some(match acc {
            Some(a) => tape.add(a, d)?,
            None => d,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.full(1, 1, 0.0)))
}

/// Inputs for the servo rows of one step.
#[derive(Clone, Copy, Debug)]
pub struct MotorInputs {
    /// `[B, motors]` target angles, rad.
    pub targets: Var,
    /// `[1, motors]` gains, s⁻¹.
    pub gains: Var,
}

/// Rows in solve order: joints (3 positional + angular locks each), joint
/// limits, motors, then per contact one normal and two friction rows.
#[allow(clippy::too_many_arguments)]
pub fn assemble_rows<T: Real>(
    tape: &mut Tape<T>,
    model: &CompiledModel,
    cfg: &SimConfig,
    bodies: &[BodyVars],
    vel_pred: &[Var],
    contacts: &[Contact],
    kin: &[JointKinematics],
    motors: Option<MotorInputs>,
) -> Res<Vec<Row>> {
    let batch = tape.shape(bodies[0].x).rows;
    let k = cfg.baumgarte / cfg.dt;
    let mut rows = Vec::new();
    let basis: Vec<Var> = (0..3)
        .map(|i| {
            let mut e = [0.0; 3];
            e[i] = 1.0;
            tape.constant_f64(batch, 3, &e.repeat(batch))
        })
        .collect();

    for (joint, jk) in model.joints.iter().zip(kin) {
        let (p, c) = (&bodies[joint.parent], &bodies[joint.child]);
        let ap = tape.constant_f64(1, 3, &joint.anchor_parent);
        let ac = tape.constant_f64(1, 3, &joint.anchor_child);
        let lp = tape.bmv3(p.r, ap, false)?;
        let lc = tape.bmv3(c.r, ac, false)?;
        let wp = tape.add(p.x, lp)?;
        let wc = tape.add(c.x, lc)?;
        let err = tape.sub(wc, wp)?;
        for (i, &e) in basis.iter().enumerate() {
            let jp = point_jacobian(tape, e, lp, true)?;
            let jc = point_jacobian(tape, e, lc, false)?;
            let ei = tape.col(err, i)?;
            let bias = tape.scale(ei, -k)?;
            rows.push(Row {
                sides: [side(model, joint.parent, jp), side(model, joint.child, jc)],
                bias,
                limits: Limits::Free,
                mask: None,
                cfm: cfg.cfm,
            });
        }
        // Angular locks: the parent's e1 stays orthogonal to the child's
        // e2 (and e3 for hinges).
        let u = jk.parent_axes[0];
        let locked: &[usize] = if joint.dof == 1 { &[1, 2] } else { &[1] };
        for &ax in locked {
            let w = jk.child_axes[ax];
            let c_err = tape.dot(u, w)?;
            let n = tape.cross3(u, w)?;
            let zero = tape.full(tape.shape(n).rows, 3, 0.0);
            let jp = tape.concat(&[zero, n])?;
            let nn = tape.neg(n);
            let jc = tape.concat(&[zero, nn])?;
            let bias = tape.scale(c_err, -k)?;
            rows.push(Row {
                sides: [side(model, joint.parent, jp), side(model, joint.child, jc)],
                bias,
                limits: Limits::Free,
                mask: None,
                cfm: cfg.cfm,
            });
        }
    }

    for (joint, jk) in model.joints.iter().zip(kin) {
        let Some(limits) = &joint.limits else { continue };
        for (ax, &[lo, hi]) in limits.iter().enumerate() {
            let theta = jk.angle(tape, ax)?;
            let axis = jk.axis(ax);
            // Lower: θ − lo ≥ 0, upper: hi − θ ≥ 0; active only when violated.
            for (bound, sign) in [(lo, 1.0), (hi, -1.0)] {
                let gap = tape.add_scalar(theta, -bound)?;
                let gap = tape.scale(gap, sign)?;
                let mask = tape.indicator(gap, Cmp::Lt, 0.0);
                let violation = tape.neg(gap);
                let violation = tape.relu(violation);
                let bias = tape.scale(violation, k)?;
                let dir = tape.scale(axis, sign)?;
                rows.push(Row {
                    sides: angular_sides(tape, model, joint, dir)?,
                    bias,
                    limits: Limits::NonNegative,
                    mask: Some(mask),
                    cfm: cfg.cfm,
                });
            }
        }
    }

    if let Some(inputs) = motors {
        for (m, motor) in model.motors.iter().enumerate() {
            let jk = &kin[motor.joint];
            let theta = jk.angle(tape, motor.axis)?;
            let target = tape.col(inputs.targets, m)?;
            let gain = tape.col(inputs.gains, m)?;
            let row = servo_row(tape, model, motor, jk.axis(motor.axis), theta, target, gain, cfg)?;
            rows.push(row);
        }
    }

    let ground_t = [
        tape.constant_f64(1, 3, &[0.0, -1.0, 0.0]),
        tape.constant_f64(1, 3, &[1.0, 0.0, 0.0]),
    ];
    for c in contacts {
        let movable_a = c.a.filter(|&a| !model.model.bodies[a].fixed);
        let movable_b = !model.model.bodies[c.b].fixed;
        let jac = |tape: &mut Tape<T>, dir: Var| -> Res<[Option<Side>; 2]> {
            let sa = match (movable_a, c.lever_a) {
                (Some(a), Some(l)) => Some(Side {
                    body: a,
                    jac: point_jacobian(tape, dir, l, true)?,
                }),
                _ => None,
            };
            let sb = if movable_b {
                Some(Side {
                    body: c.b,
                    jac: point_jacobian(tape, dir, c.lever_b, false)?,
                })
            } else {
                None
            };
            Ok([sa, sb])
        };
        let sides = jac(tape, c.normal)?;
        let mut normal = Row {
            sides,
            bias: c.depth,
            limits: Limits::NonNegative,
            mask: Some(c.mask),
            cfm: cfg.cfm,
        };
        // Newton restitution on the pre-solve approach speed plus Baumgarte
        // correction of penetration beyond the slop.
        let vn = dot_velocity(tape, &normal, vel_pred)?;
        let approach = tape.neg(vn);
        let approach = tape.add_scalar(approach, -cfg.restitution_threshold)?;
        let bounce = tape.relu(approach);
        let bounce = tape.scale(bounce, c.restitution)?;
        let excess = tape.add_scalar(c.depth, -cfg.slop)?;
        let excess = tape.relu(excess);
        let push = tape.scale(excess, k)?;
        normal.bias = tape.add(bounce, push)?;
        let parent = rows.len();
        rows.push(normal);

        let tangents = if c.a.is_none() {
            ground_t
        } else {
            let (t1, t2) = tangent_frame(tape, c.normal)?;
            [t1, t2]
        };
        for t in tangents {
            let sides = jac(tape, t)?;
            let zero = tape.full(1, 1, 0.0);
            rows.push(Row {
                sides,
                bias: zero,
                limits: Limits::Friction {
                    parent,
                    coefficient: c.friction,
                },
                mask: Some(c.mask),
                cfm: cfg.cfm,
            });
        }
    }
    Ok(rows)
}
