//! Extraction of controller inputs from the traced world state.

use std::f64::consts::TAU;

use crate::dynamics::BodyVars;
use crate::error::{Error, Result};
use crate::model::{Candidate, CompiledModel, Sensor};
use crate::solver::joint_kinematics;
use crate::tape::{Cmp, Real, Tape, Var};

/// Per-step inputs that are not part of the body states.
#[derive(Clone, Copy, Debug, Default)]
pub struct SensorContext {
    pub time: f64,
    /// `[B,3]` task target.
    pub target: Option<Var>,
    /// `[B, motors]` targets issued on the previous step.
    pub previous_targets: Option<Var>,
}

/// Number of channels the sensor list produces for a model.
pub fn sensor_width(model: &CompiledModel, sensors: &[Sensor]) -> usize {
    sensors
        .iter()
        .map(|s| match s {
            Sensor::JointAngles | Sensor::JointVelocities | Sensor::PreviousTargets => model.motor_count(),
            Sensor::Orientation { .. } => 9,
            Sensor::AngularVelocity { .. } | Sensor::LinearVelocity { .. } | Sensor::TargetPosition => 3,
            Sensor::Height { .. } | Sensor::TargetDistance { .. } => 1,
            Sensor::ContactMasks => model.ground_candidates(),
            Sensor::Clock { .. } => 2,
        })
        .sum()
}

/// Concatenated `[B, width]` sensor tensor, channels in list order.
pub fn read_sensors<T: Real>(
    tape: &mut Tape<T>,
    model: &CompiledModel,
    sensors: &[Sensor],
    bodies: &[BodyVars],
    ctx: &SensorContext,
) -> Result<Var> {
    let batch = tape.shape(bodies[0].x).rows;
    let body = |name: &str| {
        model
            .model
            .body_index(name)
            .ok_or_else(|| Error::Contract(format!("sensor references unknown body {name}")))
    };
    let mut parts = Vec::with_capacity(sensors.len());
    let needs_joints = sensors
        .iter()
        .any(|s| matches!(s, Sensor::JointAngles | Sensor::JointVelocities));
    let kin = if needs_joints {
        model
            .joints
            .iter()
            .map(|j| joint_kinematics(tape, j, bodies))
            .collect::<std::result::Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    for s in sensors {
        let part = match s {
            Sensor::JointAngles | Sensor::JointVelocities => {
                let mut cols = Vec::with_capacity(model.motor_count());
                for m in &model.motors {
                    let jk = &kin[m.joint];
                    cols.push(if matches!(s, Sensor::JointAngles) {
                        jk.angle(tape, m.axis)?
                    } else {
                        jk.rate(tape, m.axis, &model.joints[m.joint], bodies)?
                    });
                }
                tape.concat(&cols)?
            }
            Sensor::Orientation { body: b } => bodies[body(b)?].r,
            Sensor::AngularVelocity { body: b } => bodies[body(b)?].w,
            Sensor::LinearVelocity { body: b } => bodies[body(b)?].v,
            Sensor::Height { body: b } => tape.col(bodies[body(b)?].x, 2)?,
            Sensor::ContactMasks => {
                let mut cols = Vec::new();
                for c in &model.candidates {
                    if let Candidate::Ground { body, sphere } = *c {
                        let sp = &model.model.bodies[body].spheres[sphere];
                        let o = tape.constant_f64(1, 3, &sp.offset);
                        let ro = tape.bmv3(bodies[body].r, o, false)?;
                        let c = tape.add(bodies[body].x, ro)?;
                        let z = tape.col(c, 2)?;
                        let z = tape.add_scalar(z, -sp.radius)?;
                        cols.push(tape.indicator(z, Cmp::Lt, 0.0));
                    }
                }
                tape.concat(&cols)?
            }
            Sensor::PreviousTargets => ctx
                .previous_targets
                .unwrap_or_else(|| tape.full(batch, model.motor_count(), 0.0)),
            Sensor::TargetDistance { body: b, offset } => {
                let target = ctx
                    .target
                    .ok_or_else(|| Error::Contract("target distance sensor needs a target".into()))?;
                let bv = bodies[body(b)?];
                let o = tape.constant_f64(1, 3, offset);
                let ro = tape.bmv3(bv.r, o, false)?;
                let p = tape.add(bv.x, ro)?;
                let d = tape.sub(p, target)?;
                tape.l2norm(d)
            }
            Sensor::TargetPosition => ctx
                .target
                .ok_or_else(|| Error::Contract("target position sensor needs a target".into()))?,
            Sensor::Clock { frequency } => {
                let phase = TAU * frequency * ctx.time;
                let sc = [phase.sin(), phase.cos()];
                tape.constant_f64(batch, 2, &sc.repeat(batch))
            }
        };
        // Broadcast shared channels (e.g. a [1,k] target) to the batch.
        let part = if tape.shape(part).rows != batch {
            let z = tape.full(batch, tape.shape(part).cols, 0.0);
            tape.add(z, part)?
        } else {
            part
        };
        parts.push(part);
    }
    if parts.is_empty() {
        return Err(Error::Contract("no sensors".into()));
    }
    Ok(tape.concat(&parts)?)
}
