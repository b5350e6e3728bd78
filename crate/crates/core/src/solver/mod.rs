//! Contacts, joints and servo motors as a softened velocity LCP solved by
//! projected Gauss-Seidel, composed into one differentiable engine step.

pub mod contact;
pub mod pgs;
pub mod rows;

pub use contact::{detect_contacts, tangent_frame, Contact};
pub use pgs::{pgs_solve, Solution};
pub use rows::{
    assemble_rows, joint_kinematics, servo_row, servo_velocity, JointKinematics, Limits, MotorInputs, Row, Side,
};

use crate::dynamics::{integrate, predict_velocities, BodyVars, SimConfig, WorldState};
use crate::error::{Error, Result};
use crate::model::CompiledModel;
use crate::tape::{Real, Shape, Tape, Tensor, TraceError, Var};

/// Everything recorded by one [`engine_step`].
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub bodies: Vec<BodyVars>,
    pub contacts: Vec<Contact>,
    pub rows: Vec<Row>,
    pub impulses: Vec<Var>,
    /// Pre-solve `(v, ω)` per body, `[B,6]`.
    pub predicted: Vec<Var>,
}

/// External forces, contact detection, row assembly, PGS and integration.
/// Without `motors`, servo rows are omitted (motors are unpowered).
pub fn engine_step<T: Real>(
    tape: &mut Tape<T>,
    model: &CompiledModel,
    cfg: &SimConfig,
    bodies: &[BodyVars],
    motors: Option<MotorInputs>,
) -> std::result::Result<StepTrace, TraceError> {
    let mut predicted = Vec::with_capacity(bodies.len());
    for (i, b) in bodies.iter().enumerate() {
        let (v, w) = predict_velocities(tape, model, i, b, cfg)?;
        predicted.push(tape.concat(&[v, w])?);
    }
    let contacts = detect_contacts(tape, model, bodies)?;
    let kin = model
        .joints
        .iter()
        .map(|j| joint_kinematics(tape, j, bodies))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let rows = assemble_rows(tape, model, cfg, bodies, &predicted, &contacts, &kin, motors)?;
    let sol = pgs_solve(tape, model, bodies, &rows, &predicted, cfg.iterations)?;
    let mut next = Vec::with_capacity(bodies.len());
    for (i, b) in bodies.iter().enumerate() {
        if model.model.bodies[i].fixed {
            next.push(*b);
            continue;
        }
        let v = tape.slice(sol.velocities[i], 0, 3)?;
        let w = tape.slice(sol.velocities[i], 3, 3)?;
        next.push(integrate(tape, b, v, w, cfg)?);
    }
    Ok(StepTrace {
        bodies: next,
        contacts,
        rows,
        impulses: sol.impulses,
        predicted,
    })
}

/// Steps `state` forward `steps` times in f64 without keeping a gradient.
/// With `hold`, every servo tracks its fixed target angle (one per motor);
/// without it the motors are unpowered. `visit` sees the state after each
/// step, numbered from 1.
pub fn simulate(
    model: &CompiledModel,
    cfg: &SimConfig,
    state: &WorldState,
    steps: usize,
    hold: Option<&[f64]>,
    mut visit: impl FnMut(usize, &WorldState),
) -> Result<WorldState> {
    let m = model.model.motors.len();
    if let Some(h) = hold {
        if h.len() != m {
            return Err(Error::Contract(format!("{} hold targets for {m} motors", h.len())));
        }
    }
    let mut state = state.clone();
    for step in 1..=steps {
        let mut tape = Tape::<f64>::new();
        let bodies = state.record(&mut tape, false);
        let motors = match hold {
            Some(h) => {
                let targets: Vec<f64> = (0..state.batch).flat_map(|_| h.iter().copied()).collect();
                let gains: Vec<f64> = model.model.motors.iter().map(|mo| mo.gain).collect();
                Some(MotorInputs {
                    targets: tape.constant(Tensor::new(Shape::new(state.batch, m), targets)?),
                    gains: tape.constant(Tensor::new(Shape::new(1, m), gains)?),
                })
            }
            None => None,
        };
        let trace = engine_step(&mut tape, model, cfg, &bodies, motors)?;
        let next = WorldState::from_tape(&tape, &trace.bodies, state.time + cfg.dt);
        if !next.is_finite() {
            return Err(Error::NonFinite {
                step,
                channel: "state".into(),
            });
        }
        state = next;
        visit(step, &state);
    }
    Ok(state)
}
