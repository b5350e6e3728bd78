use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Scene, TargetSampler, Task};
use crate::control::{controller_forward, init_params, read_sensors, ControllerSpec, SensorContext};
use crate::dynamics::{BodyVars, SimConfig, WorldState};
use crate::error::{Error, Result};
use crate::model::{CompiledModel, Sensor, Vec3};
use crate::optimize::{Episode, Evaluation, Problem, StepOut};
use crate::solver::{engine_step, MotorInputs, StepTrace};
use crate::tape::{Real, Shape, Tape, Var};

pub(crate) fn unpack(state: &[Var]) -> Vec<BodyVars> {
    state
        .chunks_exact(4)
        .map(|c| BodyVars {
            x: c[0],
            r: c[1],
            v: c[2],
            w: c[3],
        })
        .collect()
}

pub(crate) fn pack(bodies: &[BodyVars]) -> Vec<Var> {
    bodies.iter().flat_map(|b| [b.x, b.r, b.v, b.w]).collect()
}

pub(crate) fn body_labels(model: &CompiledModel) -> Vec<String> {
    model
        .model
        .bodies
        .iter()
        .flat_map(|b| ["x", "r", "v", "w"].map(|f| format!("{}.{f}", b.name)))
        .collect()
}

/// Build pose for `rows.len()` batch rows, as constants.
pub(crate) fn build_pose<T: Real>(tape: &mut Tape<T>, model: &CompiledModel, rows: &Range<usize>) -> Vec<BodyVars> {
    WorldState::at_build_pose(model, rows.len()).record(tape, false)
}

/// Repeats a shared `[1,k]` tensor over `rows` batch rows.
pub(crate) fn broadcast<T: Real>(tape: &mut Tape<T>, v: Var, rows: usize) -> Result<Var> {
    let s = tape.shape(v);
    if s.rows == rows {
        return Ok(v);
    }
    let z = tape.full(rows, s.cols, 0.0);
    Ok(tape.add(z, v)?)
}

/// Contact depths of a step as one `[b, contacts]` tensor.
pub(crate) fn depths<T: Real>(tape: &mut Tape<T>, trace: &StepTrace) -> Result<Option<Var>> {
    if trace.contacts.is_empty() {
        return Ok(None);
    }
    let d: Vec<Var> = trace.contacts.iter().map(|c| c.depth).collect();
    Ok(Some(tape.concat(&d)?))
}

/// World position of a body-frame point, `[b,3]`.
pub(crate) fn body_point<T: Real>(tape: &mut Tape<T>, b: &BodyVars, offset: &Vec3) -> Result<Var> {
    let o = tape.constant_f64(1, 3, offset);
    let ro = tape.bmv3(b.r, o, false)?;
    Ok(tape.add(b.x, ro)?)
}

fn steps(duration: f64, dt: f64) -> usize {
    (duration / dt).round() as usize
}

fn compile(scene: &Scene) -> Result<CompiledModel> {
    scene.validate()?;
    Ok(scene.model().compile()?)
}

/// Initial linear and angular velocity of a free body, scored on where it
/// comes to rest.
#[derive(Clone, Debug)]
pub struct BallThrow {
    pub model: CompiledModel,
    pub cfg: SimConfig,
    pub body: usize,
    pub target: [f64; 2],
    pub steps: usize,
    pub spin_weight: f64,
    pub position_tolerance: f64,
    pub velocity_tolerance: f64,
}

impl BallThrow {
    pub fn new(scene: &Scene) -> Result<Self> {
        let Some(Task::BallThrow {
            body,
            target,
            duration,
            spin_weight,
            position_tolerance,
            velocity_tolerance,
        }) = &scene.task
        else {
            return Err(Error::Contract("scene has no ball-throw task".into()));
        };
        let model = compile(scene)?;
        Ok(Self {
            body: model.model.body_index(body).unwrap(),
            model,
            cfg: scene.sim.clone(),
            target: *target,
            steps: steps(*duration, scene.sim.dt),
            spin_weight: *spin_weight,
            position_tolerance: *position_tolerance,
            velocity_tolerance: *velocity_tolerance,
        })
    }

    /// Horizontal distance to the target and speed per batch row.
    pub fn errors(&self, eval: &Evaluation) -> Vec<(f64, f64)> {
        let x = &eval.final_state[4 * self.body];
        let v = &eval.final_state[4 * self.body + 2];
        x.chunks_exact(3)
            .zip(v.chunks_exact(3))
            .map(|(x, v)| {
                let p = (x[0] - self.target[0]).hypot(x[1] - self.target[1]);
                let s = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                (p, s)
            })
            .collect()
    }
}

impl Problem for BallThrow {
    fn name(&self) -> &str {
        "ball-throw"
    }

    fn param_shapes(&self) -> Vec<Shape> {
        vec![Shape::new(1, 6)]
    }

    fn initial_params(&self, _seed: u64) -> Vec<f64> {
        vec![0.0; 6]
    }

    fn batch(&self) -> usize {
        1
    }

    fn steps(&self) -> usize {
        self.steps
    }

    fn initial_state<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        rows: Range<usize>,
        _episode: &Episode,
    ) -> Result<Vec<Var>> {
        let mut bodies = build_pose(tape, &self.model, &rows);
        let v = tape.slice(params[0], 0, 3)?;
        let w = tape.slice(params[0], 3, 3)?;
        bodies[self.body].v = broadcast(tape, v, rows.len())?;
        bodies[self.body].w = broadcast(tape, w, rows.len())?;
        Ok(pack(&bodies))
    }

    fn step<T: Real>(
        &self,
        tape: &mut Tape<T>,
        _t: usize,
        state: &[Var],
        _params: &[Var],
        _rows: Range<usize>,
        _episode: &Episode,
    ) -> Result<StepOut> {
        let trace = engine_step(tape, &self.model, &self.cfg, &unpack(state), None)?;
        Ok(StepOut {
            guards: depths(tape, &trace)?,
            state: pack(&trace.bodies),
            loss: None,
        })
    }

    fn terminal<T: Real>(
        &self,
        tape: &mut Tape<T>,
        state: &[Var],
        _rows: Range<usize>,
        _episode: &Episode,
    ) -> Result<Option<Var>> {
        let b = unpack(state)[self.body];
        let xy = tape.slice(b.x, 0, 2)?;
        let target = tape.constant_f64(1, 2, &self.target);
        let d = tape.sub(xy, target)?;
        let pos = tape.l2norm(d);
        let speed = tape.l2norm(b.v);
        let spin = tape.l2norm(b.w);
        let spin = tape.scale(spin, self.spin_weight)?;
        let l = tape.add(pos, speed)?;
        Ok(Some(tape.add(l, spin)?))
    }

    fn state_labels(&self) -> Vec<String> {
        body_labels(&self.model)
    }

    fn success(&self, eval: &Evaluation) -> Option<bool> {
        Some(
            self.errors(eval)
                .iter()
                .all(|&(p, s)| p < self.position_tolerance && s < self.velocity_tolerance),
        )
    }
}

#[derive(Clone, Debug)]
enum Objective {
    Reach { body: usize, offset: Vec3 },
    Forward { body: usize },
}

/// A neural controller driving the motors, scored every step.
#[derive(Clone, Debug)]
pub struct ControlTask {
    pub name: String,
    pub model: CompiledModel,
    pub cfg: SimConfig,
    pub spec: ControllerSpec,
    pub inputs: Vec<Sensor>,
    pub batch: usize,
    pub steps: usize,
    pub target: Option<TargetSampler>,
    objective: Objective,
}

impl ControlTask {
    pub fn new(scene: &Scene) -> Result<Self> {
        let model = compile(scene)?;
        let motors = model.motor_count();
        let idx = |b: &str| model.model.body_index(b).unwrap();
        let (objective, target, duration, batch, inputs, hidden, skip) = match &scene.task {
            Some(Task::Reach {
                body,
                offset,
                target,
                duration,
                batch,
                inputs,
                hidden,
            }) => (
                Objective::Reach {
                    body: idx(body),
                    offset: *offset,
                },
                Some(target.clone()),
                *duration,
                *batch,
                inputs,
                hidden,
                false,
            ),
            Some(Task::Gait {
                body,
                duration,
                batch,
                inputs,
                hidden,
                skip_input_to_output,
            }) => (
                Objective::Forward { body: idx(body) },
                None,
                *duration,
                *batch,
                inputs,
                hidden,
                *skip_input_to_output,
            ),
            _ => return Err(Error::Contract("scene has no controller task".into())),
        };
        let width = crate::control::sensor_width(&model, inputs);
        let spec = ControllerSpec::mlp(width, hidden, motors, skip);
        spec.validate()?;
        Ok(Self {
            name: scene.name.clone(),
            cfg: scene.sim.clone(),
            spec,
            inputs: inputs.clone(),
            batch,
            steps: steps(duration, scene.sim.dt),
            target,
            objective,
            model,
        })
    }

    fn gains(&self) -> Vec<f64> {
        self.model.motors.iter().map(|m| m.gain).collect()
    }

    /// Observed mean forward velocity of a gait evaluation (the negated loss).
    pub fn forward_speed(&self, eval: &Evaluation) -> Option<f64> {
        matches!(self.objective, Objective::Forward { .. }).then(|| -eval.loss)
    }
}

impl Problem for ControlTask {
    fn name(&self) -> &str {
        &self.name
    }

    fn param_shapes(&self) -> Vec<Shape> {
        self.spec.shapes()
    }

    fn initial_params(&self, seed: u64) -> Vec<f64> {
        init_params(&self.spec, seed)
    }

    fn batch(&self) -> usize {
        self.batch
    }

    fn steps(&self) -> usize {
        self.steps
    }

    fn sample_episode(&self, rng: &mut ChaCha8Rng) -> Episode {
        let rows = match &self.target {
            None => Vec::new(),
            Some(TargetSampler::Fixed { point }) => vec![point.to_vec(); self.batch],
            Some(TargetSampler::Uniform { low, high }) => (0..self.batch)
                .map(|_| (0..3).map(|k| rng.gen_range(low[k]..=high[k])).collect())
                .collect(),
        };
        Episode { rows }
    }

    fn initial_state<T: Real>(
        &self,
        tape: &mut Tape<T>,
        _params: &[Var],
        rows: Range<usize>,
        _episode: &Episode,
    ) -> Result<Vec<Var>> {
        let mut s = pack(&build_pose(tape, &self.model, &rows));
        s.push(tape.full(rows.len(), self.model.motor_count(), 0.0));
        Ok(s)
    }

    fn step<T: Real>(
        &self,
        tape: &mut Tape<T>,
        t: usize,
        state: &[Var],
        params: &[Var],
        rows: Range<usize>,
        episode: &Episode,
    ) -> Result<StepOut> {
        let (body_state, prev) = state.split_at(state.len() - 1);
        let bodies = unpack(body_state);
        let target = episode.record(tape, rows);
        let ctx = SensorContext {
            time: t as f64 * self.cfg.dt,
            target,
            previous_targets: Some(prev[0]),
        };
        let sensors = read_sensors(tape, &self.model, &self.inputs, &bodies, &ctx)?;
        let targets = controller_forward(tape, &self.spec, params, sensors)?;
        let gains = tape.constant_f64(1, self.model.motor_count(), &self.gains());
        let trace = engine_step(
            tape,
            &self.model,
            &self.cfg,
            &bodies,
            Some(MotorInputs { targets, gains }),
        )?;
        let loss = match &self.objective {
            Objective::Reach { body, offset } => {
                let p = body_point(tape, &trace.bodies[*body], offset)?;
                let target = target.ok_or_else(|| Error::Contract("reach task without target".into()))?;
                let d = tape.sub(p, target)?;
                tape.l2norm(d)
            }
            Objective::Forward { body } => {
                let vx = tape.col(trace.bodies[*body].v, 0)?;
                tape.neg(vx)
            }
        };
        let mut next = pack(&trace.bodies);
        next.push(targets);
        Ok(StepOut {
            guards: depths(tape, &trace)?,
            state: next,
            loss: Some(loss),
        })
    }

    fn state_labels(&self) -> Vec<String> {
        let mut l = body_labels(&self.model);
        l.push("motor_targets".into());
        l
    }
}

/// A scene's task as a runnable problem.
#[derive(Clone, Debug)]
pub enum Scenario {
    Ball(BallThrow),
    Control(ControlTask),
}

impl Scenario {
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        match &scene.task {
            Some(Task::BallThrow { .. }) => Ok(Self::Ball(BallThrow::new(scene)?)),
            Some(_) => Ok(Self::Control(ControlTask::new(scene)?)),
            None => Err(Error::Contract(format!("scene {:?} has no task", scene.name))),
        }
    }
}
