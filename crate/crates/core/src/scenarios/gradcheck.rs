//! Randomized short rollouts whose BPTT gradients are compared against
//! central differences.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tasks::{body_labels, body_point, build_pose, depths, pack, unpack};
use super::{build_arm, build_ball, ARM_END_EFFECTOR};
use crate::dynamics::SimConfig;
use crate::error::Result;
use crate::gradcheck::normwise_relative_error;
use crate::model::CompiledModel;
use crate::optimize::{evaluate, problem_gradcheck, Episode, Problem, RolloutOptions, StepOut, Workers};
use crate::solver::{engine_step, MotorInputs};
use crate::tape::{Axis, Real, Shape, Tape, Var};

/// Samples closer than this to switching a contact on or off are redrawn.
pub const GUARD: f64 = 1e-3;
const MAX_REDRAWS: usize = 1000;
const FD_STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradcheckKind {
    /// Ball in free flight, gradient w.r.t. initial velocities.
    Ball,
    /// Ball bouncing once on the ground.
    BallBounce,
    /// Arm holding servo targets, gradient w.r.t. gains and initial spin.
    Arm,
}

impl GradcheckKind {
    pub const ALL: [GradcheckKind; 3] = [GradcheckKind::Ball, GradcheckKind::BallBounce, GradcheckKind::Arm];

    pub fn name(self) -> &'static str {
        match self {
            GradcheckKind::Ball => "ball",
            GradcheckKind::BallBounce => "ball-bounce",
            GradcheckKind::Arm => "arm",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            GradcheckKind::Ball => 1e-5,
            _ => 1e-3,
        }
    }

    pub fn default_steps(self) -> usize {
        match self {
            GradcheckKind::Ball => 10,
            _ => 20,
        }
    }

    fn groups(self) -> Vec<(&'static str, Range<usize>)> {
        match self {
            GradcheckKind::Ball | GradcheckKind::BallBounce => vec![("v0", 0..3), ("w0", 3..6)],
            GradcheckKind::Arm => vec![("gains", 0..4), ("w0_upper", 4..7), ("w0_forearm", 7..10)],
        }
    }
}

impl fmt::Display for GradcheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradcheckKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown gradcheck scenario {s:?} (expected ball, ball-bounce or arm)"))
    }
}

/// The ball from a random start, loss a random smooth function of its final
/// state. Parameters: initial `(v, ω)`.
#[derive(Clone, Debug)]
pub struct SphereRollout {
    pub model: CompiledModel,
    pub cfg: SimConfig,
    pub steps: usize,
    pub height: f64,
    /// Weights on final `x` (3), `R` (9) and `ω` (3).
    pub weights: Vec<f64>,
}

impl Problem for SphereRollout {
    fn name(&self) -> &str {
        "sphere-rollout"
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
        let mut b = build_pose(tape, &self.model, &rows);
        b[0].x = tape.constant_f64(1, 3, &[0.0, 0.0, self.height]);
        b[0].v = tape.slice(params[0], 0, 3)?;
        b[0].w = tape.slice(params[0], 3, 3)?;
        Ok(pack(&b))
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
        let b = unpack(state)[0];
        let s = tape.concat(&[b.x, b.r, b.w])?;
        let w = tape.constant_f64(1, 15, &self.weights);
        let lin = tape.dot(s, w)?;
        let v2 = tape.square(b.v)?;
        let v2 = tape.sum(v2, Axis::Cols);
        let v2 = tape.scale(v2, 0.5)?;
        Ok(Some(tape.add(lin, v2)?))
    }
    fn state_labels(&self) -> Vec<String> {
        body_labels(&self.model)
    }
}

/// The arm holding constant servo targets from a random initial spin;
/// loss is the mean end-effector distance to a random point. Parameters:
/// motor gains (4), initial `ω` of the upper link (3) and forearm (3).
#[derive(Clone, Debug)]
pub struct ServoArm {
    pub model: CompiledModel,
    pub cfg: SimConfig,
    pub steps: usize,
    pub targets: [f64; 4],
    pub goal: [f64; 3],
}

impl Problem for ServoArm {
    fn name(&self) -> &str {
        "servo-arm"
    }
    fn param_shapes(&self) -> Vec<Shape> {
        vec![Shape::new(1, 4), Shape::new(1, 3), Shape::new(1, 3)]
    }
    fn initial_params(&self, _seed: u64) -> Vec<f64> {
        let mut p = vec![0.0; 10];
        p[..4].fill(30.0);
        p
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
        let mut b = build_pose(tape, &self.model, &rows);
        b[1].w = params[1];
        b[2].w = params[2];
        Ok(pack(&b))
    }
    fn step<T: Real>(
        &self,
        tape: &mut Tape<T>,
        _t: usize,
        state: &[Var],
        params: &[Var],
        _rows: Range<usize>,
        _episode: &Episode,
    ) -> Result<StepOut> {
        let targets = tape.constant_f64(1, 4, &self.targets);
        let motors = MotorInputs {
            targets,
            gains: params[0],
        };
        let trace = engine_step(tape, &self.model, &self.cfg, &unpack(state), Some(motors))?;
        let ee = body_point(tape, &trace.bodies[2], &ARM_END_EFFECTOR)?;
        let goal = tape.constant_f64(1, 3, &self.goal);
        let d = tape.sub(ee, goal)?;
        Ok(StepOut {
            guards: depths(tape, &trace)?,
            state: pack(&trace.bodies),
            loss: Some(tape.l2norm(d)),
        })
    }
    fn state_labels(&self) -> Vec<String> {
        body_labels(&self.model)
    }
}

/// Norm-wise relative error of one parameter group, worst over samples.
/// (Element-wise ratios are dominated by difference round-off on entries
/// far smaller than the rest of their group.)
#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub group: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub kind: GradcheckKind,
    pub steps: usize,
    pub samples: usize,
    /// Draws rejected for lying too close to a contact switch.
    pub redrawn: usize,
    pub groups: Vec<GroupError>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, |a, b| {
            if b.is_nan() || a.is_nan() {
                f64::NAN
            } else {
                a.max(b)
            }
        })
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

enum Sample {
    Sphere(SphereRollout, Vec<f64>),
    Arm(ServoArm, Vec<f64>),
}

fn draw(kind: GradcheckKind, steps: usize, rng: &mut ChaCha8Rng, ball: &CompiledModel, arm: &CompiledModel) -> Sample {
    let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
    match kind {
        GradcheckKind::Ball | GradcheckKind::BallBounce => {
            let bounce = kind == GradcheckKind::BallBounce;
            let height = if bounce { 0.5 + u(0.02, 0.08) } else { 5.0 };
            let vz = if bounce { u(-3.0, -1.0) } else { u(-1.0, 1.0) };
            let params = vec![u(-1.0, 1.0), u(-1.0, 1.0), vz, u(-2.0, 2.0), u(-2.0, 2.0), u(-2.0, 2.0)];
            let weights = (0..15).map(|_| u(-1.0, 1.0)).collect();
            let p = SphereRollout {
                model: ball.clone(),
                cfg: SimConfig::default(),
                steps,
                height,
                weights,
            };
            Sample::Sphere(p, params)
        }
        GradcheckKind::Arm => {
            // Small targets keep the servos inside their velocity clamp.
            let targets = [0; 4].map(|_| u(-0.015, 0.015));
            let goal = [u(-0.5, 0.5), u(-0.5, 0.5), u(0.2, 0.8)];
            let mut params: Vec<f64> = (0..4).map(|_| u(20.0, 40.0)).collect();
            params.extend((0..6).map(|_| u(-0.2, 0.2)));
            let p = ServoArm {
                model: arm.clone(),
                cfg: SimConfig::default(),
                steps,
                targets,
                goal,
            };
            Sample::Arm(p, params)
        }
    }
}

fn check<P: Problem>(p: &P, params: &[f64], workers: &Workers) -> Result<Option<crate::gradcheck::GradCheck>> {
    let ep = Episode::default();
    let fwd = evaluate::<f64, P>(
        p,
        params,
        &ep,
        RolloutOptions {
            alpha: 1.0,
            gradient: false,
        },
        workers,
    )?;
    if fwd.min_guard < GUARD {
        return Ok(None);
    }
    Ok(Some(problem_gradcheck::<f64, P>(p, params, &ep, FD_STEP, workers)?.0))
}

/// Runs `samples` independent gradient checks of `kind`.
pub fn gradcheck_report(kind: GradcheckKind, steps: usize, samples: usize, seed: u64) -> Result<GradcheckReport> {
    let ball = build_ball().compile()?;
    let arm = build_arm().compile()?;
    let workers = Workers::new(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = kind.groups();
    let mut worst = vec![0.0f64; groups.len()];
    let mut redrawn = 0;
    for _ in 0..samples {
        let gc = loop {
            let r = match draw(kind, steps, &mut rng, &ball, &arm) {
                Sample::Sphere(p, x) => check(&p, &x, &workers)?,
                Sample::Arm(p, x) => check(&p, &x, &workers)?,
            };
            match r {
                Some(gc) => break gc,
                None if redrawn < MAX_REDRAWS => redrawn += 1,
                None => {
                    return Err(crate::Error::Contract(format!(
                        "{kind}: no sample away from contact switches after {MAX_REDRAWS} draws"
                    )))
                }
            }
        };
        for (k, (_, range)) in groups.iter().enumerate() {
            let e = normwise_relative_error(&gc.tape[range.clone()], &gc.numeric[range.clone()]);
            worst[k] = if e.is_nan() || worst[k].is_nan() {
                f64::NAN
            } else {
                worst[k].max(e)
            };
        }
    }
    Ok(GradcheckReport {
        kind,
        steps,
        samples,
        redrawn,
        groups: groups
            .iter()
            .zip(worst)
            .map(|((g, _), e)| GroupError {
                group: g.to_string(),
                max_rel_error: e,
            })
            .collect(),
        tolerance: kind.tolerance(),
    })
}
