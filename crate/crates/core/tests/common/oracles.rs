//! Test-side oracles: closed forms, randomized sphere scenes and the LCP
//! invariants checked against them. Shared with the acceptance target.

#![allow(dead_code)]

use diffdyn::model::{solid_sphere_inertia, Body, Model, Sphere, IDENTITY};
use diffdyn::solver::{engine_step, StepTrace};
use diffdyn::tape::Tape;
use diffdyn::{CompiledModel, SimConfig, WorldState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Heights of a body released from `z0` at rest under semi-implicit Euler,
/// after each of `steps` steps.
pub fn free_fall_heights(z0: f64, g: f64, dt: f64, steps: usize) -> Vec<f64> {
    let (mut z, mut v) = (z0, 0.0);
    (0..steps)
        .map(|_| {
            v -= g * dt;
            z += v * dt;
            z
        })
        .collect()
}

/// Rebound speed of a single contact under Newton restitution with a
/// velocity threshold.
pub fn rebound_speed(impact: f64, e: f64, threshold: f64) -> f64 {
    e * (impact - threshold).max(0.0)
}

/// Impulse of an isolated row after `sweeps` damped Gauss-Seidel updates:
/// `λ* (1 − qⁿ)` with `λ* = (b − J·v)/d` and `q = cfm/(d + cfm)`.
pub fn single_row_impulse(residual: f64, d: f64, cfm: f64, sweeps: usize) -> f64 {
    let q = cfm / (d + cfm);
    (residual / d * (1.0 - q.powi(sweeps as i32))).max(0.0)
}

pub fn sphere_body(name: &str, mass: f64, radius: f64, friction: f64, restitution: f64) -> Body {
    Body {
        name: name.into(),
        mass,
        inertia: solid_sphere_inertia(mass, radius),
        spheres: vec![Sphere {
            offset: [0.0; 3],
            radius,
        }],
        friction,
        restitution,
        fixed: false,
        position: [0.0; 3],
        rotation: IDENTITY,
        velocity: [0.0; 3],
        angular_velocity: [0.0; 3],
    }
}

/// A random scene of one sphere touching the ground, or two spheres
/// stacked on it. With `restitution` set, every body uses it.
pub fn random_sphere_scene(rng: &mut ChaCha8Rng, restitution: Option<f64>) -> Model {
    let stacked = rng.gen_bool(0.5);
    let body = |name: &str, rng: &mut ChaCha8Rng| {
        let r = rng.gen_range(0.2..0.6);
        let e = restitution.unwrap_or_else(|| rng.gen_range(0.0..0.8));
        let mut b = sphere_body(name, rng.gen_range(0.5..3.0), r, rng.gen_range(0.0..1.2), e);
        for k in 0..3 {
            b.velocity[k] = rng.gen_range(-2.0..2.0);
            b.angular_velocity[k] = rng.gen_range(-5.0..5.0);
        }
        b
    };
    let mut a = body("a", rng);
    let ra = a.spheres[0].radius;
    a.position = [
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        ra - rng.gen_range(-0.005..0.01),
    ];
    let mut bodies = vec![a];
    if stacked {
        let mut b = body("b", rng);
        let rb = b.spheres[0].radius;
        let a = &bodies[0];
        let sep = ra + rb - rng.gen_range(-0.005..0.01);
        let tilt: f64 = rng.gen_range(-0.3..0.3);
        b.position = [
            a.position[0] + sep * tilt.sin(),
            a.position[1],
            a.position[2] + sep * tilt.cos(),
        ];
        bodies.push(b);
    }
    Model {
        name: "spheres".into(),
        bodies,
        joints: Vec::new(),
        motors: Vec::new(),
        sensors: Vec::new(),
        body_collisions: true,
    }
}

/// One untraced engine step with unpowered motors, returning the tape that
/// holds its values.
pub fn traced_step(model: &CompiledModel, cfg: &SimConfig, state: &WorldState) -> (Tape<f64>, StepTrace) {
    let mut tape = Tape::<f64>::new();
    let bodies = state.record(&mut tape, false);
    let trace = engine_step(&mut tape, model, cfg, &bodies, None).unwrap();
    (tape, trace)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst violations of the contact LCP after one step, over all active
/// contacts and batch rows.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Violations {
    /// `max(−λ_n)`.
    pub negative_impulse: f64,
    /// `max(−(J·v⁺ − b))` on normal rows.
    pub penetrating_velocity: f64,
    /// `max(λ_n · (J·v⁺ − b))`.
    pub complementarity: f64,
    /// `max(|λ_t| − μ·λ_n)`.
    pub cone: f64,
    pub active_contacts: usize,
}

pub fn contact_violations(tape: &Tape<f64>, trace: &StepTrace) -> Violations {
    let nc = trace.contacts.len();
    let first = trace.rows.len() - 3 * nc;
    let batch = tape.shape(trace.bodies[0].x).rows;
    let twist = |body: usize, b: usize| -> Vec<f64> {
        let v = tape.value(trace.bodies[body].v);
        let w = tape.value(trace.bodies[body].w);
        [&v[b * 3..b * 3 + 3], &w[b * 3..b * 3 + 3]].concat()
    };
    let mut out = Violations::default();
    for (c, contact) in trace.contacts.iter().enumerate() {
        for b in 0..batch {
            if tape.value(contact.mask)[b] == 0.0 {
                continue;
            }
            out.active_contacts += 1;
            let normal = first + 3 * c;
            let row = &trace.rows[normal];
            let mut jv = 0.0;
            for side in row.sides.iter().flatten() {
                let jac = tape.value(side.jac);
                let jac = if jac.len() == 6 { jac } else { &jac[b * 6..b * 6 + 6] };
                jv += dot(jac, &twist(side.body, b));
            }
            let bias = tape.value(row.bias);
            let bias = if bias.len() == 1 { bias[0] } else { bias[b] };
            let lambda = tape.value(trace.impulses[normal])[b];
            let gap = jv - bias;
            out.negative_impulse = out.negative_impulse.max(-lambda);
            out.penetrating_velocity = out.penetrating_velocity.max(-gap);
            out.complementarity = out.complementarity.max(lambda * gap);
            for t in 1..3 {
                let lt = tape.value(trace.impulses[normal + t])[b];
                out.cone = out.cone.max(lt.abs() - contact.friction * lambda);
            }
        }
    }
    out
}

/// Kinetic plus gravitational potential energy of batch row 0.
pub fn energy(model: &CompiledModel, cfg: &SimConfig, state: &WorldState) -> f64 {
    let mut e = 0.0;
    for (i, body) in model.model.bodies.iter().enumerate() {
        if body.fixed {
            continue;
        }
        let s = state.body(i, 0);
        let r = nalgebra::Matrix3::from_row_slice(&s.r);
        let ib = nalgebra::Matrix3::from_row_slice(&body.inertia.concat());
        let w = nalgebra::Vector3::from(s.w);
        let rot = 0.5 * w.dot(&(r * ib * r.transpose() * w));
        e += 0.5 * body.mass * dot(&s.v, &s.v) + rot - body.mass * dot(&cfg.gravity, &s.x);
    }
    e
}

/// Deepest sphere penetration into the ground over all rows, m.
pub fn max_penetration(model: &CompiledModel, state: &WorldState) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, body) in model.model.bodies.iter().enumerate() {
        for row in 0..state.batch {
            let s = state.body(i, row);
            for sp in &body.spheres {
                let z = s.x[2] + dot(&s.r[6..9], &sp.offset);
                worst = worst.max(sp.radius - z);
            }
        }
    }
    worst
}

/// Runs 100 random sphere scenes for 10 steps each and returns the worst
/// violations of single-contact and stacked scenes.
pub fn random_scene_violations(iterations: usize) -> (Violations, Violations, usize) {
    let cfg = SimConfig {
        iterations,
        ..SimConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut single, mut stacked) = (Violations::default(), Violations::default());
    let mut active = 0;
    for _ in 0..100 {
        let model = random_sphere_scene(&mut rng, None).compile().unwrap();
        let worst = if model.model.bodies.len() > 1 {
            &mut stacked
        } else {
            &mut single
        };
        let mut state = WorldState::at_build_pose(&model, 1);
        for _ in 0..10 {
            let (tape, trace) = traced_step(&model, &cfg, &state);
            let v = contact_violations(&tape, &trace);
            active += v.active_contacts;
            worst.negative_impulse = worst.negative_impulse.max(v.negative_impulse);
            worst.penetrating_velocity = worst.penetrating_velocity.max(v.penetrating_velocity);
            worst.complementarity = worst.complementarity.max(v.complementarity);
            worst.cone = worst.cone.max(v.cone);
            state = WorldState::from_tape(&tape, &trace.bodies, state.time + cfg.dt);
        }
    }
    (single, stacked, active)
}
