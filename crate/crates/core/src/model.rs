//! Static description of an articulated model: rigid bodies with collision
//! spheres, joints, servo motors and the sensor layout its controller sees.
//!
//! [`Model`] is the serializable form used by scene files. [`Model::compile`]
//! validates it and precomputes the body-frame quantities the engine needs.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn identity() -> Mat3 {
    IDENTITY
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sphere {
    /// Center in the body frame, m.
    pub offset: Vec3,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Body {
    pub name: String,
    /// kg. Ignored for fixed bodies except in mass totals.
    pub mass: f64,
    /// Body-frame inertia tensor, kg·m².
    pub inertia: Mat3,
    #[serde(default)]
    pub spheres: Vec<Sphere>,
    #[serde(default)]
    pub friction: f64,
    #[serde(default)]
    pub restitution: f64,
    /// Fixed bodies never move and are unaffected by gravity or impulses.
    #[serde(default)]
    pub fixed: bool,
    /// Build pose.
    pub position: Vec3,
    #[serde(default = "identity")]
    pub rotation: Mat3,
    #[serde(default)]
    pub velocity: Vec3,
    #[serde(default)]
    pub angular_velocity: Vec3,
}

/// A ball joint with one (hinge) or two (universal) free rotation axes.
/// Axes and anchor are given in world coordinates at the build pose; the
/// first axis is carried by the parent, the second by the child.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Joint {
    pub name: String,
    pub parent: String,
    pub child: String,
    pub anchor: Vec3,
    pub axes: Vec<Vec3>,
    /// Optional `[lo, hi]` angle limit per axis, rad.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limits: Option<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Motor {
    pub joint: String,
    pub axis: usize,
    /// s⁻¹
    pub gain: f64,
    /// N·m
    pub max_torque: f64,
    /// rad/s
    pub max_velocity: f64,
}

/// One group of controller input channels. Channel order in the sensor
/// vector is the order of this list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sensor {
    /// One angle per motor, rad.
    JointAngles,
    /// One rate per motor, rad/s.
    JointVelocities,
    /// 9 rotation-matrix entries, row-major.
    Orientation {
        body: String,
    },
    AngularVelocity {
        body: String,
    },
    LinearVelocity {
        body: String,
    },
    Height {
        body: String,
    },
    /// One 0/1 flag per ground contact candidate.
    ContactMasks,
    /// Motor targets issued on the previous step.
    PreviousTargets,
    /// Distance from a body point to the task target, m.
    TargetDistance {
        body: String,
        offset: Vec3,
    },
    /// Task target coordinates, m.
    TargetPosition,
    /// `sin(2πft), cos(2πft)`.
    Clock {
        frequency: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Model {
    pub name: String,
    pub bodies: Vec<Body>,
    #[serde(default)]
    pub joints: Vec<Joint>,
    #[serde(default)]
    pub motors: Vec<Motor>,
    #[serde(default)]
    pub sensors: Vec<Sensor>,
    /// Whether spheres on different bodies collide with each other. Bodies
    /// joined directly never collide with each other.
    #[serde(default = "yes")]
    pub body_collisions: bool,
}

/// Pair of spheres (or sphere and ground) that may touch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Candidate {
    Ground { body: usize, sphere: usize },
    Pair { a: usize, sa: usize, b: usize, sb: usize },
}

/// Joint geometry expressed in each body's own frame.
#[derive(Clone, Debug)]
pub struct JointFrame {
    pub parent: usize,
    pub child: usize,
    pub anchor_parent: Vec3,
    pub anchor_child: Vec3,
    /// Orthonormal right-handed frame `(e1, e2, e3)` in parent and child
    /// coordinates. `e1` is the first axis; for universal joints `e2` is
    /// the second axis.
    pub frame_parent: [Vec3; 3],
    pub frame_child: [Vec3; 3],
    pub dof: usize,
    pub limits: Option<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug)]
pub struct MotorFrame {
    pub joint: usize,
    pub axis: usize,
    pub gain: f64,
    pub max_torque: f64,
    pub max_velocity: f64,
}

/// Validated model with everything the engine step needs precomputed.
#[derive(Clone, Debug)]
pub struct CompiledModel {
    pub model: Model,
    pub inv_mass: Vec<f64>,
    /// Row-major inverse body-frame inertia.
    pub inv_inertia: Vec<[f64; 9]>,
    pub joints: Vec<JointFrame>,
    pub motors: Vec<MotorFrame>,
    pub candidates: Vec<Candidate>,
}

impl Model {
    pub fn body_index(&self, name: &str) -> Option<usize> {
        self.bodies.iter().position(|b| b.name == name)
    }

    pub fn total_mass(&self) -> f64 {
        self.bodies.iter().map(|b| b.mass).sum()
    }

    pub fn compile(&self) -> Result<CompiledModel, ModelError> {
        self.validate()?;
        let mut inv_mass = Vec::new();
        let mut inv_inertia = Vec::new();
        for b in &self.bodies {
            if b.fixed {
                inv_mass.push(0.0);
                inv_inertia.push([0.0; 9]);
            } else {
                let inv = mat(&b.inertia).try_inverse().expect("validated inertia");
                inv_mass.push(1.0 / b.mass);
                inv_inertia.push(flat(&inv));
            }
        }
        let joints = self.joints.iter().map(|j| self.joint_frame(j)).collect::<Vec<_>>();
        let motors = self
            .motors
            .iter()
            .map(|m| MotorFrame {
                joint: self.joints.iter().position(|j| j.name == m.joint).unwrap(),
                axis: m.axis,
                gain: m.gain,
                max_torque: m.max_torque,
                max_velocity: m.max_velocity,
            })
            .collect();
        let candidates = self.candidates(&joints);
        Ok(CompiledModel {
            model: self.clone(),
            inv_mass,
            inv_inertia,
            joints,
            motors,
            candidates,
        })
    }

    fn validate(&self) -> Result<(), ModelError> {
        let err = |path: String, msg: &str| Err(ModelError::new(path, msg));
        if self.bodies.is_empty() {
            return err("bodies".into(), "at least one body required");
        }
        for (i, b) in self.bodies.iter().enumerate() {
            let at = |f: &str| format!("bodies[{i}].{f}");
            if self.bodies[..i].iter().any(|o| o.name == b.name) {
                return err(at("name"), "duplicate body name");
            }
            if !(b.mass > 0.0) {
                return err(at("mass"), "must be positive");
            }
            let inertia = mat(&b.inertia);
            if (inertia - inertia.transpose()).norm() > 1e-12 * inertia.norm().max(1.0) || inertia.cholesky().is_none()
            {
                return err(at("inertia"), "must be symmetric positive definite");
            }
            let r = mat(&b.rotation);
            if (r.transpose() * r - Matrix3::identity()).norm() > 1e-9 || r.determinant() <= 0.0 {
                return err(at("rotation"), "must be a proper rotation");
            }
            for (k, s) in b.spheres.iter().enumerate() {
                if !(s.radius > 0.0) {
                    return err(at(&format!("spheres[{k}].radius")), "must be positive");
                }
            }
            if !(b.friction >= 0.0) {
                return err(at("friction"), "must be non-negative");
            }
            if !(0.0..=1.0).contains(&b.restitution) {
                return err(at("restitution"), "must lie in [0, 1]");
            }
        }
        let mut has_parent = vec![false; self.bodies.len()];
        for (i, j) in self.joints.iter().enumerate() {
            let at = |f: &str| format!("joints[{i}].{f}");
            let p = self.body_index(&j.parent);
            let c = self.body_index(&j.child);
            let (Some(p), Some(c)) = (p, c) else {
                return err(at("parent"), "unknown body");
            };
            if p == c {
                return err(at("child"), "joint connects a body to itself");
            }
            if has_parent[c] {
                return err(at("child"), "body already has a parent joint");
            }
            has_parent[c] = true;
            if j.axes.is_empty() || j.axes.len() > 2 {
                return err(at("axes"), "one or two axes required");
            }
            for a in &j.axes {
                if (Vector3::from(*a).norm() - 1.0).abs() > 1e-9 {
                    return err(at("axes"), "axes must be unit vectors");
                }
            }
            if j.axes.len() == 2 && Vector3::from(j.axes[0]).dot(&Vector3::from(j.axes[1])).abs() > 1e-9 {
                return err(at("axes"), "universal joint axes must be orthogonal");
            }
            if let Some(l) = &j.limits {
                if l.len() != j.axes.len() || l.iter().any(|[lo, hi]| !(lo <= hi)) {
                    return err(at("limits"), "one [lo, hi] pair per axis required");
                }
            }
        }
        // A tree: every body reaches a root by following parents, no cycles.
        for start in 0..self.bodies.len() {
            let mut cur = start;
            for _ in 0..=self.bodies.len() {
                match self.joints.iter().find(|j| self.body_index(&j.child) == Some(cur)) {
                    Some(j) => cur = self.body_index(&j.parent).unwrap(),
                    None => break,
                }
                if cur == start {
                    return err("joints".into(), "joint graph contains a cycle");
                }
            }
        }
        for (i, m) in self.motors.iter().enumerate() {
            let at = |f: &str| format!("motors[{i}].{f}");
            let Some(j) = self.joints.iter().find(|j| j.name == m.joint) else {
                return err(at("joint"), "unknown joint");
            };
            if m.axis >= j.axes.len() {
                return err(at("axis"), "joint has no such axis");
            }
            if !(m.gain > 0.0) {
                return err(at("gain"), "must be positive");
            }
            if !(m.max_torque > 0.0) {
                return err(at("max_torque"), "must be positive");
            }
            if !(m.max_velocity > 0.0) {
                return err(at("max_velocity"), "must be positive");
            }
        }
        for (i, s) in self.sensors.iter().enumerate() {
            let body = match s {
                Sensor::Orientation { body }
                | Sensor::AngularVelocity { body }
                | Sensor::LinearVelocity { body }
                | Sensor::Height { body }
                | Sensor::TargetDistance { body, .. } => Some(body),
                _ => None,
            };
            if let Some(b) = body {
                if self.body_index(b).is_none() {
                    return err(format!("sensors[{i}].body"), "unknown body");
                }
            }
        }
        Ok(())
    }

    fn joint_frame(&self, j: &Joint) -> JointFrame {
        let p = self.body_index(&j.parent).unwrap();
        let c = self.body_index(&j.child).unwrap();
        let e1 = Vector3::from(j.axes[0]);
        let e2 = match j.axes.get(1) {
            Some(a) => Vector3::from(*a),
            None => perpendicular(&e1),
        };
        let e3 = e1.cross(&e2);
        let local = |body: usize| {
            let b = &self.bodies[body];
            let rt = mat(&b.rotation).transpose();
            let anchor = rt * (Vector3::from(j.anchor) - Vector3::from(b.position));
            let frame = [e1, e2, e3].map(|e| (rt * e).into());
            (anchor.into(), frame)
        };
        let (anchor_parent, frame_parent) = local(p);
        let (anchor_child, frame_child) = local(c);
        JointFrame {
            parent: p,
            child: c,
            anchor_parent,
            anchor_child,
            frame_parent,
            frame_child,
            dof: j.axes.len(),
            limits: j.limits.clone(),
        }
    }

    fn candidates(&self, joints: &[JointFrame]) -> Vec<Candidate> {
        let mut out = Vec::new();
        for (b, body) in self.bodies.iter().enumerate() {
            if body.fixed {
                continue;
            }
            for s in 0..body.spheres.len() {
                out.push(Candidate::Ground { body: b, sphere: s });
            }
        }
        if !self.body_collisions {
            return out;
        }
        let joined = |a: usize, b: usize| {
            joints
                .iter()
                .any(|j| (j.parent == a && j.child == b) || (j.parent == b && j.child == a))
        };
        for a in 0..self.bodies.len() {
            for b in a + 1..self.bodies.len() {
                if joined(a, b) || (self.bodies[a].fixed && self.bodies[b].fixed) {
                    continue;
                }
                for sa in 0..self.bodies[a].spheres.len() {
                    for sb in 0..self.bodies[b].spheres.len() {
                        out.push(Candidate::Pair { a, sa, b, sb });
                    }
                }
            }
        }
        out
    }
}

impl CompiledModel {
    pub fn body_count(&self) -> usize {
        self.model.bodies.len()
    }

    pub fn motor_count(&self) -> usize {
        self.motors.len()
    }

    pub fn ground_candidates(&self) -> usize {
        self.candidates
            .iter()
            .filter(|c| matches!(c, Candidate::Ground { .. }))
            .count()
    }
}

/// Unit vector perpendicular to `a`, built from the coordinate axis along
/// which `a` has its smallest component (first such axis on ties).
pub fn perpendicular(a: &Vector3<f64>) -> Vector3<f64> {
    let k = smallest_axis(a);
    Vector3::ith(k, 1.0).cross(a).normalize()
}

fn smallest_axis(a: &Vector3<f64>) -> usize {
    let m = a.abs();
    if m.x <= m.y && m.x <= m.z {
        0
    } else if m.y <= m.z {
        1
    } else {
        2
    }
}

pub fn mat(m: &Mat3) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| m[r][c])
}

pub fn flat(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

pub fn unflat(m: &[f64]) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| m[r * 3 + c])
}

/// Inertia of a solid sphere about its center.
pub fn solid_sphere_inertia(mass: f64, radius: f64) -> Mat3 {
    let i = 0.4 * mass * radius * radius;
    [[i, 0.0, 0.0], [0.0, i, 0.0], [0.0, 0.0, i]]
}

/// Inertia of a solid cuboid with full side lengths `size` about its center.
pub fn solid_cuboid_inertia(mass: f64, size: Vec3) -> Mat3 {
    let [x, y, z] = size.map(|s| s * s);
    let k = mass / 12.0;
    [
        [k * (y + z), 0.0, 0.0],
        [0.0, k * (x + z), 0.0],
        [0.0, 0.0, k * (x + y)],
    ]
}
