//! The ball, arm and quadruped models, their tasks, and the JSON scene
//! files that carry both.
//!
//! Geometry the builders fix by choice: the arm stands on a fixed 26 kg
//! pedestal and carries 4 kg and 2 kg links (servos limited to 30 N·m cannot
//! hold two 16 kg links out horizontally); quadruped leg segments are
//! 0.15 m with 0.03 m sphere feet; the ball has mass 1 kg.

mod gradcheck;
mod tasks;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use gradcheck::{gradcheck_report, GradcheckKind, GradcheckReport, GroupError, ServoArm, SphereRollout};
pub use tasks::{BallThrow, ControlTask, Scenario};

use crate::dynamics::SimConfig;
use crate::error::{Error, ModelError};
use crate::model::{
    solid_cuboid_inertia, solid_sphere_inertia, Body, Joint, Model, Motor, Sensor, Sphere, Vec3, IDENTITY,
};

/// Names accepted by [`scenario`].
pub const SCENARIOS: [&str; 4] = ["ball-throw", "arm-fixed", "arm-random", "quadruped-gait"];

/// Where task targets come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSampler {
    Fixed {
        point: Vec3,
    },
    /// Uniform in the box `[low, high]`, fresh per batch row and episode.
    Uniform {
        low: Vec3,
        high: Vec3,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Task {
    /// Choose initial linear and angular velocity so the body comes to rest
    /// at a ground-plane point after `duration`.
    BallThrow {
        body: String,
        target: [f64; 2],
        duration: f64,
        /// Weight of the final spin in the loss, m.
        spin_weight: f64,
        position_tolerance: f64,
        velocity_tolerance: f64,
    },
    /// Move a body point to a target, averaged over every step.
    Reach {
        body: String,
        offset: Vec3,
        target: TargetSampler,
        duration: f64,
        batch: usize,
        inputs: Vec<Sensor>,
        hidden: Vec<usize>,
    },
    /// Maximize the mean forward (+x) velocity of a body.
    Gait {
        body: String,
        duration: f64,
        batch: usize,
        inputs: Vec<Sensor>,
        hidden: Vec<usize>,
        skip_input_to_output: bool,
    },
}

/// A model plus optional task and engine settings, as stored in scene files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub name: String,
    pub bodies: Vec<Body>,
    #[serde(default)]
    pub joints: Vec<Joint>,
    #[serde(default)]
    pub motors: Vec<Motor>,
    #[serde(default)]
    pub sensors: Vec<Sensor>,
    #[serde(default = "yes")]
    pub body_collisions: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default)]
    pub sim: SimConfig,
}

fn yes() -> bool {
    true
}

impl Scene {
    pub fn new(model: Model, task: Option<Task>) -> Self {
        Self {
            name: model.name,
            bodies: model.bodies,
            joints: model.joints,
            motors: model.motors,
            sensors: model.sensors,
            body_collisions: model.body_collisions,
            task,
            sim: SimConfig::default(),
        }
    }

    pub fn model(&self) -> Model {
        Model {
            name: self.name.clone(),
            bodies: self.bodies.clone(),
            joints: self.joints.clone(),
            motors: self.motors.clone(),
            sensors: self.sensors.clone(),
            body_collisions: self.body_collisions,
        }
    }

    /// Parses and validates a scene. Errors name the offending field, e.g.
    /// `bodies[0].mass`.
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scene: Scene = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ModelError::new(
                if path == "." { "scene".into() } else { path },
                e.into_inner().to_string(),
            )
        })?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::from_json(&text)?)
    }

    /// Pretty JSON with numeric arrays kept on one line.
    pub fn to_json(&self) -> String {
        let pretty = serde_json::to_string_pretty(self).expect("scene serializes");
        collapse_flat_arrays(&pretty) + "\n"
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let model = self.model().compile()?;
        let s = &self.sim;
        if !(s.dt > 0.0) {
            return Err(ModelError::new("sim.dt", "must be positive"));
        }
        let body_ok = |b: &str| model.model.body_index(b).is_some();
        let steps_ok = |d: f64| {
            let n = d / s.dt;
            d >= 0.0 && (n - n.round()).abs() < 1e-6
        };
        match &self.task {
            None => {}
            Some(Task::BallThrow { body, duration, .. }) => {
                if !body_ok(body) {
                    return Err(ModelError::new("task.body", "unknown body"));
                }
                if !steps_ok(*duration) {
                    return Err(ModelError::new("task.duration", "must be a multiple of sim.dt"));
                }
            }
            Some(Task::Reach {
                body,
                duration,
                batch,
                hidden,
                inputs,
                ..
            })
            | Some(Task::Gait {
                body,
                duration,
                batch,
                hidden,
                inputs,
                ..
            }) => {
                if !body_ok(body) {
                    return Err(ModelError::new("task.body", "unknown body"));
                }
                if !steps_ok(*duration) {
                    return Err(ModelError::new("task.duration", "must be a multiple of sim.dt"));
                }
                if *batch == 0 {
                    return Err(ModelError::new("task.batch", "must be at least 1"));
                }
                if hidden.contains(&0) {
                    return Err(ModelError::new("task.hidden", "layer sizes must be positive"));
                }
                if inputs.is_empty() {
                    return Err(ModelError::new("task.inputs", "at least one input required"));
                }
                if model.motor_count() == 0 {
                    return Err(ModelError::new("motors", "controlled tasks need motors"));
                }
            }
        }
        Ok(())
    }
}

fn collapse_flat_arrays(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(open) = rest.find('[') {
        out.push_str(&rest[..open]);
        rest = &rest[open..];
        let close = rest.find(']').unwrap_or(rest.len() - 1);
        let inner = &rest[1..close];
        if inner.contains(['[', '{', '"']) {
            out.push('[');
            rest = &rest[1..];
        } else {
            let items: Vec<&str> = inner.split(',').map(str::trim).filter(|x| !x.is_empty()).collect();
            out.push('[');
            out.push_str(&items.join(", "));
            out.push(']');
            rest = &rest[close + 1..];
        }
    }
    out.push_str(rest);
    out
}

/// Scene for one of [`SCENARIOS`].
pub fn scenario(name: &str) -> Result<Scene, Error> {
    let scene = match name {
        "ball-throw" => Scene::new(build_ball(), Some(ball_throw_task())),
        "arm-fixed" => Scene::new(build_arm(), Some(arm_fixed_point_task())),
        "arm-random" => Scene::new(build_arm(), Some(arm_random_point_task())),
        "quadruped-gait" => Scene::new(build_quadruped(), Some(quadruped_gait_task())),
        _ => {
            return Err(Error::Contract(format!(
                "unknown scenario {name:?} (expected one of {})",
                SCENARIOS.join(", ")
            )))
        }
    };
    Ok(scene)
}

pub const BALL_RADIUS: f64 = 0.5;

/// One 1 m sphere resting on the ground at the origin.
pub fn build_ball() -> Model {
    // Resting contacts settle at half the allowed penetration.
    let rest = BALL_RADIUS - SimConfig::default().slop / 2.0;
    Model {
        name: "ball".into(),
        bodies: vec![Body {
            name: "ball".into(),
            mass: 1.0,
            inertia: solid_sphere_inertia(1.0, BALL_RADIUS),
            spheres: vec![Sphere {
                offset: [0.0; 3],
                radius: BALL_RADIUS,
            }],
            friction: 1.0,
            restitution: 0.5,
            fixed: false,
            position: [0.0, 0.0, rest],
            rotation: IDENTITY,
            velocity: [0.0; 3],
            angular_velocity: [0.0; 3],
        }],
        joints: Vec::new(),
        motors: Vec::new(),
        sensors: Vec::new(),
        body_collisions: true,
    }
}

pub fn ball_throw_task() -> Task {
    Task::BallThrow {
        body: "ball".into(),
        target: [10.0, 0.0],
        duration: 5.0,
        spin_weight: BALL_RADIUS,
        position_tolerance: 0.01,
        velocity_tolerance: 0.01,
    }
}

/// A collision-free 1 kg body 5 m up, for closed-form free-fall checks.
pub fn build_free_fall() -> Model {
    Model {
        name: "free-fall".into(),
        bodies: vec![Body {
            name: "point".into(),
            mass: 1.0,
            inertia: solid_sphere_inertia(1.0, 0.5),
            spheres: Vec::new(),
            friction: 0.0,
            restitution: 0.0,
            fixed: false,
            position: [0.0, 0.0, 5.0],
            rotation: IDENTITY,
            velocity: [0.0; 3],
            angular_velocity: [0.0; 3],
        }],
        joints: Vec::new(),
        motors: Vec::new(),
        sensors: Vec::new(),
        body_collisions: true,
    }
}

pub const ARM_LINK: f64 = 0.5;
pub const ARM_END_EFFECTOR: Vec3 = [0.25, 0.0, 0.0];

fn arm_motor(joint: &str, axis: usize) -> Motor {
    Motor {
        joint: joint.into(),
        axis,
        gain: 30.0,
        max_torque: 30.0,
        max_velocity: 45f64.to_radians(),
    }
}

/// Two 0.5 m links on a fixed pedestal: a universal base joint (yaw about
/// the pedestal's z, then pitch) and a universal elbow (pitch, then yaw).
/// Built with the upper link vertical and the forearm pointing along +x.
pub fn build_arm() -> Model {
    let link = |name: &str, mass: f64, size: Vec3, position: Vec3, sphere: Vec3| Body {
        name: name.into(),
        mass,
        inertia: solid_cuboid_inertia(mass, size),
        spheres: vec![Sphere {
            offset: sphere,
            radius: 0.04,
        }],
        friction: 0.5,
        restitution: 0.0,
        fixed: false,
        position,
        rotation: IDENTITY,
        velocity: [0.0; 3],
        angular_velocity: [0.0; 3],
    };
    let pedestal = Body {
        name: "pedestal".into(),
        mass: 26.0,
        inertia: solid_cuboid_inertia(26.0, [0.3, 0.3, 0.2]),
        spheres: Vec::new(),
        friction: 0.5,
        restitution: 0.0,
        fixed: true,
        position: [0.0, 0.0, -0.1],
        rotation: IDENTITY,
        velocity: [0.0; 3],
        angular_velocity: [0.0; 3],
    };
    Model {
        name: "arm".into(),
        bodies: vec![
            pedestal,
            link("upper", 4.0, [0.05, 0.05, ARM_LINK], [0.0, 0.0, 0.25], [0.0, 0.0, 0.25]),
            link(
                "forearm",
                2.0,
                [ARM_LINK, 0.05, 0.05],
                [0.25, 0.0, 0.5],
                ARM_END_EFFECTOR,
            ),
        ],
        joints: vec![
            Joint {
                name: "base".into(),
                parent: "pedestal".into(),
                child: "upper".into(),
                anchor: [0.0; 3],
                axes: vec![[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]],
                limits: Some(vec![deg_range(170.0), deg_range(80.0)]),
            },
            Joint {
                name: "elbow".into(),
                parent: "upper".into(),
                child: "forearm".into(),
                anchor: [0.0, 0.0, ARM_LINK],
                axes: vec![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                limits: Some(vec![deg_range(150.0), deg_range(150.0)]),
            },
        ],
        motors: vec![
            arm_motor("base", 0),
            arm_motor("base", 1),
            arm_motor("elbow", 0),
            arm_motor("elbow", 1),
        ],
        sensors: vec![Sensor::JointAngles, Sensor::JointVelocities, Sensor::TargetPosition],
        body_collisions: false,
    }
}

/// Symmetric servo range of `±deg` degrees.
fn deg_range(deg: f64) -> [f64; 2] {
    [-deg.to_radians(), deg.to_radians()]
}

fn end_effector_distance() -> Sensor {
    Sensor::TargetDistance {
        body: "forearm".into(),
        offset: ARM_END_EFFECTOR,
    }
}

pub fn arm_fixed_point_task() -> Task {
    Task::Reach {
        body: "forearm".into(),
        offset: ARM_END_EFFECTOR,
        target: TargetSampler::Fixed { point: [0.5, 0.5, 0.5] },
        duration: 8.0,
        batch: 1,
        inputs: vec![end_effector_distance()],
        hidden: vec![128, 128],
    }
}

pub fn arm_random_point_task() -> Task {
    Task::Reach {
        body: "forearm".into(),
        offset: ARM_END_EFFECTOR,
        target: TargetSampler::Uniform {
            low: [-1.0, -1.0, 0.0],
            high: [1.0, 1.0, 1.0],
        },
        duration: 8.0,
        batch: 64,
        inputs: vec![Sensor::TargetPosition],
        hidden: vec![128, 128],
    }
}

pub const QUADRUPED_MASS: f64 = 28.7;
pub const QUADRUPED_SEGMENT: f64 = 0.15;
pub const QUADRUPED_FOOT: f64 = 0.03;

/// Spine height at which the feet rest on the ground with straight legs.
pub fn quadruped_stance_height() -> f64 {
    2.0 * QUADRUPED_SEGMENT + QUADRUPED_FOOT - SimConfig::default().slop / 2.0
}

/// A 0.6 × 0.2 × 0.1 m spine holding 75 % of the mass and four legs of two
/// segments, each with a pitch hinge at shoulder and knee. Built standing
/// with straight legs, facing +x.
pub fn build_quadruped() -> Model {
    let h = quadruped_stance_height();
    let spine_mass = 0.75 * QUADRUPED_MASS;
    let segment_mass = 0.25 * QUADRUPED_MASS / 8.0;
    let mut bodies = vec![Body {
        name: "spine".into(),
        mass: spine_mass,
        inertia: solid_cuboid_inertia(spine_mass, [0.6, 0.2, 0.1]),
        spheres: [[0.2, 0.05], [0.2, -0.05], [-0.2, 0.05], [-0.2, -0.05]]
            .map(|[x, y]| Sphere {
                offset: [x, y, 0.0],
                radius: 0.05,
            })
            .to_vec(),
        friction: 0.5,
        restitution: 0.0,
        fixed: false,
        position: [0.0, 0.0, h],
        rotation: IDENTITY,
        velocity: [0.0; 3],
        angular_velocity: [0.0; 3],
    }];
    let mut joints = Vec::new();
    let mut motors = Vec::new();
    let segment = |name: String, position: Vec3, foot: bool| Body {
        name,
        mass: segment_mass,
        inertia: solid_cuboid_inertia(segment_mass, [0.04, 0.04, QUADRUPED_SEGMENT]),
        spheres: if foot {
            vec![Sphere {
                offset: [0.0, 0.0, -QUADRUPED_SEGMENT / 2.0],
                radius: QUADRUPED_FOOT,
            }]
        } else {
            Vec::new()
        },
        friction: 1.0,
        restitution: 0.0,
        fixed: false,
        position,
        rotation: IDENTITY,
        velocity: [0.0; 3],
        angular_velocity: [0.0; 3],
    };
    let hinge = |name: String, parent: String, child: String, anchor: Vec3| Joint {
        name,
        parent,
        child,
        anchor,
        axes: vec![[0.0, 1.0, 0.0]],
        limits: None,
    };
    for (leg, x, y) in [
        ("fl", 0.25, 0.13),
        ("fr", 0.25, -0.13),
        ("hl", -0.25, 0.13),
        ("hr", -0.25, -0.13),
    ] {
        let upper = format!("{leg}_upper");
        let lower = format!("{leg}_lower");
        let s = QUADRUPED_SEGMENT;
        bodies.push(segment(upper.clone(), [x, y, h - s / 2.0], false));
        bodies.push(segment(lower.clone(), [x, y, h - 1.5 * s], true));
        joints.push(hinge(
            format!("{leg}_shoulder"),
            "spine".into(),
            upper.clone(),
            [x, y, h],
        ));
        joints.push(hinge(format!("{leg}_knee"), upper, lower, [x, y, h - s]));
        for j in ["shoulder", "knee"] {
            motors.push(Motor {
                joint: format!("{leg}_{j}"),
                axis: 0,
                gain: 30.0,
                max_torque: 4.0,
                max_velocity: 8.0,
            });
        }
    }
    let spine = || "spine".to_string();
    Model {
        name: "quadruped".into(),
        bodies,
        joints,
        motors,
        sensors: vec![
            Sensor::JointAngles,
            Sensor::JointVelocities,
            Sensor::Orientation { body: spine() },
            Sensor::AngularVelocity { body: spine() },
            Sensor::LinearVelocity { body: spine() },
            Sensor::Height { body: spine() },
            Sensor::ContactMasks,
            Sensor::PreviousTargets,
        ],
        body_collisions: false,
    }
}

pub fn quadruped_gait_task() -> Task {
    Task::Gait {
        body: "spine".into(),
        duration: 10.0,
        batch: 1,
        inputs: vec![Sensor::Clock { frequency: 1.5 }],
        hidden: vec![128, 128],
        skip_input_to_output: true,
    }
}
