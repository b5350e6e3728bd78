//! Run configuration. Flags override a JSON config file, which overrides
//! the scenario's defaults.

use std::path::{Path, PathBuf};

use diffdyn::optimize::{Method, OptimizeConfig};
use diffdyn::scenarios::{scenario, Scene, Task};
use serde::{Deserialize, Serialize};

use crate::{default_workers, CliError, CliResult};

/// Any subset of the run configuration, as given by flags or a config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub scenario: Option<String>,
    pub scene: Option<PathBuf>,
    pub method: Option<String>,
    pub seed: Option<u64>,
    pub iters: Option<usize>,
    pub batch: Option<usize>,
    pub workers: Option<usize>,
    pub dt: Option<f64>,
    pub duration: Option<f64>,
    pub alpha: Option<f64>,
    pub clip: Option<f64>,
    pub lr: Option<f64>,
    pub sigma0: Option<f64>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    /// Field-wise `self`, falling back to `lower`.
    pub fn or(self, lower: Overrides) -> Overrides {
        Overrides {
            scenario: self.scenario.or(lower.scenario),
            scene: self.scene.or(lower.scene),
            method: self.method.or(lower.method),
            seed: self.seed.or(lower.seed),
            iters: self.iters.or(lower.iters),
            batch: self.batch.or(lower.batch),
            workers: self.workers.or(lower.workers),
            dt: self.dt.or(lower.dt),
            duration: self.duration.or(lower.duration),
            alpha: self.alpha.or(lower.alpha),
            clip: self.clip.or(lower.clip),
            lr: self.lr.or(lower.lr),
            sigma0: self.sigma0.or(lower.sigma0),
            out: self.out.or(lower.out),
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }
}

/// The effective configuration of an `optimize` run, echoed to
/// `config.json` in the output directory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub scenario: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<PathBuf>,
    pub method: String,
    pub seed: u64,
    /// Updates for gradient methods, evaluations for cma-es.
    pub iters: usize,
    pub batch: usize,
    pub workers: usize,
    pub dt: f64,
    pub duration: f64,
    pub alpha: f64,
    pub clip: f64,
    pub lr: f64,
    pub sigma0: f64,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn optimize_config(&self) -> OptimizeConfig {
        OptimizeConfig {
            method: self.method.parse().expect("validated method"),
            iterations: self.iters,
            lr: self.lr,
            clip: self.clip,
            alpha: self.alpha,
            sigma0: self.sigma0,
            seed: self.seed,
            stop_on_success: true,
        }
    }
}

/// Optimizer settings a task kind starts from.
fn task_defaults(task: &Task) -> (Method, f64, f64, usize, usize, f64) {
    // (method, lr, alpha, gradient iterations, cma-es evaluations, sigma0)
    match task {
        // Undecayed gradients: the throw is decided by the whole trajectory.
        Task::BallThrow { .. } => (Method::Sgd, 0.1, 1.0, 500, 5000, 1.0),
        Task::Reach { .. } => (Method::Adam, 1e-3, 0.99, 300, 2000, 0.1),
        Task::Gait { .. } => (Method::Adam, 1e-3, 0.99, 500, 2000, 0.1),
    }
}

/// Loads the scene named by the overrides (a file, else a built-in
/// scenario) without applying any setting to it.
pub fn load_scene(o: &Overrides) -> CliResult<(String, Scene)> {
    match (&o.scene, &o.scenario) {
        (Some(path), name) => {
            let scene = Scene::load(path).map_err(|e| CliError::usage(format!("scene {}: {e}", path.display())))?;
            Ok((name.clone().unwrap_or_else(|| scene.name.clone()), scene))
        }
        (None, Some(name)) => Ok((
            name.clone(),
            scenario(name).map_err(|e| CliError::usage(e.to_string()))?,
        )),
        (None, None) => Err(CliError::usage("one of --scene or --scenario is required")),
    }
}

/// Resolves `flags` over the optional config file and the scenario
/// defaults, and returns the effective configuration with the scene it
/// applies to.
pub fn resolve(flags: Overrides, file: Option<&Path>) -> CliResult<(RunConfig, Scene)> {
    let o = match file {
        Some(path) => flags.or(Overrides::load(path)?),
        None => flags,
    };
    let (name, mut scene) = load_scene(&o)?;
    let task = scene
        .task
        .clone()
        .ok_or_else(|| CliError::usage(format!("scene {:?} has no task to optimize", scene.name)))?;
    let (method, lr, alpha, iters, evals, sigma0) = task_defaults(&task);
    let method: Method = match &o.method {
        Some(m) => m.parse().map_err(CliError::usage)?,
        None => method,
    };
    let default_iters = if method == Method::CmaEs { evals } else { iters };

    if let Some(dt) = o.dt {
        scene.sim.dt = dt;
    }
    match scene.task.as_mut().unwrap() {
        Task::BallThrow { duration, .. } => {
            if o.batch.is_some_and(|b| b != 1) {
                return Err(CliError::usage("--batch: the ball-throw task has a single trajectory"));
            }
            if let Some(d) = o.duration {
                *duration = d;
            }
        }
        Task::Reach { duration, batch, .. } | Task::Gait { duration, batch, .. } => {
            if let Some(d) = o.duration {
                *duration = d;
            }
            if let Some(b) = o.batch {
                *batch = b;
            }
        }
    }
    scene
        .validate()
        .map_err(|e| CliError::usage(format!("scene {:?}: {e}", scene.name)))?;
    let (duration, batch) = match scene.task.as_ref().unwrap() {
        Task::BallThrow { duration, .. } => (*duration, 1),
        Task::Reach { duration, batch, .. } | Task::Gait { duration, batch, .. } => (*duration, *batch),
    };

    let workers = match o.workers {
        Some(0) => return Err(CliError::usage("--workers must be at least 1")),
        Some(n) => n,
        None => default_workers()?,
    };
    let cfg = RunConfig {
        out: o.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&name)),
        scenario: name,
        scene: o.scene.clone(),
        method: method.name().into(),
        seed: o.seed.unwrap_or(0),
        iters: o.iters.unwrap_or(default_iters),
        batch,
        workers,
        dt: scene.sim.dt,
        duration,
        alpha: o.alpha.unwrap_or(alpha),
        clip: o.clip.unwrap_or(1.0),
        lr: o.lr.unwrap_or(lr),
        sigma0: o.sigma0.unwrap_or(sigma0),
    };
    for (flag, v) in [
        ("alpha", cfg.alpha),
        ("clip", cfg.clip),
        ("lr", cfg.lr),
        ("sigma0", cfg.sigma0),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(CliError::usage(format!("--{flag} must be positive, got {v}")));
        }
    }
    Ok((cfg, scene))
}
