//! Differentiable rigid-body dynamics.
//!
//! A velocity-stepping engine (sphere contacts against a ground plane and
//! each other, joints, servo motors, projected Gauss-Seidel, semi-implicit
//! Euler) whose every step is recorded on a reverse-mode [`tape::Tape`].
//! On top of it sit dense neural controllers, backpropagation through
//! time, and a CMA-ES baseline.

pub mod control;
pub mod dynamics;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optimize;
pub mod scenarios;
pub mod solver;
pub mod tape;

pub use dynamics::{BodyState, BodyVars, SimConfig, WorldState};
pub use error::{Error, ModelError, Result};
pub use model::{CompiledModel, Model};
pub use tape::{Tape, Tensor, Var};
