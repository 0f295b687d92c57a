//! Hybrid neural/MPM fluid simulation.
//!
//! The crate is generic over the floating point scalar (`f32` or `f64`).
//! Aliases for the common instantiations live at the crate root.

pub mod control;
pub mod error;
pub mod hybrid;
pub mod linalg;
pub mod material;
pub mod mpm;
pub mod neural;
pub mod num;
pub mod particles;
pub mod resolution;
pub mod scenario;
pub mod trajectory;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use material::{Material, MaterialKind, MaterialParams};
pub use num::Real;
pub use particles::ParticleSet;
pub use scenario::{init_scenario, ScenarioConfig};
pub use trajectory::{StepMode, Trajectory};

pub type Vector32 = Vector<f32>;
pub type Vector64 = Vector<f64>;
pub type ParticleSet32 = ParticleSet<f32>;
pub type ParticleSet64 = ParticleSet<f64>;
pub type Trajectory32 = Trajectory<f32>;
pub type Trajectory64 = Trajectory<f64>;
