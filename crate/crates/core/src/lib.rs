//! Prioritized inverse kinematics: damped pseudoinverses, priority-respecting
//! orthogonalization, the four solver families, trajectory integration and
//! bundled scenarios.

pub mod acceptance;
pub mod config;
pub mod error;
pub mod numlin;
pub mod orthqr;
pub mod runner;
pub mod scenarios;
pub mod solver;
pub mod svd;
pub mod system;
pub mod trajectory;

pub use error::{PikError, Result};
pub use numlin::{DampingSpec, DampingValue};
pub use orthqr::{PriorityDecomposition, SingularityReport};
pub use solver::{pik_velocity, SolverConfig, SolverFamily, VelocitySolution};
pub use system::{CallbackSystem, KinematicSystem, TrackingSystem};
