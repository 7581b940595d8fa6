//! Simulation and statistical verification of birth-death and hopping
//! dynamics for continuum particle systems.

pub mod correlation;
pub mod dynamics;
pub mod error;
pub mod functions;
pub mod generators;
pub mod gibbs;
pub mod potential;
pub mod rng;
pub mod scaling;
pub mod space;
pub mod stats;

pub use error::{Error, Result};
pub use potential::{ModelParams, PairPotential, PotentialFamily};
pub use space::{Configuration, Point, Torus};
pub use stats::Estimate;
