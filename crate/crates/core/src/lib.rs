//! Exact simulation and scaling-limit solvers for age- and type-structured
//! branching populations with population-dependent rates.

pub mod error;
pub mod experiment;
pub mod fluctuation;
pub mod limit;
pub mod model;
pub mod monogamy;
pub mod parallel;
pub mod rng;
pub mod simulator;
pub mod stats;

pub use error::{Error, Result};
