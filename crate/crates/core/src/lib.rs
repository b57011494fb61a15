pub mod error;
pub mod experiment;
pub mod linops;
pub mod models;
pub mod objectives;
pub mod problems;
pub mod quasinewton;
pub mod regularizers;
pub mod rng;
pub mod solvers;

pub use error::{Error, Result};
