//! Simulation and verification tools for nonseparable discrete choice models
//! with multidimensional unobserved heterogeneity.
//!
//! The crate computes choice probabilities and their derivatives, evaluates
//! the structural averages those derivatives identify, and checks the two
//! against each other. It also covers control-function and two-period panel
//! designs, exact observationally equivalent constructions off the panel
//! diagonal, and local-linear estimators that recover the identified objects
//! from simulated samples.

pub mod choiceprob;
pub mod controlfn;
pub mod distributions;
pub mod error;
pub mod estimate;
pub mod experiment;
pub mod identities;
pub mod model;
pub mod numeric;
pub mod panel;
pub mod report;
pub mod rng;

pub use choiceprob::{IntegrationSpec, Method, ProbResult};
pub use distributions::{Dists, EtaDist, NoiseDist};
pub use error::{Error, Result};
pub use model::{Expr, Family, ModelDims, ModelSpec, UtilityModel};
