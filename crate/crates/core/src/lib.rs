//! Numerical laboratory for matrix stochastic exponentials, linear BSDEs with bmo
//! coefficients and quadratic BSDE systems.
//!
//! Conventions: `n` is the system dimension, `d` the Brownian dimension. `Z` and `A`
//! carry an extra `R^d` index which every product contracts (see [`tensor`]).

pub mod brownian;
pub mod counterexamples;
pub mod error;
pub mod exponential;
pub mod field;
pub mod grid;
pub mod linalg;
pub mod linear;
pub mod norms;
pub mod oracle;
pub mod quadratic;
pub mod regression;
pub mod rng;
pub mod suite;
pub mod tensor;
pub mod terminal;

pub use error::{LabError, Result};

/// Library version, recorded in every run summary.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
