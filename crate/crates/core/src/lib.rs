//! Monte Carlo laboratory for the homogenization of passive scalars advected
//! by incompressible, space-time Gaussian random flows.

pub mod error;
pub mod field;
pub mod green_kubo;
pub mod linalg;
pub mod macroscale;
pub mod microscale;
pub mod nonlinearity;
pub mod rng;
pub mod runner;
pub mod stats;

pub use error::{LabError, Result};
