//! Latent causal invariance models at desk scale.

pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod inference;
pub mod model;
pub mod numeric;
pub mod scm;
pub mod theory;

pub use error::{LacimError, Result};
