//! Scaling laws for sequential recommenders: approximate entropy of
//! interaction data, loss and performance laws, fitting, and model-size
//! search under a fitted law.

pub mod apen;
pub mod dataset;
pub mod error;
pub mod fitting;
pub mod laws;
pub mod lsq;
pub mod markov;
pub mod optimize;
pub mod runstore;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
