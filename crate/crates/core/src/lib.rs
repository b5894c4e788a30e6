//! Synthetic turbulence as Gaussian random fields driven by k-ε flow data.

pub mod cli;
pub mod error;
pub mod flowfield;
pub mod invcdf;
pub mod meanflow;
pub mod par;
pub mod quad;
pub mod rng;
pub mod sampler;
pub mod spectrum;
pub mod stats;
pub mod temporal;

pub use error::{Error, Result};
