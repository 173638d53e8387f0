pub mod cft;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod hae;
pub mod model;
pub mod numerics;
pub mod survival;
#[cfg(test)]
pub(crate) mod testutil;
pub mod trimae;
pub mod wsigraph;

pub use error::{Error, Result};
