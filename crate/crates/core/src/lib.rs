//! Artifact-unit identification and correction for layered image generators.

pub mod archive;
pub mod correct;
pub mod data;
pub mod error;
pub mod explain;
pub mod genmodel;
pub mod identify;
pub mod imageio;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod workbench;

pub use error::{Error, Result};
