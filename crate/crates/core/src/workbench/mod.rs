//! Persistence, labels, pipeline orchestration, the CLI and the HTTP service.

pub mod cli;
pub mod labels;
pub mod manifest;
pub mod pipeline;
pub mod service;
pub mod workspace;
