//! File formats, run configuration, checkpoints and the command-line
//! driver around `tarfvae-core`.

pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod selftest;

pub use error::{Error, Result};
