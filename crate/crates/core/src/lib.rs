//! Core of a probabilistic multivariate forecaster built from a conditional
//! VAE whose Gaussian posterior is refined by a transformer-autoregressive
//! normalizing flow.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is pure
//! computation over in-memory data: tensors and a reverse-mode tape, the
//! model, its loss, the training loop, evaluation metrics, and synthetic
//! generators. File formats, timing and the command line live in the
//! companion `tarfvae` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod real;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::{Precision, Real};
pub use tensor::Tensor;
