//! Latent flow layers: replace a contiguous block of transformer layers with
//! one learned velocity field, trained by flow matching, Flow Walking, or a
//! hybrid of the two, and evaluate it against skip and regression baselines.

pub mod cli;
pub mod distill;
pub mod error;
pub mod flow;
pub mod io;
pub mod metrics;
pub mod nets;
pub mod rng;
pub mod tensor;
pub mod toy2d;
pub mod transport;

pub use error::{Error, Result};
pub use tensor::{no_grad, AdamW, AdamWConfig, Tensor};
