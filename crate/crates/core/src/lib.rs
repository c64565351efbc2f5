//! Anomaly-guided contrastive pre-training for multichannel time-series
//! diagnosis.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every numerical
//! piece of the method: a small reverse-mode autodiff tape, the dilated
//! convolution + attention encoder, the Transformer autoencoder that scores
//! per-timestep contextual discrepancy, the score-weighted two-view
//! contrastive objective, the three training stages, and the evaluation
//! metrics. File formats, configuration text, and the command line live in
//! the companion `codac` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod ablation;
pub mod cde;
pub mod config;
pub mod dmcf;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod real;
pub mod rng;
pub mod signal;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
