//! Core algorithms for compressing small networks while keeping them aligned
//! with their uncompressed reference.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is a pure
//! function of its inputs plus an explicit seeded RNG; file formats, the
//! experiment harness and the CLI live in the `compalign` crate.

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod compression;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod weighting;

pub use autodiff::{backward, forward, grad_check, predict, sgd_step, softmax_t, Tape};
pub use error::{Error, Result};
pub use losses::{LossConfig, LossTerm};
pub use models::{LayerSpec, Network, Parameter};
pub use tensor::Tensor;
pub use weighting::{Scheme, Weighting, Weights};
