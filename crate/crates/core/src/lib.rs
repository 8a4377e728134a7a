//! Semi-supervised image captioning from scarce pairs: a small reverse-mode
//! autodiff engine, the captioning and pair-discriminator models, their
//! losses, discriminator-driven pseudo-labels, a synthetic scene world, the
//! training loop, and an exact discrete checker for the minimax objective.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod autodiff;
pub mod dist;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod pseudo;
pub mod rng;
pub mod toyworld;
pub mod trainer;

pub use error::{Error, Result};
