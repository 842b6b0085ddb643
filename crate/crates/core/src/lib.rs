//! Feedback-aware sequential recommendation with factorization-heads
//! attention, dual-interest disentangling and pair-wise contrastive towers,
//! on a small dense tensor library with reverse-mode autodiff.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod dual_interest;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod params;
pub mod prediction;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{DfarError, Result};
