//! Edit-invariant sequence losses, toy sequence models, target-noise
//! operators and the training and experiment machinery around them.

pub mod eisl;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod noise;
pub mod numerics;
pub mod train;

/// Token ids index rows of the vocabulary.
pub type Token = usize;
