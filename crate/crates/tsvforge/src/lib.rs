//! Self-supervised time-series forecasting pipeline: a contrastively
//! pretrained dilated-convolution encoder, dual ridge forecast heads over
//! learned embeddings and explicit sinusoidal time features, and per-horizon
//! validation-optimized ensemble weighting, plus the two ablation methods
//! (masked-signal-modeling pretraining and a linear + boosted-residual
//! hybrid) and an evaluation harness.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod harness;
pub mod heads;
pub mod numerics;
pub mod objectives;
pub mod pretrain;

pub use error::{Result, TsvError};
