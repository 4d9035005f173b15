//! Learned low-delay video codec.
//!
//! The pipeline codes each P-frame in two stages: a pyramid flow network
//! estimates motion against the previous reconstruction, the flow is
//! compressed by a motion autoencoder, a compensation network refines the
//! warped reference into a prediction, and the remaining residual is
//! compressed by a second autoencoder. Both latents go through a factorized
//! entropy bottleneck whose probabilities drive a bit-exact range coder.

pub mod bottleneck;
pub mod checkpoint;
pub mod codec;
pub mod container;
pub mod error;
pub mod eval;
pub mod flow;
pub mod frames;
pub mod iframe;
pub mod metrics;
pub mod motion_comp;
pub mod nn;
pub mod params;
pub mod range_coder;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
pub use frames::Frame;
