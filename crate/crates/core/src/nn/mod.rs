//! Numeric kernels and the reverse-mode tape they plug into.
//!
//! Every kernel has a single implementation shared by training (through the
//! tape ops) and inference (called directly on arrays), so the two paths
//! produce identical values for identical inputs.

pub mod conv;
pub mod gdn;
pub mod ops;
pub mod resample;
pub mod scalar;
pub mod tape;
pub mod warp;

pub use scalar::Scalar;
pub use tape::{GradStore, Tape, Var};
