//! Desk-scale laboratory for learning with noisy labels via part-level
//! multi-labeling.
//!
//! The crate covers the full loop: clean data (synthetic generator or
//! IDX ingestion), noise injection with recorded ground truth, instance
//! cropping into part-level multi-labels, joint training of a noisy
//! class posterior network with a single-to-multiple transition matrix
//! network, anchor-based noise-matrix estimation, corrected-risk
//! classifier training, and the measurement/reporting layer.

pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod partlab;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod transition;

/// Shared floor for probability clamping inside log-losses.
pub const EPS_CLIP: f64 = 1e-12;

pub use error::{PlmError, Result};
pub use tensor::Tensor;
