//! Desk-scale toolkit for gap-aware contrastive representation alignment.
//!
//! The core idea: in a two-tower contrastive setup, a single anchor `t_i`
//! cannot simultaneously move toward its positive and away from every
//! negative. This crate offloads that tension onto pair-specific increments
//! `delta_ij`, scoring pair `(i, j)` as `cos(t_i + delta_ij, v_j)` instead of
//! `cos(t_i, v_j)`. Increments come either from a closed-form trust-region
//! step on the linearized loss or from a small learned cross-attention
//! predictor trained with variance, direction, and information-bottleneck
//! regularizers.
//!
//! Everything runs on dense `f64` matrices with a tape-based reverse-mode
//! autodiff just large enough for this loss stack. Heavy kernels fan out via
//! rayon when the default `parallel` feature is on; results are bit-identical
//! to the sequential fallback.

// Validation guards use `!(x > 0.0)` so NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod contrastive;
pub mod error;
pub mod gradcheck;
pub mod increments;
pub mod matrix;
pub mod par;
pub mod probes;
pub mod regularizers;
pub mod rng;
pub mod synthdata;
pub mod trainer;
pub mod trustregion;

pub use error::{Error, Result};
pub use matrix::Matrix;
