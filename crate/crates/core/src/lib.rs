//! Regime-mixing probabilistic forecasting head.
//!
//! A stick-breaking gate allocates each forecast location across a finite set
//! of regimes. The regimes share a sparse variational GP residual through a
//! gate-weighted mixing kernel and score observations with a Student-t
//! mixture. A small MLP encoder produces the mean path, gate logits and regime
//! features; training, synthetic data and evaluation round out the crate.

// `!(x > 0.0)` checks deliberately reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gate;
pub mod kernels;
pub mod likelihood;
pub mod model;
pub mod svgp;
pub mod training;

pub use error::{Error, Result};
