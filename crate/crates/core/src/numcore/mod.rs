//! Deterministic dense numeric kernels.
//!
//! Everything is f64 and every reduction accumulates left to right over its
//! index, so results are reproducible bit for bit on a given platform.

mod attention;
mod matrix;
mod rng;

pub(crate) use attention::softmax_row_into;
pub use attention::{attention_forward, attention_forward_masked, softmax_rows, Mask};
pub use matrix::{dot, solve_linear, Matrix};
pub use rng::Rng;
