//! Adaptive layer-wise spatial token pruning for multimodal decoders.
//!
//! The crate is organized bottom-up:
//!
//! - [`numcore`]: dense f64 kernels, softmax/attention and a seeded splittable RNG.
//! - [`tokenstream`]: typed token sequences and the planted-retrieval scene builder.
//! - [`toydecoder`]: an analytically weighted causal decoder that exports attention maps
//!   and honors per-layer prune masks.
//! - [`infoflow`]: per-layer information-contribution statistics and redundancy reports.
//! - [`scheduler`]: constrained fitting of the exponential retention curve with an SQP solver.
//! - [`pruner`]: query-key ranking and layer-wise execution of a retention schedule.
//! - [`costmodel`]: closed-form decoder FLOPs accounting.

pub mod costmodel;
pub mod error;
pub mod infoflow;
pub mod numcore;
pub mod pruner;
pub mod scheduler;
pub mod tokenstream;
pub mod toydecoder;

pub use error::{Error, Result};
