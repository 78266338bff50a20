//! Core algorithms for forecasting on variable sets that grow over time.
//!
//! A deployment starts with a set of sensors, then gains more mid-stream, so
//! training windows disagree about how many series they contain. This crate
//! handles that shape mismatch without padding:
//!
//! - [`flat`] packs mixed-size windows into one batch of univariate rows and
//!   keeps per-window adjacency as block-diagonal structure;
//! - [`graph`] learns the adjacency from node embeddings plus time-of-day and
//!   day-of-week context;
//! - [`stfe`] extracts features with gated dilated convolutions interleaved
//!   with Chebyshev graph mixing, all with hand-written backward passes;
//! - [`contrast`] adds an augmentation-based contrastive term that filters
//!   same-window negatives and sharpens the temperature for young series;
//! - [`data`], [`train`], and [`metrics`] provide a synthetic benchmark
//!   generator, the training loop, and group-wise evaluation.
//!
//! Everything is plain `f64` with deterministic, seed-addressed randomness,
//! so runs reproduce bitwise. The crate is `no_std`-compatible (with `alloc`);
//! disable the default `std` feature to use it in that mode.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]
// Validation writes `!(x > 0.0)` on purpose so NaNs fail closed; the
// suggested `x <= 0.0` would wave them through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops in the numeric kernels mirror the subscripts of the math they
// implement; iterator chains would obscure which axis is which.
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod contrast;
pub mod data;
pub mod flat;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod stfe;
pub mod tensor;
pub mod train;

use alloc::string::String;

/// Errors shared by every module in this crate.
///
/// `Config` marks bad caller input (rejected before any work happens); the
/// other variants mark failures while running. Binaries map the two classes
/// to distinct exit codes.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A configuration value or combination of values is invalid.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Tensor or batch dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A NaN or infinity showed up where finite data is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// An operation was invoked in a state it does not support.
    #[error("invalid state: {0}")]
    State(String),
}

impl Error {
    /// True when the error is a rejection of caller input rather than a
    /// failure of the computation itself.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T> = core::result::Result<T, Error>;
