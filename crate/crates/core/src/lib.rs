//! Budgeted inference over combined quantization / early-exit paths.
//!
//! Every candidate classifier of a multi-exit, multi-precision network is a
//! [`Path`](path_space::Path). Per-gate regressors learn, from clustered
//! empirical-error targets, the probability that each reachable path
//! misclassifies the current sample; the [`router`] then steps towards the
//! path minimizing `lambda * cost + predicted error`.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]
// `!(x > 0.0)` is written on purpose: it rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod dataset;
pub mod discretizer;
pub mod error;
pub mod path_space;
pub mod harness;
pub mod predictor;
pub mod router;

pub use error::{Error, Result};
