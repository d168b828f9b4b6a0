//! Evolving prompt adaptation for a small frozen dual encoder.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod encoder;
mod error;
pub mod evolution;
pub mod losses;
pub mod mpp;
pub mod numcore;
pub mod snapshot;
pub mod tasks;
pub mod trainer;

pub use error::Error;
