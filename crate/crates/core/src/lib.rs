//! Structured pruning for transformer span-extraction models.
//!
//! Gates are placed over attention heads and feed-forward activations of a
//! small transformer encoder. Gate values come from random draws, gradient
//! gain scores, or trained hard-concrete L0 gates; the gated-off slices are
//! then cut out of the weight matrices, and the smaller model can be
//! retrained or distilled from the unpruned one.

// `!(x > 0.0)` style guards reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gates;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod surgery;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
