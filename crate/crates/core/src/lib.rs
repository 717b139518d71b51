// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod classifier;
pub mod datagen;
pub mod error;
pub mod explainer;
pub mod fsutil;
pub mod metrics;
pub mod nn;
pub mod runner;

pub use error::{Error, Result};
