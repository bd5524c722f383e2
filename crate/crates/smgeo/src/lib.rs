//! Synthetic cross-view data, training, evaluation, visual export and the HTTP
//! service around the `smgeo-core` localizer.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod serve;
pub mod synth;
pub mod train;
pub mod visuals;

pub use error::{Error, Result};
