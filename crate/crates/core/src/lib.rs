//! Cross-view object localization on a small reverse-mode autodiff engine.
//!
//! The crate is `no_std` + `alloc`; IO, file formats and the CLI live in the
//! `smgeo` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod backbone;
pub mod error;
pub mod fusion;
pub mod gmoe;
pub mod gradcheck;
pub mod head;
pub mod metrics;
pub mod model;
mod grad;
pub(crate) mod kernels;
pub mod nn;
pub mod objectives;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use ops::{BnMode, BnStats};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
