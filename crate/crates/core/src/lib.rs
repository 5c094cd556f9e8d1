#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod mmd;
pub mod nn;
pub mod rng;
pub mod sampling;
pub mod selection;
pub mod synth;
pub mod train;

pub use error::{Error, ErrorCategory, Result};
