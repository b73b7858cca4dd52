#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod augment;
pub mod nn;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod pairing;
pub mod training;

pub use error::{Error, Result};
