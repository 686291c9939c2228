#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod ccg;
pub mod data;
pub mod error;
pub mod matrix;
pub mod metrics;
pub mod numerics;
pub mod perturb;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
