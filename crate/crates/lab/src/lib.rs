//! Desk-scale training lab: synthetic tasks, reverse-mode training of the
//! transformer in `coupling-core`, synthetic coupled stacks and the
//! emergence/correlation experiment drivers.

// `!(x >= y)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod grad;
pub mod stack;
pub mod task;
pub mod train;

pub use error::{LabError, Result};
