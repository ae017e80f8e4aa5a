//! Analysis toolkit for transformer block coupling.
//!
//! A small decoder-only transformer ([`model`]) is run with full hidden-state
//! capture. Per-block, per-token-pair Jacobians of the skip-free block map
//! ([`jacobian`]) are extracted with forward-mode dual numbers and compared
//! through their truncated singular bases ([`coupling`]). Token trajectories
//! through depth are summarized by line-shape, expodistance, norm, entropy
//! and PCA measurements ([`trajectory`]). [`report`] defines the CSV/JSON
//! artifacts and their validator.

// `!(x >= y)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coupling;
pub mod dual;
pub mod error;
pub mod jacobian;
pub mod linalg;
pub mod model;
pub mod report;
pub mod trajectory;

pub use error::{Error, Result};
pub use linalg::Matrix;
