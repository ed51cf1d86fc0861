//! Training and evaluation engine for unbiased relation prediction on
//! long-tailed data: a dual-branch model with a coarse branch trained by
//! plain cross-entropy and a fine branch trained by curriculum re-weighting,
//! head-restricted distillation and a set-level semantic context module.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod schedules;
pub mod scm;
pub mod trainer;

pub use error::{Error, Result};
