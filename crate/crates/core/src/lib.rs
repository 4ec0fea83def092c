#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod boosting;
pub mod convnet;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod evalstats;
pub mod explain;
pub mod matrix;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod seed;
pub mod trees;

pub use error::{Error, Result};
pub use matrix::Matrix;
