// NaN must fail range checks, so `!(x > 0.0)` is intentional.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fit;
pub mod flops;
pub mod growth;
pub mod model;
pub mod oracle;
pub mod pathscore;
pub mod pipeline;
pub mod seed;
pub mod suites;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
