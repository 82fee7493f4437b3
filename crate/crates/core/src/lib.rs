#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod config;
pub mod error;
pub mod experiment;
pub mod fedsim;
pub mod metrics;
pub mod sampling;
pub mod sparsifier;

pub use error::{Error, Result};
