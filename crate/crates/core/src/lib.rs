#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod dataset_io;
pub mod error;
pub mod field;
pub mod model_io;
pub mod nfd;
mod nn;
pub mod predictor;
pub mod report;
pub mod objective;
pub mod solvers;

pub use error::{Result, ShimError};
