//! Task-vector arithmetic over neural-network checkpoints.

pub mod coeff_search;
pub mod error;
pub mod eval_lab;
pub mod mini_net;
pub mod task_suite;
pub mod tensor_store;
pub mod vector_arith;

pub use error::{Error, Result};
