//! Shared-gate ReLU networks, a secure-inference cost model, and a
//! three-party secret-sharing simulator whose message ledger reconciles with
//! that model.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod grouping;
pub mod io_util;
pub mod model;
pub mod mpc;
pub mod relu_variants;
pub mod tensor;
pub mod train;
pub mod tv;

pub use error::{Error, Result};
