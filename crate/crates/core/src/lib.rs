//! Privacy-preserving distributed Gaussian process regression.
//!
//! Agents on an undirected communication graph fit local GP experts, combine
//! them with a product-of-experts rule through secret-shared average
//! consensus, and optionally tune shared hyperparameters the same way.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod consensus;
pub mod data;
pub mod error;
pub mod gpr;
pub mod netsim;
pub mod privacy;
pub mod protocol;
pub mod ring;
pub mod topology;

pub use error::{Error, Result};
