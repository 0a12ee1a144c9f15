//! Deterministic federated-learning simulator for studying sparse Byzantine
//! attacks against robust aggregation rules.

pub mod aggregate;
pub mod attack;
pub mod data;
pub mod error;
pub mod linalg;
pub mod model;
pub mod prune;
pub mod sim;

pub use error::{Error, Result};
