pub mod aggregation;
pub mod client;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod network;
pub mod par;
pub mod secure_agg;
pub mod seed;

pub use error::{Error, Result};
