pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distributions;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod network;
pub mod numerics;
pub mod optim;

pub use error::{ArdError, Result};
