//! Recurrent Event Network for temporal knowledge graph extrapolation.

pub mod aggregate;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
