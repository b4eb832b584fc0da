pub mod difficulty;
pub mod dist;
pub mod error;
pub mod idts;
pub mod latf;
pub mod loss;

pub use error::{CoreError, Result};
pub mod data;
pub mod config;
pub mod eval;
pub mod trainer;
pub mod analysis;
