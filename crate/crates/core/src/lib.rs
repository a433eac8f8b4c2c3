pub mod buffers;
pub mod config;
pub mod envs;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod representation;
pub mod rl;
pub mod trainer;
pub mod virtual_tasks;

pub use error::{Error, Result};
