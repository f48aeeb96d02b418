//! Prefetch-aware cross-layer expert scheduling for offloaded mixture-of-experts
//! inference, with a deterministic pipeline simulator and a learned
//! next-layer activation predictor.

pub mod cost;
pub mod error;
pub mod experiment;
pub mod predictor;
pub mod scheduler;
pub mod sim;
mod util;
pub mod workload;

pub use error::{Error, Result};
