//! Config-driven orchestration: `train-all` runs the three training steps
//! per replicate seed and persists every model; the report commands reload
//! them and write the tradeoff, energy and compaction results.

mod config;
mod manifest;
mod pipeline;
mod reports;

pub use config::*;
pub use manifest::*;
pub use pipeline::*;
pub use reports::*;
