//! Simulator for fusion-aware near-sensor filtering of multimodal streams.
//!
//! The three model tiers are trained in order: a server late-fusion
//! classifier ([`fusionmodel`]), per-modality near-sensor filters supervised
//! by filter-out-safe labels derived from the server ([`foslabeler`],
//! [`nearsensor`]), and a compact edge fusion model that reads the filters'
//! scores ([`edgecompact`]). [`metrics`] and [`energymodel`] turn the trained
//! system into data-efficiency/quality-loss curves and per-pipeline energy
//! breakdowns; [`harness`] drives everything from one config file.

pub mod datagen;
pub mod edgecompact;
pub mod energymodel;
pub mod error;
pub mod foslabeler;
pub mod fusionmodel;
pub mod harness;
pub mod metrics;
pub mod nearsensor;
pub mod nncore;
pub mod par;
pub mod seed;

pub use error::{Error, Result};
