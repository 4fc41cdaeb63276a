//! Desk-scale simulator for large-batch contrastive pretraining strategies:
//! the contrastive, masked-reconstruction and masked-token objectives with
//! analytic gradients, a deterministic multi-worker cluster executing
//! conventional, grouped and batch-accumulated aggregation, communication
//! and memory cost models, a toy dual-encoder trainer, and a pair-cleaning
//! pipeline.

pub mod cli;
pub mod cluster;
pub mod config;
pub mod costmodel;
pub mod datapipe;
pub mod error;
pub mod losses;
pub mod numerics;
pub mod trainer;

pub use error::{Result, SimError};
