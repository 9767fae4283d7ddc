//! Finds image regions that a contrastive image-text encoder relies on as
//! shortcuts, then retrains the encoder with a region-level objective.

#[cfg(feature = "cli")]
pub mod cli;
pub mod cluster;
pub mod config;
pub mod dataset;
pub mod discover;
pub mod embedding;
pub mod error;
pub mod evalgen;
pub mod format;
pub mod mitigate;
pub mod zeroshot;

pub use error::{RavlError, Result};
