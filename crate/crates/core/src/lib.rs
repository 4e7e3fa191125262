//! Retraining-free domain adaptation for binary segmentation.
//!
//! A per-domain external memory stores a wavelet query key and context
//! features (texture, optionally shape) for every observed image. At inference
//! the nearest memory records are retrieved, their context features averaged,
//! and the result conditions an encoder-decoder network at its bottleneck.
//! Adapting to a new domain means filling a new memory; network weights never
//! change after source training.

pub mod archive;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod grid;
pub mod io;
pub mod memory;
pub mod nn;
pub mod pipeline;
pub mod sae;
pub mod segnet;

pub use error::{Error, Result};
pub use grid::{Grid, Mask};
