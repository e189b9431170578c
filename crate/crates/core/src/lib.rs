//! Keyword spotting engine: MFCC front-end, res8-family residual CNNs,
//! L1-sparsified training, network-slimming channel pruning, a portable
//! model format and a latency benchmark harness.

pub mod audio;
pub mod bench;
pub mod dataset;
pub mod engine;
mod error;
pub mod eval;
pub mod features;
pub mod nn;
pub mod slim;
pub mod store;
pub mod synth;
pub mod train;

pub use error::{KwsError, Result};
