//! Saliency ranking by partition.
//!
//! A toy-scale pipeline: a small convolutional encoder produces gridded
//! multi-scale features, a dense pyramid transformer mixes them along rows,
//! columns and scales, N binary partition heads predict for every grid cell
//! whether its instance ranks within the top n, and a partition-to-rank
//! procedure turns those probabilities plus per-cell masks into ranked
//! instances.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod config;
pub mod mask;
pub mod pyramid;
pub mod dpt;
pub mod data_synth;
pub mod heads;
pub mod p2r;
pub mod losses;
pub mod metrics;
pub mod baseline;
pub mod model;
pub mod train;
pub mod eval;
