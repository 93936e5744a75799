//! MPG-Net: a U-shape segmentation network with channel-attention feature
//! refinement on the skip connections and prediction-guided attention on every
//! decoder scale, trained under deep supervision.
//!
//! The crate carries its own reverse-mode differentiation engine
//! ([`engine`]), the two attention blocks ([`blocks`]), the assembled network
//! ([`model`]), the composite cross-entropy + Dice objective and F1 metric
//! ([`loss`]), a synthetic layered-image generator with PGM file I/O
//! ([`data`]), and the Adam-based training, evaluation and ablation drivers
//! ([`train`]).

pub mod blocks;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod labels;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod train;

pub use error::{Error, Result};
