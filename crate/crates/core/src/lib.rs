//! Label-free cell recognition from prior self-activation maps.
//!
//! The pipeline trains a small CNN on a self-supervised proxy task, reads
//! activation maps out of its shallow layers via gradients, clusters them
//! into pseudo masks, derives Voronoi point supervision, and trains
//! downstream segmentation/detection networks — no manual annotations
//! anywhere. See the `pipeline` module for the end-to-end driver and
//! `bin/psm.rs` for the CLI.

pub mod downstream;
pub mod error;
pub mod grid;
pub mod imageio;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod proxy;
pub mod psm;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
