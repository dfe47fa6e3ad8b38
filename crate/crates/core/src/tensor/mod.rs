//! Dense tensors and reverse-mode automatic differentiation.
//!
//! Everything here is CPU-only, row-major, and deterministic: a forward pass
//! over the same inputs and weights produces bit-identical results because
//! every reduction runs in a fixed order. Training uses `f32`; gradient
//! verification against finite differences runs the same code in `f64`.

mod data;
mod format;
mod graph;

pub use data::{Scalar, TensorData};
pub use format::{read_psmt, read_psmt_file, write_psmt, write_psmt_file, Dtype};
pub use graph::{BatchStats, Graph, Var};
