//! QRNN language model with inference-time structured filter pruning.
//!
//! A pre-trained QRNN can be shrunk to a chosen FLOPs operating point by
//! removing whole filters (tied across `W_z`, `W_f`, `W_o`), selected by
//! random choice, filter norm, mean activation, or learned hard concrete
//! gates. Lost quality can be partly recovered with per-layer rank-1 weight
//! updates.

#![allow(clippy::needless_range_loop, clippy::type_complexity)]

pub mod data;
pub mod eval;
pub mod gates;
pub mod grad;
pub mod model;
pub mod pruning;
pub mod rng;
pub mod sru;
pub mod storage;
pub mod tensor;
pub mod train;

pub use model::{Gate, LayerState, ModelConfig, ModelError, QrnnLayerWeights, QrnnModel};
pub use tensor::{Matrix, OpCounter, Real, TensorError};
