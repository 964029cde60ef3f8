//! Desk-scale laboratory for sparse increment fine-tuning.
//!
//! The crate trains small models by updating only a fixed sparse set of
//! parameter components, selected once from early-batch gradient magnitudes.
//! It ships the supporting machinery end to end: a reverse-mode tape with
//! gradient hooks, a toy model zoo, mask calibration and sparse AdamW,
//! gradient-sparsity diagnostics, subspace descent-bound verification,
//! loss-landscape scans, and bit-exact persistence formats.

pub mod analysis;
pub mod landscape;
pub mod mask;
pub mod models;
pub mod optim;
pub mod persist;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use tape::{GradBufferStats, GradHookReceipt, Tape, TapeError, TensorId, IGNORE_TARGET};
pub use tensor::{ElemType, Tensor};
