//! Temporal sound localization engine.
//!
//! Visual and audio feature sequences are concatenated per timestep, encoded
//! by a multi-scale transformer with windowed self-attention, and decoded by
//! anchor-free heads into scored `(start, end, label)` intervals. Training
//! uses a focal classification loss and a DIoU boundary loss; predictions
//! are post-processed with soft-NMS and scored by mAP over tIoU thresholds.

pub mod cli;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Result, TslError};
