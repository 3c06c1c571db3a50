//! Coordinate regression as classification.
//!
//! A keypoint coordinate on an `S`-pixel axis is treated as one of `S`
//! classes. A small U-Net produces a single-channel feature map; the head
//! pools it into several scales and reduces each pooled map per axis into
//! x and y logit vectors. Training scores every scale with softmax cross
//! entropy and sums the weighted terms (MSCE), so near-misses share the
//! coarse-scale reward that an exact hit gets.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: dense `f64` storage, 2×2 pooling, per-axis reduction, and
//!   their backward passes.
//! - [`loss`]: softmax cross entropy, multiscale softmax cross entropy, the
//!   sigmoid + squared error baseline, and the 1-D loss landscape sampler.
//! - [`net`]: the U-Net backbone, the multiscale head, decoding, and JSON
//!   checkpoints.
//! - [`synth`]: the deterministic fundus-like image generator and its binary
//!   container.
//! - [`trainer`]: SGD with exponential decay and early stopping, R-AED, and
//!   evaluation.
//! - [`ablation`]: the nine-cell loss/network/batch comparison grid.
//! - [`gradcheck`]: finite-difference verification of every backward pass.

pub mod ablation;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod net;
pub mod seeding;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use loss::{LossConfig, LossKind, ScaleTarget};
pub use net::{HeadConfig, HeadOutput, NetConfig, NetParams};
pub use synth::{CoordLabel, Dataset, Sample, SynthSpec};
pub use tensor::{PoolKind, ReduceKind, Tensor};
pub use trainer::{Evaluation, Monitor, RunRecord, TrainConfig, DESK_LR0};
