//! Volumetric segmentation toolkit.
//!
//! End-to-end 3D U-Net pipeline for binary volume segmentation: dense
//! tensors with reverse-mode autodiff, the 3D layer zoo (convolution,
//! transposed convolution, max pooling, batch norm), a configurable U-Net,
//! Adam training, volume I/O (SRV and NIfTI-1), synthetic ellipsoid
//! phantoms, and overlap metrics (Dice, sensitivity, PPV, IoU).
//!
//! Everything runs on the CPU. All randomness is seeded through a named
//! splitmix64 generator, and every op has a bitwise-deterministic
//! single-threaded execution path.

pub mod gradcheck;
pub mod ioutil;
pub mod metrics;
pub mod phantom;
pub mod train;
pub mod unet;
pub mod nn;
pub mod tensor;
pub mod volume;

pub use metrics::{ConfusionCounts, MetricsReport};
pub use train::{AdamState, Dataset, History, TrainConfig};
pub use unet::{Model, UNetConfig};
pub use tensor::{Element, Tape, Tensor, TensorError, TensorId};
pub use volume::{BoundingBox, Mask, Volume};
