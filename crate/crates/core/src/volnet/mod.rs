//! Residual 3D convolutional regressor with exact reverse-mode gradients.
//!
//! The network is a fixed feed-forward pipeline (stem, residual stages,
//! global average pool, one linear output) with ReLU activations and no
//! normalization layers. All arithmetic is 64-bit.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod model;
mod net;
mod spec;
pub mod tensor;
pub mod train;

pub use adam::{adam_step, AdamState};
pub use model::{mse, ModelState, Provenance, TargetNorm};
pub use net::{Cache, Net, ParamBlock};
pub use spec::{NetSpec, StageSpec, StemSpec};
pub use tensor::{conv3d_forward, ConvGeom, Tensor};
pub use train::{train, EpochLoss, Sample, TrainConfig, TrainOutcome};
