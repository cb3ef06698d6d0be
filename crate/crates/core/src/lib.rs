//! Attention-gated conditional random fields for multi-scale feature fusion,
//! the two-level hierarchical contour network built on them, and the tooling
//! to train, evaluate and verify it at desk scale.
//!
//! Module map:
//! - [`tensor`]: 3-D tensors, convolution kernels, forward ops and a gradient tape.
//! - [`agcrf`]: energies, closed-form mean-field inference, and the unrolled
//!   differentiable inference used inside networks.
//! - [`mhnet`]: the hierarchical network, ablation variants, checkpoints.
//! - [`train`]: class-balanced loss, SGD with momentum, the training loop.
//! - [`oracle`]: brute-force references and gradient checks.
//! - [`evalkit`]: NMS thinning, edge correspondence, ODS/OIS/AP.
//! - [`datagen`]: synthetic scenes with exact boundaries, PGM/PNG I/O.

pub mod agcrf;
pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod kv;
pub mod mhnet;
pub mod oracle;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ConvKernel, Tensor};
