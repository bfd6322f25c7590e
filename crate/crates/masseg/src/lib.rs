//! Volumetric breast-mass segmentation toolkit: speckle denoising, a patch
//! pipeline over synthetic phantoms, 2-D / 3-D / dual-path U-nets with
//! hand-written gradients, recursive-downsampling inference, and shape
//! evaluation.
//!
//! Start with the runnable programs in `examples/`; the `masseg` binary
//! wires the same library calls into reproducible command-line runs.

pub mod cli;
pub mod denoise;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod models;
pub mod ops;
pub mod tensor;
pub mod training;
pub mod volumes;

pub use error::{MassegError, Result};
pub use tensor::{Scalar, Tensor};

pub use cli::run_cli;
