//! Feedforward-tied energy-based models (ff-EBMs): block-wise equilibrium
//! inference, BP-EP gradient chaining (implicit and explicit), an implicit
//! differentiation baseline, gradient-equivalence diagnostics, and a
//! desk-scale training harness.
//!
//! - [`tensor`] — dense f32 kernels and their hand-written adjoints
//! - [`energy`] — deep Hopfield block energies and analytic gradients
//! - [`feedforward`] — tie transformations, softmax readout, VJPs
//! - [`solver`] — free / nudged fixed-point relaxation
//! - [`model`] — model assembly, GOE init, inference, checkpoints
//! - [`engines`] — EP chaining, implicit differentiation, FD oracle
//! - [`gdu`] — truncated-gradient traces and cosine reports
//! - [`data`] — MNIST IDX / CIFAR-10 binary / synthetic datasets
//! - [`train`] — Adam, cosine schedule, training loop, split benchmark

pub mod data;
pub mod energy;
pub mod engines;
pub mod error;
pub mod feedforward;
pub mod gdu;
pub mod model;
pub mod presets;
pub mod solver;
pub mod tensor;
pub mod threads;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
