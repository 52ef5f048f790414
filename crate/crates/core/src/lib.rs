//! Convolutional CSI-feedback autoencoders for FDD massive MIMO.
//!
//! The crate is `no_std` + `alloc`. It holds the numerical side of the
//! codec laboratory: dense 4-D tensors, the layer kernels, a static-graph
//! reverse-mode differentiator, the ConvCsiNet / ShuffleCsiNet graphs, an
//! analytic parameter/FLOP counter, the angular-delay channel pipeline with
//! its evaluation metrics, and ADAM training. File IO and the command line
//! live in the `csinet` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod channel;
pub mod checks;
pub mod codec;
pub mod complexity;
mod error;
pub mod layers;
pub mod models;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{mat_mul, CMatrix, Matrix, Shape4, Tensor4};
