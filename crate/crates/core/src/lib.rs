//! Binary neural networks with periodic binarization.
//!
//! Latent weights are binarized with the square wave `Sign(sin(omega0 * w))`
//! and trained through the surrogate `omega0 * cos(omega0 * w)`. The crate
//! bundles a small reverse-mode autodiff engine, the binarizers, closed-form
//! quantization-error analytics, bit-packed XNOR/popcount kernels, small
//! reference architectures, and a two-stage training pipeline.

pub mod autodiff;
pub mod bitkernel;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod im2col;
pub mod layers;
pub mod linalg;
pub mod packing;
pub mod qe;
pub mod quantization;
pub mod tensor;
pub mod training;

pub use autodiff::{CustomGrad, CustomOpId, Tape, Var};
pub use error::{Error, Result};
pub use layers::{Architecture, Model, ModelSpec, Stage};
pub use qe::{LaplaceModel, QeReport};
pub use quantization::{BinarizedTensor, Method, QuantSpec, Scaling};
pub use tensor::Tensor;
