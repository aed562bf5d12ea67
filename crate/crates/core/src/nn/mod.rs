//! A small CPU neural-network stack for the noise estimator: NHWC tensors,
//! layers with hand-written backward passes, the U-Net itself, an Adam
//! optimizer and the binary checkpoint format.
//!
//! Layers are generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod unet;

pub use params::{GradientTape, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use unet::{Architecture, DenoiserModel, Mode};
