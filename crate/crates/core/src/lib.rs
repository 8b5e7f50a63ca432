//! Multi-view consistent, depth-conditioned diffusion editing of 3D Gaussian
//! splatting scenes, at desk scale.

pub mod attention;
pub mod cli;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod image;
mod kernels;
pub mod pipeline;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
