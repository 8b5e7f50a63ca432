//! Noise-prediction backends: an exact Gaussian-mixture oracle and a small
//! trainable attention network with a depth-conditioning branch.

mod checkpoint;
mod im2col;
mod oracle;
mod toy;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use oracle::{MixtureComponent, MixtureOracle};
pub use toy::{ToyConfig, ToyDenoiser};
pub use train::{train_toy_denoiser, TrainConfig, TrainReport, TrainingSample};

use crate::attention::AlignmentConfig;
use crate::diffusion::{Condition, LatentCode};
use crate::error::Result;
use crate::tensor::Tensor;

/// Predicts the noise component of a batch of latents.
///
/// `timestep` is a training step in `0..=T`. `depths` is either empty or holds
/// one `h × w` depth map per latent, already resized to the latent grid.
/// Implementations must be deterministic and return one tensor per latent,
/// shaped like it.
pub trait Denoiser: Sync {
    fn predict(
        &self,
        batch: &[LatentCode],
        timestep: usize,
        cond: Condition,
        depths: &[Tensor],
        align: &AlignmentConfig,
    ) -> Result<Vec<Tensor>>;
}
