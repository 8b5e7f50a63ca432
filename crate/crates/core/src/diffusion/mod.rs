//! Deterministic DDIM: schedule, inversion, guided denoising.

mod ddim;
mod schedule;

pub use ddim::{ddim_transfer, denoise_step, edit_batch, guided_noise, invert_batch, invert_step, InversionMode};
pub use schedule::{build_schedule, NoiseSchedule, BETA_END, BETA_START};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Per-view latent tensor `C×h×w` at a position of the DDIM grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub data: Tensor,
    /// Index into [`NoiseSchedule::timestep_grid`].
    pub timestep: usize,
    pub view_id: usize,
}

impl LatentCode {
    pub fn new(data: Tensor, timestep: usize, view_id: usize) -> Self {
        Self {
            data,
            timestep,
            view_id,
        }
    }
}

/// Discrete conditioning label. Label 0 is the null condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Condition(pub u32);

impl Condition {
    pub const NULL: Condition = Condition(0);

    pub fn is_null(self) -> bool {
        self.0 == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub omega: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { omega: 1.0 }
    }
}
