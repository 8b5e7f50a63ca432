use crate::error::Result;
use crate::image::resize_bilinear;
use crate::tensor::Tensor;

/// Coverage below which a pixel counts as background.
pub const DEPTH_ALPHA_MIN: f32 = 1e-4;

/// Per-image min-max normalization of depth to `[0, 1]` over covered pixels;
/// background pixels are set to 1 (far).
pub fn normalize_depth(depth: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    depth.ensure_same_shape(alpha)?;
    let covered = || {
        depth
            .data()
            .iter()
            .zip(alpha.data())
            .filter(|(_, &a)| a >= DEPTH_ALPHA_MIN)
            .map(|(&d, _)| d)
    };
    let lo = covered().fold(f32::INFINITY, f32::min);
    let hi = covered().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let data = depth
        .data()
        .iter()
        .zip(alpha.data())
        .map(|(&d, &a)| {
            if a < DEPTH_ALPHA_MIN {
                1.0
            } else if span > 0.0 {
                (d - lo) / span
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(depth.shape().to_vec(), data)
}

/// Normalized depth resized to the `size × size` latent grid.
pub fn depth_condition(depth: &Tensor, alpha: &Tensor, size: usize) -> Result<Tensor> {
    let n = normalize_depth(depth, alpha)?;
    let (h, w) = (n.shape()[0], n.shape()[1]);
    Tensor::new(vec![size, size], resize_bilinear(n.data(), h, w, size, size))
}
