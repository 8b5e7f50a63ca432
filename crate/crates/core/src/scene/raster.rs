//! Tile-based front-to-back alpha compositing and its exact reverse-mode gradient.
//!
//! Per pixel `p`, Gaussians are composited in ascending camera depth with
//!
//! ```text
//! a_i   = min(sigmoid(o_i) * G(m_i), 0.999),  m_i = dᵀ (Σ'_i + 0.3 I)⁻¹ d,  d = p - μ'_i
//! G(m)  = (exp(-m/2) - e^-4.5) / (1 - e^-4.5)   for m < 9, else 0
//! C     = Σ c_i a_i T_i + bg T_N,               T_i = Π_{j<i} (1 - a_j)
//! ```
//!
//! `G` vanishes continuously at the 3σ footprint boundary, so culling outside
//! the footprint introduces no jump in the image.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use super::projection::{projection_jacobian, quat_to_rotation};
use super::{Camera, Scene, PARAMS_PER_GAUSSIAN};
use crate::error::{Error, Result};
use crate::image::snap;
use crate::tensor::Tensor;

pub(crate) const LOW_PASS: f64 = 0.3;
pub(crate) const CUTOFF_MAHALANOBIS_SQ: f64 = 9.0;
pub(crate) const ALPHA_MAX: f64 = 0.999;
const TILE: usize = 16;
const DEPTH_EPS: f64 = 1e-6;
const DEPTH_ALPHA_MIN: f64 = 1e-4;

fn cutoff_value() -> f64 {
    (-0.5 * CUTOFF_MAHALANOBIS_SQ).exp()
}

/// Footprint profile `G(m)`; zero at and beyond the cutoff.
#[inline]
fn footprint(m: f64) -> f64 {
    if m >= CUTOFF_MAHALANOBIS_SQ {
        return 0.0;
    }
    let k = cutoff_value();
    ((-0.5 * m).exp() - k) / (1.0 - k)
}

#[inline]
fn footprint_grad(m: f64) -> f64 {
    -0.5 * (-0.5 * m).exp() / (1.0 - cutoff_value())
}

/// Color, depth and coverage of one camera view.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    /// `H×W×3`, row-major.
    pub color: Vec<f64>,
    /// Alpha-weighted expected camera z; 0 where alpha < 1e-4.
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl RenderedView {
    pub fn color_tensor(&self) -> Tensor {
        let data = self.color.iter().map(|&v| snap(v)).collect();
        Tensor::new(vec![self.height, self.width, 3], data).expect("consistent view size")
    }

    pub fn depth_tensor(&self) -> Tensor {
        let data = self.depth.iter().map(|&v| v as f32).collect();
        Tensor::new(vec![self.height, self.width], data).expect("consistent view size")
    }

    pub fn alpha_tensor(&self) -> Tensor {
        let data = self.alpha.iter().map(|&v| v as f32).collect();
        Tensor::new(vec![self.height, self.width], data).expect("consistent view size")
    }
}

#[derive(Clone, Debug)]
struct Splat {
    index: usize,
    mean: [f64; 2],
    /// Inverse of the filtered 2D covariance, `(a, b, c)` for `[[a, b], [b, c]]`.
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
    /// Inclusive pixel ranges `(x0, x1, y0, y1)`.
    bbox: [usize; 4],
}

fn prepare(scene: &Scene, cam: &Camera) -> Vec<Splat> {
    let mut splats: Vec<Splat> = scene
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(index, g)| {
            let p = super::project_gaussian(g, cam);
            if !p.visible {
                return None;
            }
            let m = p.cov2d + Matrix2::identity() * LOW_PASS;
            let (a, b, c) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
            let det = a * c - b * b;
            if !(det > 0.0) || !det.is_finite() {
                return None;
            }
            let half = 0.5 * (a + c);
            let lmax = half + (0.25 * (a - c).powi(2) + b * b).sqrt();
            let r = CUTOFF_MAHALANOBIS_SQ.sqrt() * lmax.sqrt();
            let (mx, my) = (p.mean2d.x, p.mean2d.y);
            let x0 = (mx - r - 0.5).ceil().max(0.0);
            let x1 = (mx + r - 0.5).floor().min(cam.width as f64 - 1.0);
            let y0 = (my - r - 0.5).ceil().max(0.0);
            let y1 = (my + r - 0.5).floor().min(cam.height as f64 - 1.0);
            if !(x0 <= x1 && y0 <= y1) {
                return None;
            }
            Some(Splat {
                index,
                mean: [mx, my],
                conic: [c / det, -b / det, a / det],
                opacity: g.opacity(),
                color: g.color,
                depth: p.depth,
                bbox: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
            })
        })
        .collect();
    // stable: equal depths keep scene order
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    splats
}

struct TileGrid {
    cols: usize,
    rows: usize,
    /// Indices into the depth-sorted splat list, ascending.
    lists: Vec<Vec<usize>>,
}

impl TileGrid {
    fn build(splats: &[Splat], width: usize, height: usize) -> Self {
        let cols = width.div_ceil(TILE);
        let rows = height.div_ceil(TILE);
        let mut lists = vec![Vec::new(); cols * rows];
        for (si, s) in splats.iter().enumerate() {
            let [x0, x1, y0, y1] = s.bbox;
            for ty in y0 / TILE..=y1 / TILE {
                for tx in x0 / TILE..=x1 / TILE {
                    lists[ty * cols + tx].push(si);
                }
            }
        }
        Self { cols, rows, lists }
    }

    fn pixel_range(
        &self,
        tile: usize,
        width: usize,
        height: usize,
    ) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (tx, ty) = (tile % self.cols, tile / self.cols);
        (
            tx * TILE..((tx + 1) * TILE).min(width),
            ty * TILE..((ty + 1) * TILE).min(height),
        )
    }
}

/// Contribution of one splat at one pixel, recorded for the backward pass.
#[derive(Clone, Copy)]
struct Fragment {
    local: usize,
    alpha: f64,
    clamped: bool,
    g: f64,
    m: f64,
    d: [f64; 2],
    transmittance: f64,
}

#[inline]
fn splat_at(s: &Splat, px: f64, py: f64) -> Option<(f64, f64, [f64; 2], f64, bool)> {
    let d = [px - s.mean[0], py - s.mean[1]];
    let [a, b, c] = s.conic;
    let m = a * d[0] * d[0] + 2.0 * b * d[0] * d[1] + c * d[1] * d[1];
    let g = footprint(m);
    if g <= 0.0 {
        return None;
    }
    let raw = s.opacity * g;
    let clamped = raw > ALPHA_MAX;
    let alpha = if clamped { ALPHA_MAX } else { raw };
    Some((alpha, g, d, m, clamped))
}

/// Render color, depth and alpha for `cam`.
pub fn render(scene: &Scene, cam: &Camera) -> RenderedView {
    let (w, h) = (cam.width, cam.height);
    let splats = prepare(scene, cam);
    let grid = TileGrid::build(&splats, w, h);
    let bg = scene.background_color;

    let tiles: Vec<(usize, Vec<[f64; 5]>)> = (0..grid.cols * grid.rows)
        .into_par_iter()
        .map(|tile| {
            let (xs, ys) = grid.pixel_range(tile, w, h);
            let list = &grid.lists[tile];
            let mut out = Vec::with_capacity(xs.len() * ys.len());
            for y in ys.clone() {
                for x in xs.clone() {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t = 1.0;
                    let mut col = [0.0; 3];
                    let mut z = 0.0;
                    for &si in list {
                        let s = &splats[si];
                        if let Some((alpha, ..)) = splat_at(s, px, py) {
                            let wgt = alpha * t;
                            for k in 0..3 {
                                col[k] += wgt * s.color[k];
                            }
                            z += wgt * s.depth;
                            t *= 1.0 - alpha;
                        }
                    }
                    let acc = 1.0 - t;
                    for k in 0..3 {
                        col[k] += t * bg[k];
                    }
                    let depth = if acc < DEPTH_ALPHA_MIN {
                        0.0
                    } else {
                        z / acc.max(DEPTH_EPS)
                    };
                    out.push([col[0], col[1], col[2], depth, acc]);
                }
            }
            (tile, out)
        })
        .collect();

    let mut view = RenderedView {
        width: w,
        height: h,
        color: vec![0.0; w * h * 3],
        depth: vec![0.0; w * h],
        alpha: vec![0.0; w * h],
    };
    for (tile, out) in tiles {
        let (xs, ys) = grid.pixel_range(tile, w, h);
        let mut it = out.into_iter();
        for y in ys {
            for x in xs.clone() {
                let v = it.next().expect("tile buffer sized to its pixels");
                let p = y * w + x;
                view.color[3 * p..3 * p + 3].copy_from_slice(&v[..3]);
                view.depth[p] = v[3];
                view.alpha[p] = v[4];
            }
        }
    }
    view
}

/// Gradient of the loss with respect to one Gaussian's parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub mean: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneGradients {
    pub gaussians: Vec<GaussianGrad>,
}

impl SceneGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            gaussians: vec![GaussianGrad::default(); n],
        }
    }

    /// Flattened in the same order as [`Scene::to_params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.gaussians.len() * PARAMS_PER_GAUSSIAN);
        for g in &self.gaussians {
            p.extend_from_slice(&g.mean);
            p.extend_from_slice(&g.rotation);
            p.extend_from_slice(&g.log_scale);
            p.push(g.opacity_logit);
            p.extend_from_slice(&g.color);
        }
        p
    }

    pub fn accumulate(&mut self, other: &SceneGradients, weight: f64) {
        for (a, b) in self.gaussians.iter_mut().zip(&other.gaussians) {
            for k in 0..3 {
                a.mean[k] += weight * b.mean[k];
                a.log_scale[k] += weight * b.log_scale[k];
                a.color[k] += weight * b.color[k];
            }
            for k in 0..4 {
                a.rotation[k] += weight * b.rotation[k];
            }
            a.opacity_logit += weight * b.opacity_logit;
        }
    }
}

#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

fn check_target(cam: &Camera, target: &Tensor, mask: Option<&Tensor>) -> Result<()> {
    let want = [cam.height, cam.width, 3];
    if target.shape() != want {
        return Err(Error::ShapeMismatch {
            expected: want.to_vec(),
            actual: target.shape().to_vec(),
        });
    }
    if let Some(m) = mask {
        m.ensure_shape(&[cam.height, cam.width])?;
    }
    Ok(())
}

/// Loss `L = Σ_p m_p ‖C(p) − target(p)‖² / (3 Σ_p m_p)` and its gradient with
/// respect to every Gaussian parameter. Without a mask every pixel counts.
pub fn render_gradients(
    scene: &Scene,
    cam: &Camera,
    target: &Tensor,
    mask: Option<&Tensor>,
) -> Result<(f64, SceneGradients)> {
    check_target(cam, target, mask)?;
    let (w, h) = (cam.width, cam.height);
    let splats = prepare(scene, cam);
    let grid = TileGrid::build(&splats, w, h);
    let bg = scene.background_color;
    let tdata = target.data();
    let weight_of = |p: usize| mask.map_or(1.0, |m| if m.data()[p] > 0.5 { 1.0 } else { 0.0 });
    let supervised: f64 = (0..w * h).map(weight_of).sum();
    if supervised == 0.0 {
        return Ok((0.0, SceneGradients::zeros(scene.len())));
    }
    let norm = 1.0 / (3.0 * supervised);

    let per_tile: Vec<(f64, Vec<SplatGrad>)> = (0..grid.cols * grid.rows)
        .into_par_iter()
        .map(|tile| {
            let (xs, ys) = grid.pixel_range(tile, w, h);
            let list = &grid.lists[tile];
            let mut grads = vec![SplatGrad::default(); list.len()];
            let mut frags: Vec<Fragment> = Vec::with_capacity(list.len());
            let mut loss = 0.0;
            for y in ys.clone() {
                for x in xs.clone() {
                    let p = y * w + x;
                    let mw = weight_of(p);
                    if mw == 0.0 {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    frags.clear();
                    let mut t = 1.0;
                    let mut col = [0.0; 3];
                    for (local, &si) in list.iter().enumerate() {
                        let s = &splats[si];
                        if let Some((alpha, g, d, m, clamped)) = splat_at(s, px, py) {
                            for k in 0..3 {
                                col[k] += alpha * t * s.color[k];
                            }
                            frags.push(Fragment {
                                local,
                                alpha,
                                clamped,
                                g,
                                m,
                                d,
                                transmittance: t,
                            });
                            t *= 1.0 - alpha;
                        }
                    }
                    let mut dl_dc = [0.0; 3];
                    for k in 0..3 {
                        col[k] += t * bg[k];
                        let r = col[k] - tdata[3 * p + k] as f64;
                        loss += mw * r * r * norm;
                        dl_dc[k] = 2.0 * mw * r * norm;
                    }
                    // walk back to front; `behind` is the color seen through fragment i
                    let mut behind = bg;
                    for f in frags.iter().rev() {
                        let s = &splats[list[f.local]];
                        let gr = &mut grads[f.local];
                        let wgt = f.alpha * f.transmittance;
                        let mut dl_da = 0.0;
                        for k in 0..3 {
                            gr.color[k] += dl_dc[k] * wgt;
                            dl_da += dl_dc[k] * (s.color[k] - behind[k]);
                        }
                        dl_da *= f.transmittance;
                        for k in 0..3 {
                            behind[k] = f.alpha * s.color[k] + (1.0 - f.alpha) * behind[k];
                        }
                        if f.clamped {
                            continue;
                        }
                        gr.opacity += dl_da * f.g;
                        let dl_dm = dl_da * s.opacity * footprint_grad(f.m);
                        let [a, b, c] = s.conic;
                        let [dx, dy] = f.d;
                        // m = a dx² + 2b dx dy + c dy², d = p - mean
                        gr.mean[0] -= dl_dm * 2.0 * (a * dx + b * dy);
                        gr.mean[1] -= dl_dm * 2.0 * (b * dx + c * dy);
                        gr.conic[0] += dl_dm * dx * dx;
                        gr.conic[1] += dl_dm * 2.0 * dx * dy;
                        gr.conic[2] += dl_dm * dy * dy;
                    }
                }
            }
            (loss, grads)
        })
        .collect();

    let mut loss = 0.0;
    let mut acc = vec![SplatGrad::default(); splats.len()];
    for (tile, (l, grads)) in per_tile.into_iter().enumerate() {
        loss += l;
        for (local, g) in grads.into_iter().enumerate() {
            let a = &mut acc[grid.lists[tile][local]];
            for k in 0..2 {
                a.mean[k] += g.mean[k];
            }
            for k in 0..3 {
                a.conic[k] += g.conic[k];
                a.color[k] += g.color[k];
            }
            a.opacity += g.opacity;
        }
    }

    let mut out = SceneGradients::zeros(scene.len());
    for (s, g2) in splats.iter().zip(&acc) {
        out.gaussians[s.index] = backprop_projection(scene, cam, s, g2);
    }
    Ok((loss, out))
}

/// Chain the image-plane gradients of one splat back to its 3D parameters.
fn backprop_projection(scene: &Scene, cam: &Camera, s: &Splat, g2: &SplatGrad) -> GaussianGrad {
    let gs = &scene.gaussians[s.index];
    let mut out = GaussianGrad {
        color: g2.color,
        opacity_logit: g2.opacity * s.opacity * (1.0 - s.opacity),
        ..Default::default()
    };

    // conic A = M⁻¹, M = cov2d + 0.3 I; dL/dM = -A Ĝ A with Ĝ the symmetric
    // full-matrix gradient of A (off-diagonal share split in half)
    let a_mat = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
    let g_a = Matrix2::new(g2.conic[0], 0.5 * g2.conic[1], 0.5 * g2.conic[1], g2.conic[2]);
    let g_cov = -(a_mat * g_a * a_mat);

    let t = cam.world_to_camera(&Vector3::from(gs.mean));
    let j = projection_jacobian(cam, &t);
    let w = cam.rotation;
    let r = quat_to_rotation(&gs.rotation);
    let scale = Vector3::new(gs.log_scale[0].exp(), gs.log_scale[1].exp(), gs.log_scale[2].exp());
    let rs = r * Matrix3::from_diagonal(&scale);
    let sigma = rs * rs.transpose();
    let v = w * sigma * w.transpose();

    // cov2d = J V Jᵀ
    let g_j: Matrix2x3<f64> = 2.0 * g_cov * j * v;
    let g_v: Matrix3<f64> = j.transpose() * g_cov * j;
    let g_sigma = w.transpose() * g_v * w;

    // Σ = (R S)(R S)ᵀ
    let g_rs = (g_sigma + g_sigma.transpose()) * rs;
    let g_r = g_rs * Matrix3::from_diagonal(&scale);
    for k in 0..3 {
        let ds: f64 = (0..3).map(|i| g_rs[(i, k)] * r[(i, k)]).sum();
        out.log_scale[k] = ds * scale[k];
    }
    out.rotation = quat_backward(&gs.rotation, &g_r);

    // pixel mean and Jacobian both depend on the camera-frame mean t
    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let (gu, gv) = (g2.mean[0], g2.mean[1]);
    let mut g_t = Vector3::new(gu * fx * iz, gv * fy * iz, -gu * fx * t.x * iz2 - gv * fy * t.y * iz2);
    g_t.x += g_j[(0, 2)] * (-fx * iz2);
    g_t.y += g_j[(1, 2)] * (-fy * iz2);
    g_t.z += g_j[(0, 0)] * (-fx * iz2)
        + g_j[(0, 2)] * (2.0 * fx * t.x * iz2 * iz)
        + g_j[(1, 1)] * (-fy * iz2)
        + g_j[(1, 2)] * (2.0 * fy * t.y * iz2 * iz);
    let g_mean = w.transpose() * g_t;
    out.mean = [g_mean.x, g_mean.y, g_mean.z];
    out
}

/// Gradient with respect to the raw (unnormalized) quaternion given `dL/dR`.
fn quat_backward(q: &[f64; 4], g_r: &Matrix3<f64>) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    let g = |i: usize, j: usize| g_r[(i, j)];
    let gw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let gx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let gy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let gz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let gn = [gw, gx, gy, gz];
    let qn = [w, x, y, z];
    let dot: f64 = gn.iter().zip(&qn).map(|(a, b)| a * b).sum();
    [0, 1, 2, 3].map(|i| (gn[i] - qn[i] * dot) / n)
}
