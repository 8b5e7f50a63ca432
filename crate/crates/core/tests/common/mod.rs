#![allow(dead_code)]

use candle_core::{Device, Tensor as CTensor};
use gsedit::attention::AttentionWeights;
use gsedit::scene::{render, render_gradients, Camera, Gaussian3D, Scene};
use gsedit::Tensor;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_gaussian(r: &mut ChaCha8Rng) -> Gaussian3D {
    let mut q: [f64; 4] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
    if q.iter().all(|v| v.abs() < 1e-3) {
        q[0] = 1.0;
    }
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    Gaussian3D {
        mean: std::array::from_fn(|_| r.random_range(-0.6..0.6)),
        rotation: q.map(|v| v / n),
        log_scale: std::array::from_fn(|_| r.random_range(0.08f64..0.35).ln()),
        opacity_logit: r.random_range(-1.0..2.0),
        color: std::array::from_fn(|_| r.random_range(0.0..1.0)),
    }
}

pub fn random_scene(r: &mut ChaCha8Rng, n: usize) -> Scene {
    let bg = std::array::from_fn(|_| r.random_range(0.0..0.3));
    Scene::new((0..n).map(|_| random_gaussian(r)).collect(), bg).unwrap()
}

pub fn random_camera(r: &mut ChaCha8Rng, size: usize) -> Camera {
    let az: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let el: f64 = r.random_range(-0.4..0.6);
    let eye = Vector3::new(3.0 * el.cos() * az.cos(), 3.0 * el.cos() * az.sin(), 3.0 * el.sin());
    Camera::look_at(eye, Vector3::zeros(), Vector3::z(), size as f64 * 1.2, size, size).unwrap()
}

pub fn random_image(r: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    Tensor::new(
        vec![h, w, 3],
        (0..h * w * 3).map(|_| r.random_range(0.0f32..1.0)).collect(),
    )
    .unwrap()
}

/// Mean squared color error computed directly from a forward render.
pub fn render_loss(scene: &Scene, cam: &Camera, target: &Tensor) -> f64 {
    let out = render(scene, cam);
    let n = out.color.len() as f64;
    out.color
        .iter()
        .zip(target.data())
        .map(|(c, &t)| (c - t as f64).powi(2))
        .sum::<f64>()
        / n
}

#[derive(Debug)]
pub struct GradMismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare every analytic parameter gradient with a central difference. The
/// footprint taper and opacity clamp are only C0, so the step stays small.
pub fn gradient_mismatches(scene: &Scene, cam: &Camera, target: &Tensor, rel: f64, abs: f64) -> Vec<GradMismatch> {
    let (_, grads) = render_gradients(scene, cam, target, None).unwrap();
    let analytic = grads.to_flat();
    let base = scene.to_params();
    let h = 1e-7;
    let mut bad = Vec::new();
    for (i, &a) in analytic.iter().enumerate() {
        let eval = |d: f64| {
            let mut p = base.clone();
            p[i] += d;
            let mut s = scene.clone();
            s.set_params(&p);
            render_loss(&s, cam, target)
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let diff = (a - numeric).abs();
        if diff > abs && diff > rel * a.abs().max(numeric.abs()) {
            bad.push(GradMismatch {
                index: i,
                analytic: a,
                numeric,
            });
        }
    }
    bad
}

/// Dense matrix as rows.
pub type Mat = Vec<Vec<f64>>;

pub fn random_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn to_candle(m: &Mat) -> CTensor {
    let (r, c) = (m.len(), m[0].len());
    let flat: Vec<f32> = m.iter().flatten().map(|&v| v as f32).collect();
    CTensor::from_vec(flat, (r, c), &Device::Cpu).unwrap()
}

pub fn from_candle(t: &CTensor) -> Mat {
    t.to_dtype(candle_core::DType::F32)
        .unwrap()
        .to_vec2::<f32>()
        .unwrap()
        .iter()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

/// Round through f32 so the naive reference sees the same inputs.
pub fn quantize(m: &Mat) -> Mat {
    m.iter().map(|r| r.iter().map(|&v| v as f32 as f64).collect()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

pub struct NaiveWeights {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub heads: usize,
}

impl NaiveWeights {
    pub fn random(r: &mut ChaCha8Rng, d: usize, inner: usize, heads: usize) -> Self {
        Self {
            wq: quantize(&random_mat(r, d, inner)),
            wk: quantize(&random_mat(r, d, inner)),
            wv: quantize(&random_mat(r, d, inner)),
            heads,
        }
    }

    pub fn to_weights(&self) -> AttentionWeights {
        AttentionWeights::new(
            to_candle(&self.wq),
            to_candle(&self.wk),
            to_candle(&self.wv),
            self.heads,
        )
        .unwrap()
    }
}

/// Per-head softmax(q kᵀ / √c) v with explicit loops, heads concatenated.
pub fn naive_attention(zi: &Mat, zj: &Mat, w: &NaiveWeights) -> Mat {
    let (q, k, v) = (matmul(zi, &w.wq), matmul(zj, &w.wk), matmul(zj, &w.wv));
    let inner = w.wq[0].len();
    let c = inner / w.heads;
    let scale = 1.0 / (c as f64).sqrt();
    let mut out = vec![vec![0.0; inner]; zi.len()];
    for h in 0..w.heads {
        let cols = h * c..(h + 1) * c;
        for (a, row) in out.iter_mut().enumerate() {
            let logits: Vec<f64> = (0..zj.len())
                .map(|b| cols.clone().map(|x| q[a][x] * k[b][x]).sum::<f64>() * scale)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for x in cols.clone() {
                row[x] = (0..zj.len()).map(|b| e[b] / s * v[b][x]).sum();
            }
        }
    }
    out
}

/// λ·Attn(e, e) + (1 − λ)/N Σ_k Attn(e, r_k).
pub fn naive_align(ze: &Mat, refs: &[&Mat], w: &NaiveWeights, lambda: f64) -> Mat {
    let own = naive_attention(ze, ze, w);
    let crosses: Vec<Mat> = refs.iter().map(|r| naive_attention(ze, r, w)).collect();
    own.iter()
        .enumerate()
        .map(|(a, row)| {
            row.iter()
                .enumerate()
                .map(|(x, &o)| {
                    let mean = crosses.iter().map(|c| c[a][x]).sum::<f64>() / refs.len() as f64;
                    lambda * o + (1.0 - lambda) * mean
                })
                .collect()
        })
        .collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
