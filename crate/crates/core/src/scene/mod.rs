//! Explicit 3D Gaussian scene, differentiable tile rasterizer and scene fitting.

mod camera;
pub mod io;
mod optimize;
mod projection;
mod raster;

pub use camera::Camera;
pub use optimize::{optimize_scene, psnr, OptimizeConfig, OptimizeReport, ParamGroups, View};
pub use projection::{covariance_from_rs, project_gaussian, quat_to_rotation, Projection};
pub use raster::{render, render_gradients, GaussianGrad, RenderedView, SceneGradients};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of scalar parameters carried by one Gaussian.
pub const PARAMS_PER_GAUSSIAN: usize = 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian3D {
    pub mean: [f64; 3],
    /// Unit quaternion, `(w, x, y, z)`.
    #[serde(rename = "quaternion")]
    pub rotation: [f64; 4],
    /// Log of the per-axis standard deviation.
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

impl Gaussian3D {
    pub fn isotropic(mean: [f64; 3], std: f64, opacity: f64, color: [f64; 3]) -> Self {
        let ls = std.ln();
        Self {
            mean,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [ls; 3],
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn normalize_rotation(&mut self) {
        let n = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 && n.is_finite() {
            self.rotation.iter_mut().for_each(|v| *v /= n);
        } else {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        }
    }

    fn validate(&self, i: usize) -> Result<()> {
        let finite = self
            .mean
            .iter()
            .chain(&self.rotation)
            .chain(&self.log_scale)
            .chain(&self.color)
            .chain(std::iter::once(&self.opacity_logit))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite(format!("gaussian {i}")));
        }
        let qn: f64 = self.rotation.iter().map(|v| v * v).sum();
        if qn < 1e-12 {
            return Err(Error::invalid(format!("gaussian {i} has a zero quaternion")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub gaussians: Vec<Gaussian3D>,
    pub background_color: [f64; 3],
}

impl Scene {
    pub fn new(gaussians: Vec<Gaussian3D>, background_color: [f64; 3]) -> Result<Self> {
        let s = Self {
            gaussians,
            background_color,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gaussians.is_empty() {
            return Err(Error::invalid("scene has no gaussians"));
        }
        for (i, g) in self.gaussians.iter().enumerate() {
            g.validate(i)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Radius of the bounding sphere of the Gaussian means around their centroid.
    pub fn extent(&self) -> f64 {
        let n = self.gaussians.len() as f64;
        let mut c = [0.0; 3];
        for g in &self.gaussians {
            for k in 0..3 {
                c[k] += g.mean[k] / n;
            }
        }
        let r = self
            .gaussians
            .iter()
            .map(|g| (0..3).map(|k| (g.mean[k] - c[k]).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        if r > 0.0 {
            r
        } else {
            1.0
        }
    }

    /// Flat parameter vector, [`PARAMS_PER_GAUSSIAN`] entries per Gaussian in the
    /// order mean, quaternion, log-scale, opacity logit, color.
    pub fn to_params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.len() * PARAMS_PER_GAUSSIAN);
        for g in &self.gaussians {
            p.extend_from_slice(&g.mean);
            p.extend_from_slice(&g.rotation);
            p.extend_from_slice(&g.log_scale);
            p.push(g.opacity_logit);
            p.extend_from_slice(&g.color);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.len() * PARAMS_PER_GAUSSIAN);
        for (g, c) in self.gaussians.iter_mut().zip(p.chunks_exact(PARAMS_PER_GAUSSIAN)) {
            g.mean.copy_from_slice(&c[0..3]);
            g.rotation.copy_from_slice(&c[3..7]);
            g.log_scale.copy_from_slice(&c[7..10]);
            g.opacity_logit = c[10];
            g.color.copy_from_slice(&c[11..14]);
        }
    }

    /// Apply a rigid world transform `x -> r x + t` to every Gaussian.
    pub fn transformed(&self, r: &nalgebra::Rotation3<f64>, t: &nalgebra::Vector3<f64>) -> Scene {
        let qr = nalgebra::UnitQuaternion::from_rotation_matrix(r);
        let gaussians = self
            .gaussians
            .iter()
            .map(|g| {
                let m = r * nalgebra::Vector3::from(g.mean) + t;
                let q = nalgebra::Quaternion::new(g.rotation[0], g.rotation[1], g.rotation[2], g.rotation[3]);
                let q = qr.quaternion() * q;
                Gaussian3D {
                    mean: [m.x, m.y, m.z],
                    rotation: [q.w, q.i, q.j, q.k],
                    ..g.clone()
                }
            })
            .collect();
        Scene {
            gaussians,
            background_color: self.background_color,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}
