use serde::{Deserialize, Serialize};

use super::{render_gradients, Camera, Scene, SceneGradients, PARAMS_PER_GAUSSIAN};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One supervised view: camera, `H×W×3` target and optional `H×W` binary mask.
#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera,
    pub target: Tensor,
    pub mask: Option<Tensor>,
}

/// Which parameter groups receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroups {
    pub mean: bool,
    pub rotation: bool,
    pub log_scale: bool,
    pub opacity: bool,
    pub color: bool,
}

impl ParamGroups {
    pub const ALL: ParamGroups = ParamGroups {
        mean: true,
        rotation: true,
        log_scale: true,
        opacity: true,
        color: true,
    };

    pub const COLOR_ONLY: ParamGroups = ParamGroups {
        mean: false,
        rotation: false,
        log_scale: false,
        opacity: false,
        color: true,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeConfig {
    pub steps: usize,
    /// Mean step size as a fraction of the scene extent.
    pub lr_mean: f64,
    pub lr_rotation: f64,
    pub lr_log_scale: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub groups: ParamGroups,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr_mean: 1.6e-3,
            lr_rotation: 1e-3,
            lr_log_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_color: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            groups: ParamGroups::ALL,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss evaluated before each step, plus the loss after the last step.
    pub history: Vec<f64>,
}

fn total_loss(scene: &Scene, views: &[View]) -> Result<(f64, SceneGradients)> {
    let mut grads = SceneGradients::zeros(scene.len());
    let mut loss = 0.0;
    let w = 1.0 / views.len() as f64;
    for v in views {
        let (l, g) = render_gradients(scene, &v.camera, &v.target, v.mask.as_ref())?;
        loss += w * l;
        grads.accumulate(&g, w);
    }
    Ok((loss, grads))
}

/// Fit `scene` to the targets with Adam, minimizing the mean masked L2 error
/// over all views. Returns the lowest-loss parameters seen, so the final loss
/// never exceeds the initial one.
pub fn optimize_scene(scene: &Scene, views: &[View], cfg: &OptimizeConfig) -> Result<(Scene, OptimizeReport)> {
    scene.validate()?;
    if views.is_empty() {
        return Err(Error::invalid("optimize_scene needs at least one view"));
    }
    for v in views {
        v.camera.validate()?;
        let want = [v.camera.height, v.camera.width, 3];
        if v.target.shape() != want {
            return Err(Error::ShapeMismatch {
                expected: want.to_vec(),
                actual: v.target.shape().to_vec(),
            });
        }
        if let Some(m) = &v.mask {
            m.ensure_shape(&want[..2])?;
        }
    }

    let extent = scene.extent();
    let mut lr = [0.0; PARAMS_PER_GAUSSIAN];
    let g = cfg.groups;
    let on = |flag: bool, v: f64| if flag { v } else { 0.0 };
    lr[0..3].fill(on(g.mean, cfg.lr_mean * extent));
    lr[3..7].fill(on(g.rotation, cfg.lr_rotation));
    lr[7..10].fill(on(g.log_scale, cfg.lr_log_scale));
    lr[10] = on(g.opacity, cfg.lr_opacity);
    lr[11..14].fill(on(g.color, cfg.lr_color));

    let mut current = scene.clone();
    let mut params = current.to_params();
    let mut m1 = vec![0.0; params.len()];
    let mut m2 = vec![0.0; params.len()];
    let mut best = (f64::INFINITY, current.clone());
    let mut history = Vec::with_capacity(cfg.steps + 1);

    for step in 1..=cfg.steps {
        let (loss, grads) = total_loss(&current, views)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("scene optimization loss".into()));
        }
        history.push(loss);
        if loss < best.0 {
            best = (loss, current.clone());
        }
        let grad = grads.to_flat();
        let bc1 = 1.0 - cfg.beta1.powi(step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let rate = lr[i % PARAMS_PER_GAUSSIAN];
            if rate == 0.0 {
                continue;
            }
            m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * grad[i];
            m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            *p -= rate * (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + cfg.eps);
        }
        current.set_params(&params);
        for gs in &mut current.gaussians {
            gs.normalize_rotation();
            for c in &mut gs.color {
                *c = c.clamp(0.0, 1.0);
            }
            for l in &mut gs.log_scale {
                *l = l.clamp(-12.0, 6.0);
            }
        }
        params = current.to_params();
    }

    let (final_loss, _) = total_loss(&current, views)?;
    history.push(final_loss);
    if final_loss < best.0 {
        best = (final_loss, current);
    }
    let initial_loss = history[0];
    Ok((
        best.1,
        OptimizeReport {
            initial_loss,
            final_loss: best.0,
            history,
        },
    ))
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.len().max(1) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}
