use serde::{Deserialize, Serialize};

use super::{Condition, GuidanceConfig, LatentCode, NoiseSchedule};
use crate::attention::AlignmentConfig;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Move a latent between two noise levels along the deterministic DDIM path:
///
/// `z' = √ᾱ' (z − √(1−ᾱ) ε) / √ᾱ + √(1−ᾱ') ε`
///
/// Arithmetic is carried out in `f64` per element and stored as `f32`.
pub fn ddim_transfer(z: &Tensor, eps: &Tensor, ab_from: f64, ab_to: f64) -> Result<Tensor> {
    z.ensure_same_shape(eps)?;
    let (sa, sb) = (ab_from.sqrt(), (1.0 - ab_from).max(0.0).sqrt());
    let (ta, tb) = (ab_to.sqrt(), (1.0 - ab_to).max(0.0).sqrt());
    let data = z
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&zv, &ev)| {
            let (zv, ev) = (zv as f64, ev as f64);
            (ta * (zv - sb * ev) / sa + tb * ev) as f32
        })
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}

/// One inversion step from grid position `k` to `k + 1`.
pub fn invert_step(z: &LatentCode, eps: &Tensor, sched: &NoiseSchedule) -> Result<LatentCode> {
    let k = z.timestep;
    if k + 1 >= sched.timestep_grid.len() {
        return Err(Error::invalid(format!("latent already at the last grid step ({k})")));
    }
    let data = ddim_transfer(&z.data, eps, sched.alpha_bar_at(k), sched.alpha_bar_at(k + 1))?;
    Ok(LatentCode::new(data, k + 1, z.view_id))
}

/// One denoising step from grid position `k` to `k - 1` (η = 0).
pub fn denoise_step(z: &LatentCode, eps: &Tensor, sched: &NoiseSchedule) -> Result<LatentCode> {
    let k = z.timestep;
    if k == 0 || k >= sched.timestep_grid.len() {
        return Err(Error::invalid(format!("cannot denoise from grid step {k}")));
    }
    let data = ddim_transfer(&z.data, eps, sched.alpha_bar_at(k), sched.alpha_bar_at(k - 1))?;
    Ok(LatentCode::new(data, k - 1, z.view_id))
}

/// Classifier-free guidance `ε_∅ + ω (ε_p − ε_∅)`, evaluated as
/// `(1 − ω) ε_∅ + ω ε_p` so that `ω ∈ {0, 1}` reproduce the inputs exactly.
pub fn guided_noise(eps_cond: &Tensor, eps_uncond: &Tensor, g: GuidanceConfig) -> Result<Tensor> {
    eps_cond.ensure_same_shape(eps_uncond)?;
    let w = g.omega;
    let data = eps_cond
        .data()
        .iter()
        .zip(eps_uncond.data())
        .map(|(&c, &u)| ((1.0 - w) * u as f64 + w * c as f64) as f32)
        .collect();
    Tensor::new(eps_cond.shape().to_vec(), data)
}

/// Where the noise prediction for an inversion step is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InversionMode {
    /// `ε` predicted at the current latent `z^t`.
    Plain,
    /// `ε` predicted at the implicit next latent `z^{t+1}`, found by fixed-point
    /// iteration seeded with the plain step. Denoising then retraces the exact
    /// same path, up to convergence of the iteration.
    FixedPoint { iterations: usize },
}

impl Default for InversionMode {
    fn default() -> Self {
        InversionMode::FixedPoint { iterations: 10 }
    }
}

fn check_batch(latents: &[LatentCode], depths: &[Tensor], at: usize, what: &str) -> Result<()> {
    let first = latents
        .first()
        .ok_or_else(|| Error::invalid(format!("{what}: empty batch")))?;
    for z in latents {
        z.data.ensure_same_shape(&first.data)?;
        if z.timestep != at {
            return Err(Error::invalid(format!(
                "{what}: view {} is at grid step {}, expected {at}",
                z.view_id, z.timestep
            )));
        }
    }
    if !depths.is_empty() && depths.len() != latents.len() {
        return Err(Error::invalid(format!(
            "{what}: {} depth maps for {} views",
            depths.len(),
            latents.len()
        )));
    }
    Ok(())
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Invert every view from grid step 0 to the last grid step under `cond`
/// with guidance disabled. Views never interact.
pub fn invert_batch(
    latents: &[LatentCode],
    cond: Condition,
    depths: &[Tensor],
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    mode: InversionMode,
) -> Result<Vec<LatentCode>> {
    check_batch(latents, depths, 0, "inversion")?;
    let off = AlignmentConfig::disabled();
    let last = sched.timestep_grid.len() - 1;
    latents
        .iter()
        .enumerate()
        .map(|(i, z0)| {
            let depth = depths.get(i).map(std::slice::from_ref).unwrap_or(&[]);
            let mut z = z0.clone();
            for k in 0..last {
                let predict = |at: &LatentCode, step: usize| -> Result<Tensor> {
                    let mut eps =
                        denoiser.predict(std::slice::from_ref(at), sched.train_step_at(step), cond, depth, &off)?;
                    Ok(eps.remove(0))
                };
                let eps = predict(&z, k)?;
                let mut next = invert_step(&z, &eps, sched)?;
                if let InversionMode::FixedPoint { iterations } = mode {
                    for _ in 0..iterations {
                        let eps = predict(&next, k + 1)?;
                        next = invert_step(&z, &eps, sched)?;
                    }
                }
                ensure_finite(&next.data, "inverted latent")?;
                z = next;
            }
            Ok(z)
        })
        .collect()
}

/// Jointly denoise all views from the last grid step to 0 under `cond`.
///
/// Every step evaluates the denoiser once on the whole batch for the
/// conditional pass and once for the null-condition pass, both with the same
/// alignment configuration, then applies guidance and a DDIM step per view.
/// With `ω = 1` the null pass has zero weight and is skipped.
#[allow(clippy::too_many_arguments)]
pub fn edit_batch(
    latents: &[LatentCode],
    cond: Condition,
    depths: &[Tensor],
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    guidance: GuidanceConfig,
    align: &AlignmentConfig,
) -> Result<Vec<LatentCode>> {
    let last = sched.timestep_grid.len() - 1;
    check_batch(latents, depths, last, "editing")?;
    let ids: Vec<usize> = latents.iter().map(|z| z.view_id).collect();
    align.validate_against(&ids)?;

    let mut batch = latents.to_vec();
    for k in (1..=last).rev() {
        let t = sched.train_step_at(k);
        let eps_cond = denoiser.predict(&batch, t, cond, depths, align)?;
        let eps = if guidance.omega == 1.0 {
            eps_cond
        } else {
            let eps_null = denoiser.predict(&batch, t, Condition::NULL, depths, align)?;
            eps_cond
                .iter()
                .zip(&eps_null)
                .map(|(c, u)| guided_noise(c, u, guidance))
                .collect::<Result<Vec<_>>>()?
        };
        if eps.len() != batch.len() {
            return Err(Error::invalid("denoiser returned a different batch size"));
        }
        batch = batch
            .iter()
            .zip(&eps)
            .map(|(z, e)| {
                let out = denoise_step(z, e, sched)?;
                ensure_finite(&out.data, "denoised latent")?;
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(batch)
}
