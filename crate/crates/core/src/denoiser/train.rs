use candle_core::{Device, Tensor as CTensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::toy::{Group, ToyConfig, ToyDenoiser};
use crate::attention::AlignmentConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One clean training example.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    /// `C × S × S` whitened latent.
    pub latent: Tensor,
    pub label: u32,
    /// `S × S` normalized depth.
    pub depth: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub warmup_steps: usize,
    /// Probability of replacing a label by the null label.
    pub label_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            learning_rate: 1e-3,
            batch_size: 16,
            seed: 0,
            validation_fraction: 0.1,
            warmup_steps: 100,
            label_dropout: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("steps and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) || !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(Error::invalid("fractions must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    fn rate_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps.min(self.steps)).max(1) as f64;
        let frac = (step - self.warmup_steps) as f64 / span;
        self.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub loss_history: Vec<f64>,
    /// `ε`-MSE on held-out samples.
    pub validation_mse: f64,
    /// `ε`-MSE of the linear predictor `√(1−ᾱ) z_t` on the same draws.
    pub baseline_mse: f64,
    pub validation_count: usize,
}

struct Pool {
    latents: Vec<Vec<f32>>,
    depths: Vec<Vec<f32>>,
    labels: Vec<u32>,
}

impl Pool {
    /// Channel-last copies of the samples.
    fn new(samples: &[&TrainingSample]) -> Result<Self> {
        let mut latents = Vec::with_capacity(samples.len());
        for s in samples {
            let x = ToyDenoiser::to_channel_last(&s.latent)?;
            latents.push(x.flatten_all()?.to_vec1::<f32>()?);
        }
        Ok(Self {
            latents,
            depths: samples.iter().map(|s| s.depth.data().to_vec()).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }
}

/// A noised batch with its target noise.
fn noised_batch(
    model: &ToyDenoiser,
    pool: &Pool,
    picks: &[usize],
    timesteps: Vec<usize>,
    labels: Vec<u32>,
    rng: &mut ChaCha8Rng,
) -> Result<(Group, CTensor)> {
    let cfg = model.config();
    let (s, c) = (cfg.latent_size, cfg.latent_channels);
    let per = s * s * c;
    let ab = crate::diffusion::build_schedule(cfg.num_train_steps, 1)?.alpha_bar;
    let mut x = Vec::with_capacity(picks.len() * per);
    let mut noise = Vec::with_capacity(picks.len() * per);
    let mut depth = Vec::with_capacity(picks.len() * s * s);
    for (&i, &t) in picks.iter().zip(&timesteps) {
        let (sa, sn) = (ab[t].sqrt(), (1.0 - ab[t]).sqrt());
        for &z0 in &pool.latents[i] {
            let e: f64 = rng.sample(StandardNormal);
            x.push((sa * z0 as f64 + sn * e) as f32);
            noise.push(e as f32);
        }
        depth.extend_from_slice(&pool.depths[i]);
    }
    let b = picks.len();
    let dev = Device::Cpu;
    let group = Group {
        x: CTensor::from_vec(x, (b, s, s, c), &dev)?,
        timesteps,
        labels,
        depth: Some(CTensor::from_vec(depth, (b, s, s, 1), &dev)?),
    };
    Ok((group, CTensor::from_vec(noise, (b, s, s, c), &dev)?))
}

/// Train with the `ε`-prediction MSE objective, dropping labels to the null
/// label with probability `label_dropout`. Deterministic given both configs.
pub fn train_toy_denoiser(
    samples: &[TrainingSample],
    model_cfg: &ToyConfig,
    cfg: &TrainConfig,
) -> Result<(ToyDenoiser, TrainReport)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let model = ToyDenoiser::new(model_cfg.clone())?;
    let s = model_cfg.latent_size;
    for smp in samples {
        smp.latent.ensure_shape(&[model_cfg.latent_channels, s, s])?;
        smp.depth.ensure_shape(&[s, s])?;
        if smp.label == 0 || smp.label >= model_cfg.num_labels {
            return Err(Error::UnknownCondition(smp.label));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let n_val = if samples.len() > 1 {
        ((samples.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, samples.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_pool = Pool::new(&train_idx.iter().map(|&i| &samples[i]).collect::<Vec<_>>())?;
    let val_pool = Pool::new(&val_idx.iter().map(|&i| &samples[i]).collect::<Vec<_>>())?;

    let vars = model.parameters().iter().map(|(_, v)| v.clone()).collect();
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?;
    let off = AlignmentConfig::disabled();
    let t_max = model_cfg.num_train_steps;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        opt.set_learning_rate(cfg.rate_at(step));
        let picks: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..train_pool.labels.len()))
            .collect();
        let ts: Vec<usize> = picks.iter().map(|_| rng.random_range(1..=t_max)).collect();
        let labels: Vec<u32> = picks
            .iter()
            .map(|&i| {
                if rng.random::<f64>() < cfg.label_dropout {
                    0
                } else {
                    train_pool.labels[i]
                }
            })
            .collect();
        let (group, noise) = noised_batch(&model, &train_pool, &picks, ts, labels, &mut rng)?;
        let pred = model.forward(std::slice::from_ref(&group), &[0], &off)?.remove(0);
        let loss = (pred - noise)?.sqr()?.mean_all()?;
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        history.push(value);
        opt.backward_step(&loss)?;
    }

    let (validation_mse, baseline_mse) = validate(&model, &val_pool, cfg)?;
    Ok((
        model,
        TrainReport {
            steps: cfg.steps,
            loss_history: history,
            validation_mse,
            baseline_mse,
            validation_count: n_val,
        },
    ))
}

fn validate(model: &ToyDenoiser, pool: &Pool, cfg: &TrainConfig) -> Result<(f64, f64)> {
    if pool.labels.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a11);
    let t_max = model.config().num_train_steps;
    let ab = crate::diffusion::build_schedule(t_max, 1)?.alpha_bar;
    let off = AlignmentConfig::disabled();
    let (mut err, mut base, mut count) = (0.0, 0.0, 0usize);
    let idx: Vec<usize> = (0..pool.labels.len()).collect();
    for chunk in idx.chunks(cfg.batch_size) {
        let ts: Vec<usize> = chunk.iter().map(|_| rng.random_range(1..=t_max)).collect();
        let labels = chunk.iter().map(|&i| pool.labels[i]).collect();
        let (group, noise) = noised_batch(model, pool, chunk, ts.clone(), labels, &mut rng)?;
        let pred = model.forward(std::slice::from_ref(&group), &[0], &off)?.remove(0);
        let scale: Vec<f32> = ts.iter().map(|&t| (1.0 - ab[t]).sqrt() as f32).collect();
        let scale = CTensor::from_vec(scale, (chunk.len(), 1, 1, 1), &Device::Cpu)?;
        let linear = group.x.broadcast_mul(&scale)?;
        err += (pred - &noise)?.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
        base += (linear - &noise)?.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
        count += noise.elem_count();
    }
    Ok((err / count as f64, base / count as f64))
}
