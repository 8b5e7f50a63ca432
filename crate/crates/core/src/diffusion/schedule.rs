use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// Cumulative signal retention `ᾱ_t` over the training steps, plus the DDIM
/// timestep grid shared by inversion and denoising.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub num_train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// `alpha_bar[0] = 1`, then strictly decreasing; length `num_train_steps + 1`.
    pub alpha_bar: Vec<f64>,
    /// Strictly increasing training steps from `0` to `num_train_steps`.
    pub timestep_grid: Vec<usize>,
}

/// Linear-β schedule with `num_ddim_steps` evenly spaced DDIM steps.
pub fn build_schedule(num_train_steps: usize, num_ddim_steps: usize) -> Result<NoiseSchedule> {
    if num_ddim_steps == 0 || num_ddim_steps > num_train_steps {
        return Err(Error::invalid(format!(
            "need 1 <= ddim steps ({num_ddim_steps}) <= train steps ({num_train_steps})"
        )));
    }
    let t = num_train_steps;
    let mut alpha_bar = Vec::with_capacity(t + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for s in 1..=t {
        let frac = if t == 1 { 0.0 } else { (s - 1) as f64 / (t - 1) as f64 };
        let beta = BETA_START + (BETA_END - BETA_START) * frac;
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    let n = num_ddim_steps;
    let timestep_grid = (0..=n).map(|k| (k * t + n / 2) / n).collect();
    Ok(NoiseSchedule {
        num_train_steps,
        beta_start: BETA_START,
        beta_end: BETA_END,
        alpha_bar,
        timestep_grid,
    })
}

#[derive(Serialize, Deserialize)]
struct ScheduleFile {
    num_train_steps: usize,
    num_ddim_steps: usize,
    beta_start: f64,
    beta_end: f64,
    timestep_grid: Vec<usize>,
}

impl NoiseSchedule {
    pub fn num_ddim_steps(&self) -> usize {
        self.timestep_grid.len() - 1
    }

    /// `ᾱ` at grid position `k`.
    pub fn alpha_bar_at(&self, k: usize) -> f64 {
        self.alpha_bar[self.timestep_grid[k]]
    }

    /// Training step at grid position `k`.
    pub fn train_step_at(&self, k: usize) -> usize {
        self.timestep_grid[k]
    }

    /// TOML text: β range, counts and the grid.
    pub fn to_text(&self) -> String {
        toml::to_string(&ScheduleFile {
            num_train_steps: self.num_train_steps,
            num_ddim_steps: self.num_ddim_steps(),
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            timestep_grid: self.timestep_grid.clone(),
        })
        .expect("schedule serializes")
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let f: ScheduleFile = toml::from_str(text).map_err(|e| e.to_string())?;
        if f.beta_start != BETA_START || f.beta_end != BETA_END {
            return Err(format!(
                "only the linear schedule with beta in [{BETA_START}, {BETA_END}] is supported"
            ));
        }
        let s = build_schedule(f.num_train_steps, f.num_ddim_steps).map_err(|e| e.to_string())?;
        if s.timestep_grid != f.timestep_grid {
            return Err("timestep grid does not match the stated counts".into());
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_grid() {
        let s = build_schedule(1000, 1000).unwrap();
        assert_eq!(s.timestep_grid, (0..=1000).collect::<Vec<_>>());
        assert_eq!(s.alpha_bar[0], 1.0);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(*s.alpha_bar.last().unwrap() > 0.0);
    }

    #[test]
    fn fifty_steps() {
        let s = build_schedule(1000, 50).unwrap();
        assert_eq!(s.timestep_grid.len(), 51);
        assert_eq!(s.timestep_grid[0], 0);
        assert_eq!(s.timestep_grid[50], 1000);
        assert!(s.timestep_grid.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn final_alpha_bar_is_small() {
        // independent evaluation of the product
        let mut p = 1.0f64;
        for i in 0..1000 {
            p *= 1.0 - (1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0);
        }
        let s = build_schedule(1000, 50).unwrap();
        assert!((s.alpha_bar[1000] - p).abs() < 1e-15);
        assert!(p < 1e-2);
    }

    #[test]
    fn signal_to_noise_decreases() {
        let s = build_schedule(1000, 50).unwrap();
        let snr: Vec<f64> = s.alpha_bar[1..].iter().map(|a| a.sqrt() / (1.0 - a).sqrt()).collect();
        assert!(snr.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn rejects_invalid_counts() {
        assert!(build_schedule(10, 0).is_err());
        assert!(build_schedule(10, 11).is_err());
        assert!(build_schedule(0, 0).is_err());
        assert!(build_schedule(1, 1).is_ok());
    }

    #[test]
    fn text_roundtrip() {
        let s = build_schedule(1000, 50).unwrap();
        let text = s.to_text();
        assert!(text.contains("num_ddim_steps = 50"));
        assert_eq!(NoiseSchedule::from_text(&text).unwrap(), s);
        let broken = text.replace("num_ddim_steps = 50", "num_ddim_steps = 40");
        assert!(NoiseSchedule::from_text(&broken).is_err());
    }
}
