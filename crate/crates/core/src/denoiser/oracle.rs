use std::collections::BTreeMap;

use super::Denoiser;
use crate::attention::AlignmentConfig;
use crate::diffusion::{Condition, LatentCode, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Isotropic Gaussian `N(mean, variance · I)` with mixture weight.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureComponent {
    pub mean: Tensor,
    pub variance: f64,
    pub weight: f64,
}

/// Exact minimum-MSE noise predictor for a Gaussian mixture under the forward
/// process `z_t = √ᾱ z₀ + √(1−ᾱ) ε`. Each condition label selects a subset of
/// components; the null label selects all of them.
///
/// Depth maps and alignment settings are accepted and ignored.
#[derive(Clone, Debug)]
pub struct MixtureOracle {
    components: Vec<MixtureComponent>,
    condition_map: BTreeMap<u32, Vec<usize>>,
    alpha_bar: Vec<f64>,
}

impl MixtureOracle {
    pub fn new(
        components: Vec<MixtureComponent>,
        condition_map: BTreeMap<u32, Vec<usize>>,
        sched: &NoiseSchedule,
    ) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::invalid("mixture needs at least one component"))?;
        for c in &components {
            c.mean.ensure_same_shape(&first.mean)?;
            if !(c.variance >= 0.0 && c.variance.is_finite()) {
                return Err(Error::invalid(format!("bad component variance {}", c.variance)));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::invalid(format!("bad component weight {}", c.weight)));
            }
            if !c.mean.is_finite() {
                return Err(Error::NonFinite("component mean".into()));
            }
        }
        for (label, subset) in &condition_map {
            if subset.is_empty() {
                return Err(Error::invalid(format!("condition {label} maps to no components")));
            }
            if let Some(bad) = subset.iter().find(|&&k| k >= components.len()) {
                return Err(Error::invalid(format!(
                    "condition {label} names component {bad} of {}",
                    components.len()
                )));
            }
        }
        Ok(Self {
            components,
            condition_map,
            alpha_bar: sched.alpha_bar.clone(),
        })
    }

    /// One component `N(0, I)` for every listed label.
    pub fn standard_normal(shape: &[usize], labels: &[u32], sched: &NoiseSchedule) -> Result<Self> {
        let comp = MixtureComponent {
            mean: Tensor::zeros(shape),
            variance: 1.0,
            weight: 1.0,
        };
        let map = labels.iter().map(|&l| (l, vec![0])).collect();
        Self::new(vec![comp], map, sched)
    }

    /// One component per label, fitted by moments: the element-wise mean of
    /// the label's latents and their mean squared deviation from it.
    pub fn fit_per_condition(groups: &BTreeMap<u32, Vec<Tensor>>, sched: &NoiseSchedule) -> Result<Self> {
        let mut components = Vec::new();
        let mut map = BTreeMap::new();
        for (&label, samples) in groups {
            if label == 0 {
                return Err(Error::invalid("cannot fit a component for the null label"));
            }
            let first = samples
                .first()
                .ok_or_else(|| Error::invalid(format!("no samples for condition {label}")))?;
            let n = samples.len() as f64;
            let mut mean = vec![0.0f64; first.len()];
            for s in samples {
                s.ensure_same_shape(first)?;
                for (m, &v) in mean.iter_mut().zip(s.data()) {
                    *m += v as f64 / n;
                }
            }
            let mut var = 0.0;
            for s in samples {
                for (m, &v) in mean.iter().zip(s.data()) {
                    var += (v as f64 - m).powi(2);
                }
            }
            var /= n * first.len() as f64;
            let mean = Tensor::new(first.shape().to_vec(), mean.iter().map(|&m| m as f32).collect())?;
            map.insert(label, vec![components.len()]);
            components.push(MixtureComponent {
                mean,
                variance: var.max(1e-6),
                weight: n,
            });
        }
        Self::new(components, map, sched)
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    fn subset(&self, cond: Condition) -> Result<Vec<usize>> {
        if cond.is_null() {
            return Ok((0..self.components.len()).collect());
        }
        self.condition_map
            .get(&cond.0)
            .cloned()
            .ok_or(Error::UnknownCondition(cond.0))
    }

    /// Responsibilities of the conditioned components for `z` at step `t`.
    pub fn responsibilities(&self, z: &Tensor, t: usize, cond: Condition) -> Result<Vec<(usize, f64)>> {
        let ab = self.alpha_at(t)?;
        let subset = self.subset(cond)?;
        let dim = z.len() as f64;
        let sa = ab.sqrt();
        let mut logs = Vec::with_capacity(subset.len());
        for &k in &subset {
            let c = &self.components[k];
            z.ensure_same_shape(&c.mean)?;
            let v = (ab * c.variance + 1.0 - ab).max(1e-300);
            let d2: f64 = z
                .data()
                .iter()
                .zip(c.mean.data())
                .map(|(&zv, &m)| (zv as f64 - sa * m as f64).powi(2))
                .sum();
            logs.push(c.weight.ln() - 0.5 * dim * v.ln() - 0.5 * d2 / v);
        }
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        Ok(subset
            .into_iter()
            .zip(logs)
            .map(|(k, l)| (k, (l - max).exp() / total))
            .collect())
    }

    fn alpha_at(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} beyond the schedule")))
    }

    /// `ε̂ = Σ_k r_k √(1−ᾱ) (z − √ᾱ μ_k) / (ᾱ σ_k² + 1 − ᾱ)`.
    pub fn oracle_predict(&self, z: &Tensor, t: usize, cond: Condition) -> Result<Tensor> {
        let ab = self.alpha_at(t)?;
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut eps = vec![0.0f64; z.len()];
        for (k, r) in self.responsibilities(z, t, cond)? {
            let c = &self.components[k];
            let v = ab * c.variance + 1.0 - ab;
            if v == 0.0 || r == 0.0 {
                continue;
            }
            let f = r * sn / v;
            for ((e, &zv), &m) in eps.iter_mut().zip(z.data()).zip(c.mean.data()) {
                *e += f * (zv as f64 - sa * m as f64);
            }
        }
        Tensor::new(z.shape().to_vec(), eps.into_iter().map(|e| e as f32).collect())
    }
}

impl Denoiser for MixtureOracle {
    fn predict(
        &self,
        batch: &[LatentCode],
        timestep: usize,
        cond: Condition,
        _depths: &[Tensor],
        _align: &AlignmentConfig,
    ) -> Result<Vec<Tensor>> {
        batch
            .iter()
            .map(|z| self.oracle_predict(&z.data, timestep, cond))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::build_schedule;

    fn tensor(v: Vec<f32>) -> Tensor {
        Tensor::new(vec![v.len()], v).unwrap()
    }

    fn single(mean: Vec<f32>, variance: f64) -> MixtureOracle {
        let s = build_schedule(1000, 50).unwrap();
        let c = MixtureComponent {
            mean: tensor(mean),
            variance,
            weight: 1.0,
        };
        MixtureOracle::new(vec![c], [(1, vec![0])].into(), &s).unwrap()
    }

    #[test]
    fn point_mass_closed_form() {
        let o = single(vec![0.5, -1.0, 2.0], 0.0);
        let s = build_schedule(1000, 50).unwrap();
        let z = tensor(vec![0.3, 0.1, -0.7]);
        for t in [1, 200, 1000] {
            let ab = s.alpha_bar[t];
            let eps = o.oracle_predict(&z, t, Condition(1)).unwrap();
            for ((e, zv), m) in eps.data().iter().zip(z.data()).zip([0.5, -1.0, 2.0]) {
                let want = (*zv as f64 - ab.sqrt() * m) / (1.0 - ab).sqrt();
                assert!((*e as f64 - want).abs() < 1e-5 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn standard_normal_prior() {
        let s = build_schedule(1000, 50).unwrap();
        let o = MixtureOracle::standard_normal(&[4], &[1], &s).unwrap();
        let z = tensor(vec![1.0, -2.0, 0.5, 3.0]);
        let eps = o.oracle_predict(&z, 500, Condition(1)).unwrap();
        let f = (1.0 - s.alpha_bar[500]).sqrt();
        for (e, zv) in eps.data().iter().zip(z.data()) {
            assert!((*e as f64 - f * *zv as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn separated_components_responsibility() {
        let s = build_schedule(1000, 50).unwrap();
        let comps = vec![
            MixtureComponent {
                mean: tensor(vec![5.0; 8]),
                variance: 0.1,
                weight: 0.5,
            },
            MixtureComponent {
                mean: tensor(vec![-5.0; 8]),
                variance: 0.1,
                weight: 0.5,
            },
        ];
        let o = MixtureOracle::new(comps, BTreeMap::new(), &s).unwrap();
        let ab = s.alpha_bar[100];
        let z = tensor(vec![(5.0 * ab.sqrt()) as f32 + 0.1; 8]);
        let r = o.responsibilities(&z, 100, Condition::NULL).unwrap();
        assert!(r[0].1 > 0.999);
    }

    #[test]
    fn unknown_condition_and_bad_maps() {
        let o = single(vec![0.0], 1.0);
        let z = tensor(vec![0.0]);
        assert!(matches!(
            o.oracle_predict(&z, 3, Condition(7)),
            Err(Error::UnknownCondition(7))
        ));
        let s = build_schedule(10, 10).unwrap();
        let c = MixtureComponent {
            mean: tensor(vec![0.0]),
            variance: 1.0,
            weight: 1.0,
        };
        assert!(MixtureOracle::new(vec![c.clone()], [(1, vec![])].into(), &s).is_err());
        assert!(MixtureOracle::new(vec![c], [(1, vec![3])].into(), &s).is_err());
        assert!(MixtureOracle::new(vec![], BTreeMap::new(), &s).is_err());
    }

    #[test]
    fn ignores_depth_and_alignment() {
        let o = single(vec![0.2, 0.4], 0.5);
        let z = LatentCode::new(tensor(vec![1.0, 2.0]), 0, 3);
        let a = o
            .predict(&[z.clone()], 300, Condition(1), &[], &AlignmentConfig::disabled())
            .unwrap();
        let align = AlignmentConfig::new(0.0, vec![3]).unwrap();
        let b = o
            .predict(&[z], 300, Condition(1), &[tensor(vec![9.0])], &align)
            .unwrap();
        assert_eq!(a, b);
    }
}
