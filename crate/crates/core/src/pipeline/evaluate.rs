use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, ViewRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Coverage at which a pixel counts as opaque for evaluation.
pub const OPAQUE_ALPHA: f32 = 0.95;
/// Relative depth tolerance of the reprojection visibility test.
pub const DEPTH_TOLERANCE: f64 = 0.03;

const FEATURES: usize = 6;

/// Mean and standard deviation of RGB over opaque pixels (all pixels when
/// none are opaque).
pub fn color_features(image: &Tensor, alpha: &Tensor) -> Result<[f64; FEATURES]> {
    let (h, w) = (alpha.shape()[0], alpha.shape()[1]);
    image.ensure_shape(&[h, w, 3])?;
    let opaque: Vec<usize> = (0..h * w).filter(|&p| alpha.data()[p] >= OPAQUE_ALPHA).collect();
    let pixels: Vec<usize> = if opaque.is_empty() {
        (0..h * w).collect()
    } else {
        opaque
    };
    let n = pixels.len() as f64;
    let mut f = [0.0; FEATURES];
    for k in 0..3 {
        let vals = pixels.iter().map(|&p| image.data()[3 * p + k] as f64);
        let mean = vals.clone().sum::<f64>() / n;
        let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        f[k] = mean;
        f[3 + k] = var.sqrt();
    }
    Ok(f)
}

/// Nearest-centroid style classifier on standardized color features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleClassifier {
    pub labels: Vec<u32>,
    pub centroids: Vec<Vec<f64>>,
    pub scale: Vec<f64>,
}

impl StyleClassifier {
    pub fn fit(samples: &[([f64; FEATURES], u32)]) -> Result<Self> {
        let mut labels: Vec<u32> = samples.iter().map(|s| s.1).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.is_empty() {
            return Err(Error::invalid("cannot fit a classifier on no samples"));
        }
        let mut centroids = vec![vec![0.0; FEATURES]; labels.len()];
        let mut counts = vec![0usize; labels.len()];
        for (f, l) in samples {
            let k = labels.binary_search(l).expect("label collected");
            counts[k] += 1;
            centroids[k].iter_mut().zip(f).for_each(|(c, v)| *c += v);
        }
        for (c, &n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut scale = vec![0.0; FEATURES];
        for (f, l) in samples {
            let c = &centroids[labels.binary_search(l).expect("label collected")];
            for d in 0..FEATURES {
                scale[d] += (f[d] - c[d]).powi(2);
            }
        }
        let scale = scale
            .iter()
            .map(|s| (s / samples.len() as f64).sqrt().max(1e-3))
            .collect();
        Ok(Self {
            labels,
            centroids,
            scale,
        })
    }

    pub fn fit_dataset(ds: &Dataset) -> Result<Self> {
        let samples = ds
            .scenes
            .iter()
            .flat_map(|s| s.views.iter().map(move |v| (v, s.label())))
            .map(|(v, l)| Ok((color_features(&v.image, &v.alpha)?, l)))
            .collect::<Result<Vec<_>>>()?;
        Self::fit(&samples)
    }

    pub fn classify_features(&self, f: &[f64; FEATURES]) -> u32 {
        let dist = |c: &Vec<f64>| {
            c.iter()
                .zip(f)
                .zip(&self.scale)
                .map(|((c, v), s)| ((v - c) / s).powi(2))
                .sum::<f64>()
        };
        let best = (0..self.labels.len())
            .min_by(|&a, &b| dist(&self.centroids[a]).total_cmp(&dist(&self.centroids[b])))
            .expect("at least one class");
        self.labels[best]
    }

    pub fn classify(&self, image: &Tensor, alpha: &Tensor) -> Result<u32> {
        Ok(self.classify_features(&color_features(image, alpha)?))
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("classifier serializes")
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let c: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        if c.labels.is_empty()
            || c.centroids.len() != c.labels.len()
            || c.centroids.iter().any(|v| v.len() != FEATURES)
            || c.scale.len() != FEATURES
            || c.scale.iter().any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(format!(
                "classifier needs one {FEATURES}-feature centroid per label and positive scales"
            ));
        }
        Ok(c)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|r| Error::format("classifier", path, r))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn bilinear(data: &[f32], h: usize, w: usize, ch: usize, x: f64, y: f64, out: &mut [f64]) {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    for (k, o) in out.iter_mut().enumerate().take(ch) {
        let at = |yy: usize, xx: usize| data[(yy * w + xx) * ch + k] as f64;
        *o =
            (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
    }
}

/// Median over opaque pixels and all ordered view pairs of the mean absolute
/// RGB difference between a pixel and its reprojection into the other view,
/// using the source views' depths with a visibility test.
pub fn reprojection_error(views: &[ViewRecord], images: &[Tensor]) -> Result<f64> {
    if views.len() != images.len() {
        return Err(Error::invalid(format!(
            "{} views but {} images",
            views.len(),
            images.len()
        )));
    }
    for (v, img) in views.iter().zip(images) {
        v.image.ensure_same_shape(img)?;
    }
    let mut errors: Vec<f64> = (0..views.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let src = &views[i];
            let (h, w) = (src.alpha.shape()[0], src.alpha.shape()[1]);
            let mut out = Vec::new();
            for p in 0..h * w {
                if src.alpha.data()[p] < OPAQUE_ALPHA {
                    continue;
                }
                let (u, v) = ((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
                let world: Vector3<f64> =
                    src.camera
                        .camera_to_world(&src.camera.unproject(u, v, src.depth.data()[p] as f64));
                let color = &images[i].data()[3 * p..3 * p + 3];
                for (j, dst) in views.iter().enumerate() {
                    if j == i {
                        continue;
                    }
                    let pc = dst.camera.world_to_camera(&world);
                    if pc.z <= 1e-6 {
                        continue;
                    }
                    let [qu, qv] = dst.camera.project(&pc);
                    let (x, y) = (qu - 0.5, qv - 0.5);
                    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
                        continue;
                    }
                    let mut a = [0.0; 1];
                    bilinear(dst.alpha.data(), h, w, 1, x, y, &mut a);
                    let mut d = [0.0; 1];
                    bilinear(dst.depth.data(), h, w, 1, x, y, &mut d);
                    if a[0] < OPAQUE_ALPHA as f64 || (d[0] - pc.z).abs() > DEPTH_TOLERANCE * pc.z {
                        continue;
                    }
                    let mut c = [0.0; 3];
                    bilinear(images[j].data(), h, w, 3, x, y, &mut c);
                    out.push((0..3).map(|k| (color[k] as f64 - c[k]).abs()).sum::<f64>() / 3.0);
                }
            }
            out
        })
        .collect();
    if errors.is_empty() {
        return Ok(0.0);
    }
    let mid = errors.len() / 2;
    let (_, m, _) = errors.select_nth_unstable_by(mid, f64::total_cmp);
    Ok(*m)
}

/// Root mean (over RGB) variance across views of the per-view mean opaque color.
pub fn color_dispersion(views: &[ViewRecord], images: &[Tensor]) -> Result<f64> {
    let feats = views
        .iter()
        .zip(images)
        .map(|(v, img)| color_features(img, &v.alpha))
        .collect::<Result<Vec<_>>>()?;
    let n = feats.len() as f64;
    if feats.len() < 2 {
        return Ok(0.0);
    }
    let var: f64 = (0..3)
        .map(|k| {
            let m = feats.iter().map(|f| f[k]).sum::<f64>() / n;
            feats.iter().map(|f| (f[k] - m).powi(2)).sum::<f64>() / n
        })
        .sum::<f64>()
        / 3.0;
    Ok(var.sqrt())
}

/// Mean per-pixel RGB L2 distance.
pub fn edit_magnitude(originals: &[Tensor], edited: &[Tensor]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (o, e) in originals.iter().zip(edited) {
        o.ensure_same_shape(e)?;
        for (a, b) in o.data().chunks_exact(3).zip(e.data().chunks_exact(3)) {
            sum += (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum::<f64>().sqrt();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Consistency statistics of an edit.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub num_views: usize,
    pub reprojection_error: f64,
    /// The same statistic on the unedited renders.
    pub reprojection_floor: f64,
    pub dispersion: f64,
    pub original_dispersion: f64,
    pub edit_magnitude: f64,
    pub target_class_rate: Option<f64>,
}

impl ConsistencyReport {
    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        line("num_views", self.num_views.to_string());
        line("reprojection_error", format!("{:.6}", self.reprojection_error));
        line("reprojection_floor", format!("{:.6}", self.reprojection_floor));
        line("dispersion", format!("{:.6}", self.dispersion));
        line("original_dispersion", format!("{:.6}", self.original_dispersion));
        line("edit_magnitude", format!("{:.6}", self.edit_magnitude));
        if let Some(r) = self.target_class_rate {
            line("target_class_rate", format!("{r:.6}"));
        }
        s
    }
}

/// Compare edited images against the source views they came from.
///
/// `classifier` pairs a style classifier with the target label.
pub fn evaluate(
    views: &[ViewRecord],
    edited: &[Tensor],
    classifier: Option<(&StyleClassifier, u32)>,
) -> Result<ConsistencyReport> {
    if views.len() != edited.len() {
        return Err(Error::invalid(format!(
            "{} views but {} edited images",
            views.len(),
            edited.len()
        )));
    }
    let originals: Vec<Tensor> = views.iter().map(|v| v.image.clone()).collect();
    let target_class_rate = match classifier {
        None => None,
        Some((c, target)) => {
            let hits = views
                .iter()
                .zip(edited)
                .map(|(v, e)| c.classify(e, &v.alpha))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|&l| l == target)
                .count();
            Some(hits as f64 / views.len().max(1) as f64)
        }
    };
    Ok(ConsistencyReport {
        num_views: views.len(),
        reprojection_error: reprojection_error(views, edited)?,
        reprojection_floor: reprojection_error(views, &originals)?,
        dispersion: color_dispersion(views, edited)?,
        original_dispersion: color_dispersion(views, &originals)?,
        edit_magnitude: edit_magnitude(&originals, edited)?,
        target_class_rate,
    })
}
