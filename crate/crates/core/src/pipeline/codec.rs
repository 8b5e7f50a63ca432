use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::LatentCode;
use crate::error::{Error, Result};
use crate::image::snap;
use crate::tensor::Tensor;

/// Lossless stand-in for an image autoencoder: `p × p` space-to-depth
/// followed by per-channel affine whitening.
///
/// An `H×W×3` image becomes a `3p² × H/p × W/p` latent whose channel index is
/// `(dy · p + dx) · 3 + rgb`. Decoding snaps onto the image grid, so images
/// already on that grid (every rendered image) round-trip bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchCodec {
    pub patch_size: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl PatchCodec {
    /// No whitening.
    pub fn identity(patch_size: usize) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::invalid("patch size must be positive"));
        }
        let c = 3 * patch_size * patch_size;
        Ok(Self {
            patch_size,
            mean: vec![0.0; c],
            scale: vec![1.0; c],
        })
    }

    /// Whitening statistics fitted over `images`.
    pub fn fit(patch_size: usize, images: &[Tensor]) -> Result<Self> {
        let base = Self::identity(patch_size)?;
        if images.is_empty() {
            return Err(Error::invalid("cannot fit a codec on no images"));
        }
        let c = base.channels();
        let (mut sum, mut sq, mut n) = (vec![0.0f64; c], vec![0.0f64; c], 0usize);
        for img in images {
            let raw = base.space_to_depth(img)?;
            let per = raw.len() / c;
            for ch in 0..c {
                for &v in &raw[ch * per..(ch + 1) * per] {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            n += per;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        Ok(Self {
            patch_size,
            mean,
            scale,
        })
    }

    pub fn channels(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn latent_shape(&self, height: usize, width: usize) -> [usize; 3] {
        [self.channels(), height / self.patch_size, width / self.patch_size]
    }

    fn space_to_depth(&self, img: &Tensor) -> Result<Vec<f64>> {
        let (h, w) = match img.shape() {
            [h, w, 3] => (*h, *w),
            s => return Err(Error::invalid(format!("expected an HxWx3 image, got {s:?}"))),
        };
        let p = self.patch_size;
        if h % p != 0 || w % p != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "{h}x{w} image is not divisible by patch size {p}"
            )));
        }
        let (lh, lw) = (h / p, w / p);
        let mut out = vec![0.0; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                for k in 0..3 {
                    let ch = ((y % p) * p + x % p) * 3 + k;
                    out[(ch * lh + y / p) * lw + x / p] = img.data()[(y * w + x) * 3 + k] as f64;
                }
            }
        }
        Ok(out)
    }

    pub fn encode(&self, img: &Tensor, view_id: usize) -> Result<LatentCode> {
        let raw = self.space_to_depth(img)?;
        let shape = self.latent_shape(img.shape()[0], img.shape()[1]);
        let per = shape[1] * shape[2];
        let data = raw
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = i / per;
                ((v - self.mean[ch]) / self.scale[ch]) as f32
            })
            .collect();
        Ok(LatentCode::new(Tensor::new(shape.to_vec(), data)?, 0, view_id))
    }

    pub fn decode(&self, z: &LatentCode) -> Result<Tensor> {
        let (c, lh, lw) = match z.data.shape() {
            [c, lh, lw] => (*c, *lh, *lw),
            s => return Err(Error::invalid(format!("expected a CxHxW latent, got {s:?}"))),
        };
        if c != self.channels() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.channels(), lh, lw],
                actual: z.data.shape().to_vec(),
            });
        }
        let p = self.patch_size;
        let (h, w) = (lh * p, lw * p);
        let mut out = vec![0.0f32; h * w * 3];
        for (i, &v) in z.data.data().iter().enumerate() {
            let ch = i / (lh * lw);
            let (ly, lx) = ((i / lw) % lh, i % lw);
            let (k, cell) = (ch % 3, ch / 3);
            let (y, x) = (ly * p + cell / p, lx * p + cell % p);
            out[(y * w + x) * 3 + k] = snap(v as f64 * self.scale[ch] + self.mean[ch]);
        }
        Tensor::new(vec![h, w, 3], out)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("codec serializes")
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let c: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        let n = 3 * c.patch_size * c.patch_size;
        if c.patch_size == 0 || c.mean.len() != n || c.scale.len() != n {
            return Err(format!("codec needs {n} means and scales"));
        }
        if c.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) || c.mean.iter().any(|m| !m.is_finite()) {
            return Err("codec statistics must be finite with positive scales".into());
        }
        Ok(c)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|r| Error::format("codec", path, r))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::new(vec![h, w, 3], (0..h * w * 3).map(|i| snap(f(i))).collect()).unwrap()
    }

    #[test]
    fn latent_shape_for_64() {
        let c = PatchCodec::identity(4).unwrap();
        let z = c.encode(&image(64, 64, |_| 0.5), 0).unwrap();
        assert_eq!(z.data.shape(), &[48, 16, 16]);
        assert_eq!(z.timestep, 0);
    }

    #[test]
    fn channel_layout() {
        let c = PatchCodec::identity(2).unwrap();
        let img = image(2, 2, |i| i as f64 / 16.0);
        let z = c.encode(&img, 0).unwrap();
        // pixel (1, 0), green lands in channel (1*2+0)*3+1 = 7
        assert_eq!(z.data.data()[7], img.data()[(2) * 3 + 1]);
    }

    #[test]
    fn rejects_indivisible_and_bad_files() {
        let c = PatchCodec::identity(4).unwrap();
        assert!(c.encode(&image(6, 8, |_| 0.0), 0).is_err());
        assert!(PatchCodec::from_text("patch_size = 2\nmean = [0.0]\nscale = [1.0]").is_err());
    }

    #[test]
    fn fitted_statistics_whiten() {
        let imgs: Vec<Tensor> = (0..6)
            .map(|k| image(8, 8, move |i| ((i * 7 + k * 13) % 17) as f64 / 17.0))
            .collect();
        let c = PatchCodec::fit(4, &imgs).unwrap();
        let zs: Vec<LatentCode> = imgs.iter().map(|i| c.encode(i, 0).unwrap()).collect();
        for ch in 0..48 {
            let vals: Vec<f64> = zs
                .iter()
                .flat_map(|z| z.data.data()[ch * 4..(ch + 1) * 4].iter().map(|&v| v as f64))
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5);
        }
        assert_eq!(PatchCodec::from_text(&c.to_text()).unwrap(), c);
    }

    proptest! {
        #[test]
        fn roundtrip_is_exact(vals in proptest::collection::vec(0.0f64..1.0, 8 * 8 * 3), shift in -1.0f64..1.0, s in 0.05f64..3.0) {
            let img = Tensor::new(vec![8, 8, 3], vals.iter().map(|&v| snap(v)).collect()).unwrap();
            let mut c = PatchCodec::identity(4).unwrap();
            c.mean.iter_mut().enumerate().for_each(|(i, m)| *m = shift + i as f64 * 0.01);
            c.scale.iter_mut().enumerate().for_each(|(i, v)| *v = s + i as f64 * 0.003);
            let back = c.decode(&c.encode(&img, 3).unwrap()).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
