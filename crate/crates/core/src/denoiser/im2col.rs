//! Zero-padded 3×3 neighborhood gathering on channel-last tensors, with its
//! adjoint as the backward pass.

use candle_core::{bail, CpuStorage, CustomOp1, Layout, Result, Shape, Tensor};

fn contiguous_f32<'a>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [f32]> {
    let data = match s {
        CpuStorage::F32(v) => v,
        _ => bail!("3x3 gather expects f32 input"),
    };
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => bail!("3x3 gather expects contiguous input"),
    }
}

/// Neighbor `(y + dy − 1, x + dx − 1)` for block `k = 3 dy + dx`, if inside.
fn neighbors(h: usize, w: usize, y: usize, x: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..9).filter_map(move |k| {
        let (yy, xx) = ((y + k / 3).checked_sub(1)?, (x + k % 3).checked_sub(1)?);
        (yy < h && xx < w).then_some((k, yy * w + xx))
    })
}

/// `(B, H, W, C)` → `(B, H, W, 9C)`.
pub(crate) struct Gather3;

/// `(B, H, W, 9C)` → `(B, H, W, C)`, summing each block back to its source.
pub(crate) struct Scatter3;

impl CustomOp1 for Gather3 {
    fn name(&self) -> &'static str {
        "gather3x3"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, h, w, c) = l.shape().dims4()?;
        let src = contiguous_f32(s, l)?;
        let mut out = vec![0f32; b * h * w * 9 * c];
        for bi in 0..b {
            let base = bi * h * w;
            for y in 0..h {
                for x in 0..w {
                    let o = (base + y * w + x) * 9 * c;
                    for (k, p) in neighbors(h, w, y, x) {
                        let s0 = (base + p) * c;
                        out[o + k * c..o + (k + 1) * c].copy_from_slice(&src[s0..s0 + c]);
                    }
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((b, h, w, 9 * c))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Scatter3)?))
    }
}

impl CustomOp1 for Scatter3 {
    fn name(&self) -> &'static str {
        "scatter3x3"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, h, w, c9) = l.shape().dims4()?;
        let c = c9 / 9;
        let src = contiguous_f32(s, l)?;
        let mut out = vec![0f32; b * h * w * c];
        for bi in 0..b {
            let base = bi * h * w;
            for y in 0..h {
                for x in 0..w {
                    let o = (base + y * w + x) * c9;
                    for (k, p) in neighbors(h, w, y, x) {
                        let d0 = (base + p) * c;
                        for (d, v) in out[d0..d0 + c].iter_mut().zip(&src[o + k * c..o + (k + 1) * c]) {
                            *d += v;
                        }
                    }
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((b, h, w, c))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Gather3)?))
    }
}

pub(crate) fn gather3(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Gather3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn shifted_reference(x: &Tensor) -> Tensor {
        let (_, h, w, _) = x.dims4().unwrap();
        let p = x.pad_with_zeros(1, 1, 1).unwrap().pad_with_zeros(2, 1, 1).unwrap();
        let mut parts = Vec::new();
        for dy in 0..3 {
            for dx in 0..3 {
                parts.push(p.narrow(1, dy, h).unwrap().narrow(2, dx, w).unwrap());
            }
        }
        Tensor::cat(&parts, 3).unwrap()
    }

    #[test]
    fn matches_pad_and_slice() {
        let x = Tensor::randn(0f32, 1.0, (2, 4, 5, 3), &Device::Cpu).unwrap();
        let a = gather3(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = shifted_reference(&x).flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_is_the_adjoint() {
        let x = Var::randn(0f32, 1.0, (1, 3, 4, 2), &Device::Cpu).unwrap();
        let g = Tensor::randn(0f32, 1.0, (1, 3, 4, 18), &Device::Cpu).unwrap();
        let loss = (gather3(x.as_tensor()).unwrap() * &g).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let ours = grads
            .get(x.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let xv = Var::from_tensor(x.as_tensor()).unwrap();
        let loss = (shifted_reference(xv.as_tensor()) * &g).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let want = grads
            .get(xv.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        for (a, b) in ours.iter().zip(&want) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
