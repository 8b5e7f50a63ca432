//! Fused last-axis kernels with analytic backward passes: layer norm with
//! gain and bias, grouped bias addition and softmax.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Result, Shape, Tensor};

const EPS: f64 = 1e-5;

fn slice<'a>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [f32]> {
    let data = match s {
        CpuStorage::F32(v) => v,
        _ => bail!("fused kernels expect f32 input"),
    };
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => bail!("fused kernels expect contiguous input"),
    }
}

fn last_dim(l: &Layout) -> usize {
    l.shape().dims().last().copied().unwrap_or(1).max(1)
}

fn row_stats(row: &[f32]) -> (f32, f32) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean as f32, (1.0 / (var + EPS).sqrt()) as f32)
}

struct AffineNorm;
struct AffineNormInputGrad;
struct AffineNormParamGrad;

impl CustomOp3 for AffineNorm {
    fn name(&self) -> &'static str {
        "affine-layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (x, g, b) = (slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?);
        let c = last_dim(l1);
        if g.len() != c || b.len() != c {
            bail!("norm parameters must have {c} entries");
        }
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(c) {
            let (mean, inv) = row_stats(row);
            out.extend(row.iter().zip(g).zip(b).map(|((&v, &g), &b)| (v - mean) * inv * g + b));
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        g: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (x, grad) = (x.contiguous()?, grad.contiguous()?);
        let dx = x.apply_op3_no_bwd(&g.contiguous()?, &grad, &AffineNormInputGrad)?;
        let dp = x.apply_op2_no_bwd(&grad, &AffineNormParamGrad)?;
        Ok((Some(dx), Some(dp.get(0)?), Some(dp.get(1)?)))
    }
}

impl CustomOp3 for AffineNormInputGrad {
    fn name(&self) -> &'static str {
        "affine-layer-norm-dx"
    }

    /// `dx = inv · (h − mean(h) − x̂ · mean(h · x̂))` with `h = grad · g`.
    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (x, g, grad) = (slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?);
        let c = last_dim(l1);
        let mut out = Vec::with_capacity(x.len());
        let mut h = vec![0f32; c];
        for (xr, gr) in x.chunks_exact(c).zip(grad.chunks_exact(c)) {
            let (mean, inv) = row_stats(xr);
            let (mut hm, mut hx) = (0f32, 0f32);
            for k in 0..c {
                h[k] = gr[k] * g[k];
                hm += h[k];
                hx += h[k] * (xr[k] - mean) * inv;
            }
            let (hm, hx) = (hm / c as f32, hx / c as f32);
            out.extend((0..c).map(|k| inv * (h[k] - hm - (xr[k] - mean) * inv * hx)));
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }
}

impl CustomOp2 for AffineNormParamGrad {
    fn name(&self) -> &'static str {
        "affine-layer-norm-dparams"
    }

    /// Rows `[dgain, dbias]`.
    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (x, grad) = (slice(s1, l1)?, slice(s2, l2)?);
        let c = last_dim(l1);
        let mut out = vec![0f32; 2 * c];
        for (xr, gr) in x.chunks_exact(c).zip(grad.chunks_exact(c)) {
            let (mean, inv) = row_stats(xr);
            for k in 0..c {
                out[k] += gr[k] * (xr[k] - mean) * inv;
                out[c + k] += gr[k];
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((2, c))))
    }
}

/// Layer norm over the last axis followed by a per-channel affine map.
pub(crate) fn affine_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op3(gain, bias, AffineNorm)
}

struct BiasAdd;
struct GroupRowSum(usize);

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "bias-add"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (x, b) = (slice(s1, l1)?, slice(s2, l2)?);
        let c = last_dim(l1);
        let groups = b.len() / c;
        if groups == 0 || b.len() % c != 0 || (x.len() / c) % groups != 0 {
            bail!("bias of {} values does not fit rows of {c}", b.len());
        }
        let per = x.len() / groups;
        let mut out = Vec::with_capacity(x.len());
        for (chunk, bg) in x.chunks_exact(per).zip(b.chunks_exact(c)) {
            for row in chunk.chunks_exact(c) {
                out.extend(row.iter().zip(bg).map(|(v, b)| v + b));
            }
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let groups = b.elem_count() / b.dims().last().copied().unwrap_or(1).max(1);
        let db = grad
            .contiguous()?
            .apply_op1_no_bwd(&GroupRowSum(groups))?
            .reshape(b.shape())?;
        Ok((Some(grad.clone()), Some(db)))
    }
}

impl CustomOp1 for GroupRowSum {
    fn name(&self) -> &'static str {
        "group-row-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let x = slice(s, l)?;
        let (c, groups) = (last_dim(l), self.0);
        let per = x.len() / groups;
        let mut out = vec![0f32; groups * c];
        for (chunk, o) in x.chunks_exact(per).zip(out.chunks_exact_mut(c)) {
            for row in chunk.chunks_exact(c) {
                o.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((groups, c))))
    }
}

/// Adds `bias` (`C` or `G × C`) to the last axis of `x`; with `G` groups the
/// leading rows of `x` are split into `G` equal consecutive blocks.
pub(crate) fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&bias.contiguous()?, BiasAdd)
}

/// `exp(x)` for `x <= 0`, branch-free so row loops vectorize; relative error
/// within a few ulp, flushing to zero below -87.
#[inline(always)]
fn exp_nonpositive(x: f32) -> f32 {
    const MAGIC: f32 = 12_582_912.0;
    let x = x.max(-87.0);
    let n = (x * std::f32::consts::LOG2_E + MAGIC) - MAGIC;
    let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
    let p = 1.987_569_1e-4f32;
    let p = p * r + 1.398_199_9e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_6e-2;
    let p = p * r + 0.166_666_66;
    let p = p * r + 0.5;
    let p = p * r * r + r + 1.0;
    p * f32::from_bits(((n as i32 + 127) as u32) << 23)
}

fn lane_sum(v: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let chunks = v.chunks_exact(8);
    let tail: f32 = chunks.remainder().iter().sum();
    for c in chunks {
        acc.iter_mut().zip(c).for_each(|(a, b)| *a += b);
    }
    acc.iter().sum::<f32>() + tail
}

struct Softmax;
struct SoftmaxGrad;

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let x = slice(s, l)?;
        let c = last_dim(l);
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(c) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let start = out.len();
            out.extend(row.iter().map(|&v| exp_nonpositive(v - max)));
            let inv = 1.0 / lane_sum(&out[start..]);
            out[start..].iter_mut().for_each(|v| *v *= inv);
        }
        Ok((CpuStorage::F32(out), l.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(
            res.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxGrad)?,
        ))
    }
}

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax-last-dx"
    }

    /// `dx = y · (g − Σ g·y)`.
    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (y, g) = (slice(s1, l1)?, slice(s2, l2)?);
        let c = last_dim(l1);
        let mut out = Vec::with_capacity(y.len());
        for (yr, gr) in y.chunks_exact(c).zip(g.chunks_exact(c)) {
            let mut acc = [0f32; 8];
            let (ya, ga) = (yr.chunks_exact(8), gr.chunks_exact(8));
            let mut dot: f32 = ya.remainder().iter().zip(ga.remainder()).map(|(a, b)| a * b).sum();
            for (a, b) in ya.zip(ga) {
                (0..8).for_each(|k| acc[k] += a[k] * b[k]);
            }
            dot += acc.iter().sum::<f32>();
            out.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }
}

/// Softmax over the last axis.
pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Softmax)
}
