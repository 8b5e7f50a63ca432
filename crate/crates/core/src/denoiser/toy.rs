use candle_core::{DType, Device, Tensor as CTensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::im2col::gather3;
use super::Denoiser;
use crate::attention::{batch_align_layer, AlignmentConfig, AttentionWeights};
use crate::diffusion::{build_schedule, Condition, LatentCode};
use crate::error::{Error, Result};
use crate::kernels::{add_bias, affine_norm};
use crate::tensor::Tensor;

/// Architecture hyper-parameters of [`ToyDenoiser`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub latent_channels: usize,
    /// Latent grid side; must be divisible by 4.
    pub latent_size: usize,
    /// Widths at full, half and quarter latent resolution.
    pub widths: [usize; 3],
    /// Number of condition labels including the null label 0.
    pub num_labels: u32,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_train_steps: usize,
    /// Scale on the depth branch injections.
    pub depth_strength: f64,
    pub init_seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            latent_channels: 48,
            latent_size: 16,
            widths: [32, 64, 64],
            num_labels: 4,
            embed_dim: 64,
            num_heads: 4,
            num_train_steps: 1000,
            depth_strength: 1.0,
            init_seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_size == 0 || self.latent_size % 4 != 0 {
            return Err(Error::invalid("latent size must be a positive multiple of 4"));
        }
        if self.widths.iter().any(|&w| w == 0 || w % self.num_heads.max(1) != 0) || self.num_heads == 0 {
            return Err(Error::invalid("widths must be positive multiples of the head count"));
        }
        if self.latent_channels == 0 || self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(Error::invalid("bad channel or embedding size"));
        }
        if self.num_labels < 2 || self.num_train_steps == 0 {
            return Err(Error::invalid("need a non-null label and a positive step count"));
        }
        if !self.depth_strength.is_finite() {
            return Err(Error::NonFinite("depth strength".into()));
        }
        Ok(())
    }
}

/// Creates named parameters in a fixed order from a seeded stream.
pub(crate) struct ParamStore {
    pub(crate) vars: Vec<(String, Var)>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    fn new(seed: u64) -> Self {
        Self {
            vars: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn add(&mut self, name: String, shape: &[usize], data: Vec<f32>) -> Result<CTensor> {
        let var = Var::from_tensor(&CTensor::from_vec(data, shape, &Device::Cpu)?)?;
        let t = var.as_tensor().clone();
        self.vars.push((name, var));
        Ok(t)
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<CTensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        self.add(name, shape, data)
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f32) -> Result<CTensor> {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![v; n])
    }
}

struct Lin {
    w: CTensor,
    b: CTensor,
}

impl Lin {
    fn new(p: &mut ParamStore, name: &str, i: usize, o: usize) -> Result<Self> {
        Ok(Self {
            w: p.normal(format!("{name}.weight"), &[i, o], 1.0 / (i as f64).sqrt())?,
            b: p.constant(format!("{name}.bias"), &[o], 0.0)?,
        })
    }

    fn zero(p: &mut ParamStore, name: &str, i: usize, o: usize) -> Result<Self> {
        Ok(Self {
            w: p.constant(format!("{name}.weight"), &[i, o], 0.0)?,
            b: p.constant(format!("{name}.bias"), &[o], 0.0)?,
        })
    }

    /// Applies to the last axis of any-rank input.
    fn forward(&self, x: &CTensor) -> Result<CTensor> {
        let mut dims = x.dims().to_vec();
        let i = *dims.last().expect("rank >= 1");
        let rows = x.elem_count() / i;
        let y = add_bias(&x.reshape((rows, i))?.matmul(&self.w)?, &self.b)?;
        *dims.last_mut().expect("rank >= 1") = self.w.dims()[1];
        Ok(y.reshape(dims)?)
    }
}

/// Layer normalization over the channel axis with a learned gain and bias.
struct Norm {
    g: CTensor,
    b: CTensor,
}

impl Norm {
    fn new(p: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            g: p.constant(format!("{name}.gain"), &[c], 1.0)?,
            b: p.constant(format!("{name}.bias"), &[c], 0.0)?,
        })
    }

    fn forward(&self, x: &CTensor) -> Result<CTensor> {
        Ok(affine_norm(x, &self.g, &self.b)?)
    }
}

/// 3×3 same-padded convolution on `(B, H, W, C)`.
struct Conv3 {
    lin: Lin,
}

impl Conv3 {
    fn new(p: &mut ParamStore, name: &str, i: usize, o: usize) -> Result<Self> {
        Ok(Self {
            lin: Lin::new(p, name, 9 * i, o)?,
        })
    }

    fn forward(&self, x: &CTensor) -> Result<CTensor> {
        self.lin.forward(&gather3(x)?)
    }
}

enum Mix {
    Conv(Conv3),
    Pointwise(Lin),
}

impl Mix {
    fn forward(&self, x: &CTensor) -> Result<CTensor> {
        match self {
            Mix::Conv(c) => c.forward(x),
            Mix::Pointwise(l) => l.forward(x),
        }
    }
}

/// Pre-norm residual block: spatial (3×3) or per-token mixing, embedding
/// shift, then a zero-initialized per-token projection.
struct ResBlock {
    n1: Norm,
    c1: Mix,
    emb: Lin,
    n2: Norm,
    c2: Lin,
}

impl ResBlock {
    fn new(p: &mut ParamStore, name: &str, c: usize, e: usize, spatial: bool) -> Result<Self> {
        let n1 = Norm::new(p, &format!("{name}.norm1"), c)?;
        let c1 = if spatial {
            Mix::Conv(Conv3::new(p, &format!("{name}.conv1"), c, c)?)
        } else {
            Mix::Pointwise(Lin::new(p, &format!("{name}.conv1"), c, c)?)
        };
        Ok(Self {
            n1,
            c1,
            emb: Lin::new(p, &format!("{name}.emb"), e, c)?,
            n2: Norm::new(p, &format!("{name}.norm2"), c)?,
            c2: Lin::zero(p, &format!("{name}.conv2"), c, c)?,
        })
    }

    fn forward(&self, x: &CTensor, emb: &CTensor) -> Result<CTensor> {
        let h = self.c1.forward(&self.n1.forward(x)?.relu()?)?;
        let h = add_bias(&h, &self.emb.forward(emb)?)?;
        let h = self.c2.forward(&self.n2.forward(&h)?.relu()?)?;
        Ok((x + h)?)
    }
}

/// `(B, H, W, C)` → `(B, H/2, W/2, 4C)`.
fn space_to_depth(x: &CTensor) -> Result<CTensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape(vec![b, h / 2, 2, w / 2, 2, c])?
        .permute([0, 1, 3, 2, 4, 5])?
        .reshape((b, h / 2, w / 2, 4 * c))?)
}

/// `(B, H, W, 4C)` → `(B, 2H, 2W, C)`.
fn depth_to_space(x: &CTensor) -> Result<CTensor> {
    let (b, h, w, c4) = x.dims4()?;
    let c = c4 / 4;
    Ok(x.reshape(vec![b, h, w, 2, 2, c])?
        .permute([0, 1, 3, 2, 4, 5])?
        .reshape((b, 2 * h, 2 * w, c))?)
}

struct AttnLayer {
    norm: Norm,
    weights: AttentionWeights,
    out: Lin,
}

impl AttnLayer {
    fn new(p: &mut ParamStore, name: &str, c: usize, heads: usize) -> Result<Self> {
        let std = 1.0 / (c as f64).sqrt();
        let norm = Norm::new(p, &format!("{name}.norm"), c)?;
        let w_q = p.normal(format!("{name}.w_q"), &[c, c], std)?;
        let w_k = p.normal(format!("{name}.w_k"), &[c, c], std)?;
        let w_v = p.normal(format!("{name}.w_v"), &[c, c], std)?;
        Ok(Self {
            norm,
            weights: AttentionWeights::new(w_q, w_k, w_v, heads)?,
            out: Lin::new(p, &format!("{name}.out"), c, c)?,
        })
    }

    fn forward(&self, xs: &[CTensor], ids: &[usize], align: &AlignmentConfig) -> Result<Vec<CTensor>> {
        let tokens = xs
            .iter()
            .map(|x| {
                let (b, h, w, c) = x.dims4()?;
                Ok(self.norm.forward(x)?.reshape((b, h * w, c))?)
            })
            .collect::<Result<Vec<_>>>()?;
        let mixed = batch_align_layer(ids, &tokens, align, &self.weights)?;
        xs.iter()
            .zip(mixed)
            .map(|(x, m)| Ok((x + self.out.forward(&m)?.reshape(x.shape())?)?))
            .collect()
    }
}

/// Input to one forward pass: a group of samples that share nothing but the
/// batch axis. Attention mixes groups only through the alignment config.
pub(crate) struct Group {
    /// `(B, S, S, C)` channel-last latents.
    pub x: CTensor,
    pub timesteps: Vec<usize>,
    pub labels: Vec<u32>,
    /// `(B, S, S, 1)` normalized depth.
    pub depth: Option<CTensor>,
}

/// Small attention U-Net predicting `ε` from a `C × S × S` latent.
///
/// Two patch-merging down stages and two up stages with skip connections,
/// residual 3×3 blocks modulated by time and label embeddings, attention after
/// every trunk block except the middle one (five layers, all routed through
/// [`batch_align_layer`]), and a
/// parallel depth encoder that mirrors the down path and adds into it through
/// zero-initialized linear maps. The output is `√(1−ᾱ_t) z_t + F(z_t)`.
pub struct ToyDenoiser {
    config: ToyConfig,
    params: Vec<(String, Var)>,
    alpha_bar: Vec<f64>,
    time1: Lin,
    time2: Lin,
    label_table: CTensor,
    label_proj: Lin,
    stem: Lin,
    res0: ResBlock,
    down1: Lin,
    res1: ResBlock,
    attn0: AttnLayer,
    attn1: AttnLayer,
    down2: Lin,
    res2: ResBlock,
    attn2: AttnLayer,
    attn_up1: AttnLayer,
    attn_up0: AttnLayer,
    mid: ResBlock,
    up2: Lin,
    fuse1: Lin,
    res_up1: ResBlock,
    up1: Lin,
    fuse0: Lin,
    res_up0: ResBlock,
    out_norm: Norm,
    head: Lin,
    depth_stem_z: Lin,
    depth_stem_d: Lin,
    depth_res0: ResBlock,
    depth_down1: Lin,
    depth_res1: ResBlock,
    depth_down2: Lin,
    depth_res2: ResBlock,
    inject: [Lin; 3],
}

fn each(xs: &[CTensor], f: impl Fn(&CTensor) -> Result<CTensor>) -> Result<Vec<CTensor>> {
    xs.iter().map(f).collect()
}

fn each2(xs: &[CTensor], ys: &[CTensor], f: impl Fn(&CTensor, &CTensor) -> Result<CTensor>) -> Result<Vec<CTensor>> {
    xs.iter().zip(ys).map(|(x, y)| f(x, y)).collect()
}

impl ToyDenoiser {
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new(config.init_seed);
        let [w0, w1, w2] = config.widths;
        let (c, e, tdim) = (config.latent_channels, config.embed_dim * 2, config.embed_dim);
        let heads = config.num_heads;
        let time1 = Lin::new(&mut p, "time.fc1", tdim, e)?;
        let time2 = Lin::new(&mut p, "time.fc2", e, e)?;
        let label_table = p.normal("label.table".into(), &[config.num_labels as usize, tdim], 1.0)?;
        let label_proj = Lin::new(&mut p, "label.proj", tdim, e)?;
        let stem = Lin::new(&mut p, "trunk.stem", c, w0)?;
        let res0 = ResBlock::new(&mut p, "trunk.res0", w0, e, true)?;
        let attn0 = AttnLayer::new(&mut p, "trunk.attn0", w0, heads)?;
        let down1 = Lin::new(&mut p, "trunk.down1", 4 * w0, w1)?;
        let res1 = ResBlock::new(&mut p, "trunk.res1", w1, e, true)?;
        let attn1 = AttnLayer::new(&mut p, "trunk.attn1", w1, heads)?;
        let down2 = Lin::new(&mut p, "trunk.down2", 4 * w1, w2)?;
        let res2 = ResBlock::new(&mut p, "trunk.res2", w2, e, true)?;
        let attn2 = AttnLayer::new(&mut p, "trunk.attn2", w2, heads)?;
        let mid = ResBlock::new(&mut p, "trunk.mid", w2, e, true)?;
        let up2 = Lin::new(&mut p, "trunk.up2", w2, 4 * w1)?;
        let fuse1 = Lin::new(&mut p, "trunk.fuse1", 2 * w1, w1)?;
        let res_up1 = ResBlock::new(&mut p, "trunk.res_up1", w1, e, true)?;
        let attn_up1 = AttnLayer::new(&mut p, "trunk.attn_up1", w1, heads)?;
        let up1 = Lin::new(&mut p, "trunk.up1", w1, 4 * w0)?;
        let fuse0 = Lin::new(&mut p, "trunk.fuse0", 2 * w0, w0)?;
        let res_up0 = ResBlock::new(&mut p, "trunk.res_up0", w0, e, true)?;
        let attn_up0 = AttnLayer::new(&mut p, "trunk.attn_up0", w0, heads)?;
        let out_norm = Norm::new(&mut p, "trunk.out_norm", w0)?;
        let head = Lin::zero(&mut p, "trunk.head", w0, c)?;
        let depth_stem_z = Lin::new(&mut p, "depth.stem_z", c, w0)?;
        let depth_stem_d = Lin::new(&mut p, "depth.stem_d", 1, w0)?;
        let depth_res0 = ResBlock::new(&mut p, "depth.res0", w0, e, false)?;
        let depth_down1 = Lin::new(&mut p, "depth.down1", 4 * w0, w1)?;
        let depth_res1 = ResBlock::new(&mut p, "depth.res1", w1, e, false)?;
        let depth_down2 = Lin::new(&mut p, "depth.down2", 4 * w1, w2)?;
        let depth_res2 = ResBlock::new(&mut p, "depth.res2", w2, e, false)?;
        let inject = [
            Lin::zero(&mut p, "depth.inject0", w0, w0)?,
            Lin::zero(&mut p, "depth.inject1", w1, w1)?,
            Lin::zero(&mut p, "depth.inject2", w2, w2)?,
        ];
        let alpha_bar = build_schedule(config.num_train_steps, 1)?.alpha_bar;
        Ok(Self {
            config,
            params: p.vars,
            alpha_bar,
            time1,
            time2,
            label_table,
            label_proj,
            stem,
            res0,
            down1,
            res1,
            attn0,
            attn1,
            down2,
            res2,
            attn2,
            attn_up1,
            attn_up0,
            mid,
            up2,
            fuse1,
            res_up1,
            up1,
            fuse0,
            res_up0,
            out_norm,
            head,
            depth_stem_z,
            depth_stem_d,
            depth_res0,
            depth_down1,
            depth_res1,
            depth_down2,
            depth_res2,
            inject,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn set_depth_strength(&mut self, s: f64) {
        self.config.depth_strength = s;
    }

    /// Parameters in creation (layer) order.
    pub fn parameters(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn embedding(&self, g: &Group) -> Result<CTensor> {
        let half = self.config.embed_dim / 2;
        let mut sin = Vec::with_capacity(g.timesteps.len() * 2 * half);
        for &t in &g.timesteps {
            let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() * t as f64);
            let (s, c): (Vec<f32>, Vec<f32>) = freqs.map(|a| (a.sin() as f32, a.cos() as f32)).unzip();
            sin.extend(s);
            sin.extend(c);
        }
        let sin = CTensor::from_vec(sin, (g.timesteps.len(), 2 * half), &Device::Cpu)?;
        let temb = self.time2.forward(&self.time1.forward(&sin)?.relu()?)?;
        let ids = CTensor::from_vec(g.labels.clone(), g.labels.len(), &Device::Cpu)?;
        let cemb = self.label_proj.forward(&self.label_table.index_select(&ids, 0)?)?;
        Ok((temb + cemb)?.relu()?)
    }

    /// Joint forward pass; one output per group, shaped like its input.
    pub(crate) fn forward(&self, groups: &[Group], ids: &[usize], align: &AlignmentConfig) -> Result<Vec<CTensor>> {
        let embs = groups.iter().map(|g| self.embedding(g)).collect::<Result<Vec<_>>>()?;
        let xs: Vec<CTensor> = groups.iter().map(|g| g.x.clone()).collect();
        let s = self.config.depth_strength;

        // depth encoder: one injection per resolution, absent without depth
        let mut injections: Vec<Option<[CTensor; 3]>> = Vec::with_capacity(groups.len());
        for (g, e) in groups.iter().zip(&embs) {
            injections.push(match &g.depth {
                None => None,
                Some(d) => {
                    let h0 = (self.depth_stem_z.forward(&g.x)? + self.depth_stem_d.forward(d)?)?;
                    let h0 = self.depth_res0.forward(&h0, e)?;
                    let h1 = self
                        .depth_res1
                        .forward(&self.depth_down1.forward(&space_to_depth(&h0)?)?, e)?;
                    let h2 = self
                        .depth_res2
                        .forward(&self.depth_down2.forward(&space_to_depth(&h1)?)?, e)?;
                    Some([
                        (self.inject[0].forward(&h0)? * s)?,
                        (self.inject[1].forward(&h1)? * s)?,
                        (self.inject[2].forward(&h2)? * s)?,
                    ])
                }
            });
        }
        let add_inj = |hs: Vec<CTensor>, level: usize| -> Result<Vec<CTensor>> {
            hs.into_iter()
                .zip(&injections)
                .map(|(h, inj)| match inj {
                    Some(i) => Ok((h + &i[level])?),
                    None => Ok(h),
                })
                .collect()
        };

        let h0 = each(&xs, |x| self.stem.forward(x))?;
        let h0 = each2(&h0, &embs, |h, e| self.res0.forward(h, e))?;
        let h0 = add_inj(h0, 0)?;
        let skip0 = self.attn0.forward(&h0, ids, align)?;
        let h1 = each(&skip0, |h| self.down1.forward(&space_to_depth(h)?))?;
        let h1 = each2(&h1, &embs, |h, e| self.res1.forward(h, e))?;
        let h1 = add_inj(h1, 1)?;
        let skip1 = self.attn1.forward(&h1, ids, align)?;
        let h2 = each(&skip1, |h| self.down2.forward(&space_to_depth(h)?))?;
        let h2 = each2(&h2, &embs, |h, e| self.res2.forward(h, e))?;
        let h2 = add_inj(h2, 2)?;
        let h2 = self.attn2.forward(&h2, ids, align)?;
        let h2 = each2(&h2, &embs, |h, e| self.mid.forward(h, e))?;
        let u1 = each2(&h2, &skip1, |h, sk| {
            let up = depth_to_space(&self.up2.forward(h)?)?;
            self.fuse1.forward(&CTensor::cat(&[&up, sk], 3)?)
        })?;
        let u1 = each2(&u1, &embs, |h, e| self.res_up1.forward(h, e))?;
        let u1 = self.attn_up1.forward(&u1, ids, align)?;
        let u0 = each2(&u1, &skip0, |h, sk| {
            let up = depth_to_space(&self.up1.forward(h)?)?;
            self.fuse0.forward(&CTensor::cat(&[&up, sk], 3)?)
        })?;
        let u0 = each2(&u0, &embs, |h, e| self.res_up0.forward(h, e))?;
        let u0 = self.attn_up0.forward(&u0, ids, align)?;

        groups
            .iter()
            .zip(u0)
            .map(|(g, u)| {
                let f = self.head.forward(&self.out_norm.forward(&u)?.relu()?)?;
                let skip: Vec<f32> = g
                    .timesteps
                    .iter()
                    .map(|&t| (1.0 - self.alpha_bar[t]).sqrt() as f32)
                    .collect();
                let skip = CTensor::from_vec(skip, (g.timesteps.len(), 1, 1, 1), &Device::Cpu)?;
                Ok((g.x.broadcast_mul(&skip)? + f)?)
            })
            .collect()
    }

    fn check_latent(&self, t: &Tensor) -> Result<()> {
        let s = self.config.latent_size;
        t.ensure_shape(&[self.config.latent_channels, s, s])
    }

    /// `C × S × S` → `(1, S, S, C)`.
    pub(crate) fn to_channel_last(t: &Tensor) -> Result<CTensor> {
        let sh = t.shape();
        Ok(CTensor::from_slice(t.data(), (1, sh[0], sh[1], sh[2]), &Device::Cpu)?
            .permute([0, 2, 3, 1])?
            .contiguous()?)
    }

    pub(crate) fn from_channel_last(x: &CTensor) -> Result<Tensor> {
        let (_, h, w, c) = x.dims4()?;
        let data = x
            .permute([0, 3, 1, 2])?
            .flatten_all()?
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?;
        Tensor::new(vec![c, h, w], data)
    }
}

impl Denoiser for ToyDenoiser {
    /// Each view runs as its own batch-of-one group, so with alignment
    /// disabled a view's prediction does not depend on the rest of the batch.
    fn predict(
        &self,
        batch: &[LatentCode],
        timestep: usize,
        cond: Condition,
        depths: &[Tensor],
        align: &AlignmentConfig,
    ) -> Result<Vec<Tensor>> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if cond.0 >= self.config.num_labels {
            return Err(Error::UnknownCondition(cond.0));
        }
        if timestep > self.config.num_train_steps {
            return Err(Error::invalid(format!("timestep {timestep} beyond the schedule")));
        }
        if !depths.is_empty() && depths.len() != batch.len() {
            return Err(Error::invalid(format!(
                "{} depth maps for {} latents",
                depths.len(),
                batch.len()
            )));
        }
        let s = self.config.latent_size;
        let ids: Vec<usize> = batch.iter().map(|z| z.view_id).collect();
        if align.is_active() {
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::invalid("aligned batches need distinct view ids"));
            }
        }
        let groups = batch
            .iter()
            .enumerate()
            .map(|(i, z)| {
                self.check_latent(&z.data)?;
                let depth = match depths.get(i) {
                    None => None,
                    Some(d) => {
                        d.ensure_shape(&[s, s])?;
                        Some(CTensor::from_slice(d.data(), (1, s, s, 1), &Device::Cpu)?)
                    }
                };
                Ok(Group {
                    x: Self::to_channel_last(&z.data)?,
                    timesteps: vec![timestep],
                    labels: vec![cond.0],
                    depth,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.forward(&groups, &ids, align)?
            .iter()
            .map(|x| {
                let t = Self::from_channel_last(x)?;
                if !t.is_finite() {
                    return Err(Error::NonFinite("denoiser output".into()));
                }
                Ok(t)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyConfig {
        ToyConfig {
            latent_channels: 6,
            latent_size: 8,
            widths: [8, 8, 8],
            num_labels: 3,
            embed_dim: 8,
            num_heads: 2,
            num_train_steps: 100,
            depth_strength: 1.0,
            init_seed: 3,
        }
    }

    fn latent(seed: u64, id: usize) -> LatentCode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0f32, 1.0).unwrap();
        let data = (0..6 * 64).map(|_| n.sample(&mut rng)).collect();
        LatentCode::new(Tensor::new(vec![6, 8, 8], data).unwrap(), 0, id)
    }

    fn depth(v: f32) -> Tensor {
        Tensor::full(&[8, 8], v)
    }

    #[test]
    fn space_depth_roundtrip() {
        let x = CTensor::arange(0f32, 2.0 * 4.0 * 4.0 * 3.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 4, 4, 3))
            .unwrap();
        let back = depth_to_space(&space_to_depth(&x).unwrap()).unwrap();
        assert_eq!(
            back.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn channel_layout_roundtrip() {
        let z = latent(1, 0).data;
        let back = ToyDenoiser::from_channel_last(&ToyDenoiser::to_channel_last(&z).unwrap()).unwrap();
        assert_eq!(back, z);
    }

    #[test]
    fn untrained_depth_branch_is_inert() {
        let m = ToyDenoiser::new(small()).unwrap();
        let z = [latent(2, 0)];
        let off = AlignmentConfig::disabled();
        let a = m.predict(&z, 40, Condition(1), &[depth(0.1)], &off).unwrap();
        let b = m.predict(&z, 40, Condition(1), &[depth(0.9)], &off).unwrap();
        let c = m.predict(&z, 40, Condition(1), &[], &off).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn batch_members_are_independent_without_alignment() {
        let m = ToyDenoiser::new(small()).unwrap();
        let (z0, z1) = (latent(4, 0), latent(5, 1));
        let off = AlignmentConfig::disabled();
        let joint = m
            .predict(&[z0.clone(), z1.clone()], 10, Condition(2), &[], &off)
            .unwrap();
        let solo = m.predict(&[z0.clone()], 10, Condition(2), &[], &off).unwrap();
        assert_eq!(joint[0], solo[0]);
        let swapped = m.predict(&[z1, z0.clone()], 10, Condition(2), &[], &off).unwrap();
        assert_eq!(swapped[1], joint[0]);
        let dup = m.predict(&[z0.clone(), z0], 10, Condition(2), &[], &off).unwrap();
        assert_eq!(dup[0], dup[1]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = ToyDenoiser::new(small()).unwrap();
        let off = AlignmentConfig::disabled();
        let z = latent(1, 0);
        assert!(matches!(
            m.predict(&[z.clone()], 1, Condition(3), &[], &off),
            Err(Error::UnknownCondition(3))
        ));
        assert!(m.predict(&[z.clone()], 101, Condition(1), &[], &off).is_err());
        assert!(m
            .predict(&[z.clone()], 1, Condition(1), &[depth(0.0), depth(0.0)], &off)
            .is_err());
        let bad = LatentCode::new(Tensor::zeros(&[6, 4, 4]), 0, 0);
        assert!(m.predict(&[bad], 1, Condition(1), &[], &off).is_err());
        let mut cfg = small();
        cfg.latent_size = 6;
        assert!(ToyDenoiser::new(cfg).is_err());
    }

    #[test]
    fn output_starts_at_linear_baseline() {
        let m = ToyDenoiser::new(small()).unwrap();
        let z = latent(6, 0);
        let out = m
            .predict(&[z.clone()], 50, Condition(1), &[], &AlignmentConfig::disabled())
            .unwrap();
        let f = (1.0 - m.alpha_bar[50]).sqrt() as f32;
        for (o, v) in out[0].data().iter().zip(z.data.data()) {
            assert!((o - f * v).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic_initialization() {
        let a = ToyDenoiser::new(small()).unwrap();
        let b = ToyDenoiser::new(small()).unwrap();
        for ((na, va), (nb, vb)) in a.parameters().iter().zip(b.parameters()) {
            assert_eq!(na, nb);
            let x = va.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let y = vb.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(x, y);
        }
    }
}
