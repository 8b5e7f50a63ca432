//! Multi-head attention between two token sequences and the attention-based
//! latent alignment blend that replaces every self-attention in the denoiser.
//!
//! For a view `e` with reference views `r_1..r_N`:
//!
//! ```text
//! Attn(i, j)  = softmax(W_q(z_i) W_k(z_j)ᵀ / √c) W_v(z_j)
//! Align(e)    = λ Attn(e, e) + (1 − λ) / N Σ_k Attn(e, r_k)
//! ```
//!
//! The cross term averages N separate attentions; it is not a single softmax
//! over concatenated reference keys.

use candle_core::Tensor as CTensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Query, key and value projections, each `d × (heads · head_dim)`.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub w_q: CTensor,
    pub w_k: CTensor,
    pub w_v: CTensor,
    pub num_heads: usize,
}

impl AttentionWeights {
    pub fn new(w_q: CTensor, w_k: CTensor, w_v: CTensor, num_heads: usize) -> Result<Self> {
        let dq = w_q.dims2()?;
        if w_k.dims2()? != dq || w_v.dims2()? != dq {
            return Err(Error::invalid("q, k and v projections must share a shape"));
        }
        if num_heads == 0 || dq.1 % num_heads != 0 {
            return Err(Error::invalid(format!(
                "{} projection columns do not split into {num_heads} heads",
                dq.1
            )));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            num_heads,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w_q.dims()[0]
    }

    pub fn inner_dim(&self) -> usize {
        self.w_q.dims()[1]
    }

    pub fn head_dim(&self) -> usize {
        self.inner_dim() / self.num_heads
    }

    fn check_tokens(&self, z: &CTensor) -> Result<()> {
        let d = *z.dims().last().unwrap_or(&0);
        if d != self.input_dim() || !(2..=3).contains(&z.rank()) {
            return Err(Error::ShapeMismatch {
                expected: vec![self.input_dim()],
                actual: z.dims().to_vec(),
            });
        }
        Ok(())
    }

    /// `(n, L, d)` → `(n, heads, L, head_dim)`.
    fn split_heads(&self, z: &CTensor, w: &CTensor) -> Result<CTensor> {
        let (n, l, _) = z.dims3()?;
        Ok(z.broadcast_matmul(w)?
            .reshape((n, l, self.num_heads, self.head_dim()))?
            .transpose(1, 2)?
            .contiguous()?)
    }
}

/// Keys and values of one token sequence, reusable across queries.
pub(crate) struct KeyValue {
    k: CTensor,
    v: CTensor,
}

fn as_batched(z: &CTensor) -> Result<CTensor> {
    Ok(if z.rank() == 2 { z.unsqueeze(0)? } else { z.clone() })
}

pub(crate) fn project_kv(z: &CTensor, w: &AttentionWeights) -> Result<KeyValue> {
    w.check_tokens(z)?;
    let z = as_batched(z)?;
    Ok(KeyValue {
        k: w.split_heads(&z, &w.w_k)?,
        v: w.split_heads(&z, &w.w_v)?,
    })
}

pub(crate) fn project_q(z: &CTensor, w: &AttentionWeights) -> Result<CTensor> {
    w.check_tokens(z)?;
    w.split_heads(&as_batched(z)?, &w.w_q)
}

/// Attention of pre-projected queries `(n, h, Li, c)` over keys/values;
/// returns heads concatenated as `(n, Li, h·c)`.
pub(crate) fn attend(q: &CTensor, kv: &KeyValue) -> Result<CTensor> {
    let (n, h, li, c) = q.dims4()?;
    let scale = 1.0 / (c as f64).sqrt();
    let logits = (q.matmul(&kv.k.t()?)? * scale)?;
    let probs = crate::kernels::softmax_last(&logits)?;
    Ok(probs.matmul(&kv.v)?.transpose(1, 2)?.reshape((n, li, h * c))?)
}

fn restore_rank(out: CTensor, like: &CTensor) -> Result<CTensor> {
    Ok(if like.rank() == 2 { out.squeeze(0)? } else { out })
}

/// Attention of `z_i` (`L_i × d`, or `n × L_i × d`) over `z_j`. The output has
/// `heads · head_dim` features per query token; the output projection belongs
/// to the calling layer.
pub fn attention(z_i: &CTensor, z_j: &CTensor, w: &AttentionWeights) -> Result<CTensor> {
    let q = project_q(z_i, w)?;
    let kv = project_kv(z_j, w)?;
    restore_rank(attend(&q, &kv)?, z_i)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub lambda: f64,
    pub reference_ids: Vec<usize>,
    pub enabled: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            lambda: 0.6,
            reference_ids: Vec::new(),
            enabled: true,
        }
    }
}

impl AlignmentConfig {
    pub fn disabled() -> Self {
        Self {
            lambda: 1.0,
            reference_ids: Vec::new(),
            enabled: false,
        }
    }

    pub fn new(lambda: f64, reference_ids: Vec<usize>) -> Result<Self> {
        let cfg = Self {
            lambda,
            reference_ids,
            enabled: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!(
                "alignment lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        let mut ids = self.reference_ids.clone();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate reference view ids"));
        }
        Ok(())
    }

    /// Whether the cross-view term contributes at all.
    pub fn is_active(&self) -> bool {
        self.enabled && self.lambda < 1.0
    }

    /// Check that every reference id names a view of the batch.
    pub fn validate_against(&self, view_ids: &[usize]) -> Result<()> {
        self.validate()?;
        if !self.enabled {
            return Ok(());
        }
        if self.is_active() && self.reference_ids.is_empty() {
            return Err(Error::invalid(
                "alignment enabled with lambda < 1 but no reference views",
            ));
        }
        if let Some(missing) = self.reference_ids.iter().find(|r| !view_ids.contains(r)) {
            return Err(Error::invalid(format!("reference view {missing} is not in the batch")));
        }
        Ok(())
    }

    /// Reference ids in summation order (ascending).
    pub fn sorted_references(&self) -> Vec<usize> {
        let mut ids = self.reference_ids.clone();
        ids.sort_unstable();
        ids
    }
}

/// λ-blend of self-attention with the mean cross-attention to `refs`, summed
/// in the order given. Disabled alignment returns plain self-attention.
pub fn attn_align(z_e: &CTensor, refs: &[&CTensor], w: &AttentionWeights, cfg: &AlignmentConfig) -> Result<CTensor> {
    cfg.validate()?;
    if !cfg.is_active() {
        return attention(z_e, z_e, w);
    }
    if refs.is_empty() {
        return Err(Error::invalid("attn_align needs at least one reference"));
    }
    let q = project_q(z_e, w)?;
    let self_kv = project_kv(z_e, w)?;
    let ref_kv = refs.iter().map(|r| project_kv(r, w)).collect::<Result<Vec<_>>>()?;
    restore_rank(
        blend(&q, &self_kv, &ref_kv.iter().collect::<Vec<_>>(), cfg.lambda)?,
        z_e,
    )
}

fn blend(q: &CTensor, self_kv: &KeyValue, refs: &[&KeyValue], lambda: f64) -> Result<CTensor> {
    let own = attend(q, self_kv)?;
    let mut cross = attend(q, refs[0])?;
    for kv in &refs[1..] {
        cross = (cross + attend(q, kv)?)?;
    }
    let cross = (cross * (1.0 / refs.len() as f64))?;
    Ok(((own * lambda)? + (cross * (1.0 - lambda))?)?)
}

/// One attention layer over a batch of views.
///
/// `tokens[i]` holds the token sequence of view `view_ids[i]`. Reference views
/// get plain self-attention; every other view gets [`attn_align`] against the
/// references, summed in ascending view-id order.
pub fn batch_align_layer(
    view_ids: &[usize],
    tokens: &[CTensor],
    cfg: &AlignmentConfig,
    w: &AttentionWeights,
) -> Result<Vec<CTensor>> {
    if view_ids.len() != tokens.len() {
        return Err(Error::invalid("one token sequence per view id"));
    }
    cfg.validate_against(view_ids)?;
    let kvs = tokens.iter().map(|t| project_kv(t, w)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&KeyValue> = cfg
        .sorted_references()
        .iter()
        .map(|r| {
            let pos = view_ids.iter().position(|v| v == r).expect("validated above");
            &kvs[pos]
        })
        .collect();
    tokens
        .iter()
        .zip(view_ids)
        .zip(&kvs)
        .map(|((t, id), kv)| {
            let q = project_q(t, w)?;
            let out = if !cfg.is_active() || cfg.reference_ids.contains(id) {
                attend(&q, kv)?
            } else {
                blend(&q, kv, &refs, cfg.lambda)?
            };
            restore_rank(out, t)
        })
        .collect()
}
