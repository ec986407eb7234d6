//! Transformer building blocks shared by the language model and the joint
//! vision-and-language encoder.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::param::{Init, ParamId, ParamStore};
use crate::{Error, Graph, Real, Result, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct EncoderBlockConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    /// MLP hidden width is `mlp_ratio * hidden_dim`.
    pub mlp_ratio: usize,
}

impl EncoderBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Per-position keep flags, `[batch, len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    batch: usize,
    len: usize,
    keep: Vec<bool>,
}

impl AttentionMask {
    pub fn new(batch: usize, len: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != batch * len {
            return Err(Error::MaskMismatch {
                mask: keep.len(),
                seq: batch * len,
            });
        }
        if len == 0 || keep.chunks_exact(len).any(|row| !row.iter().any(|&k| k)) {
            return Err(Error::Empty("attention mask row"));
        }
        Ok(AttentionMask { batch, len, keep })
    }

    pub fn all(batch: usize, len: usize) -> Self {
        AttentionMask {
            batch,
            len,
            keep: vec![true; batch * len],
        }
    }

    /// Single-sequence mask.
    pub fn from_keep(keep: &[bool]) -> Result<Self> {
        Self::new(1, keep.len(), keep.to_vec())
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn register<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        init: &mut Init<'_>,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), &[input, output], init);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), &[output]));
        Linear { weight, bias }
    }

    /// `x @ W (+ b)` over the last axis of `x`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(s, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(s, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn register<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add_ones(format!("{name}.gain"), &[dim]),
            bias: store.add_zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: Var) -> Result<Var> {
        let gain = g.param(s, self.gain);
        let bias = g.param(s, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Projections of one multi-head attention layer. The key projection has no
/// bias: a key bias only shifts every score of a query by the same amount,
/// which softmax cancels, so it would carry an identically zero gradient.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub num_heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AttentionParams {
    pub fn register<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        num_heads: usize,
        init: &mut Init<'_>,
    ) -> Self {
        AttentionParams {
            num_heads,
            query: Linear::register(store, &format!("{name}.wq"), dim, dim, true, init),
            key: Linear::register(store, &format!("{name}.wk"), dim, dim, false, init),
            value: Linear::register(store, &format!("{name}.wv"), dim, dim, true, init),
            output: Linear::register(store, &format!("{name}.wo"), dim, dim, true, init),
        }
    }
}

pub struct AttentionOutput {
    /// `[B, Lq, d]`
    pub output: Var,
    /// `[B, h, Lq, Lk]`
    pub weights: Var,
}

fn split_heads<F: Real>(g: &mut Graph<F>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, l, heads, d / heads])?;
    g.swap_axes(x, 1, 2)
}

/// Scaled dot-product attention of `queries` `[B, Lq, d]` over `keys_values`
/// `[B, Lk, d]`. Masked keys get a score of negative infinity, hence exactly
/// zero weight.
pub fn attention<F: Real>(
    g: &mut Graph<F>,
    s: &ParamStore<F>,
    p: &AttentionParams,
    queries: Var,
    keys_values: Var,
    key_mask: Option<&AttentionMask>,
) -> Result<AttentionOutput> {
    let (qs, ks) = (g.shape(queries).to_vec(), g.shape(keys_values).to_vec());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let (batch, lq, d) = (qs[0], qs[1], qs[2]);
    let lk = ks[1];
    let h = p.num_heads;
    if d % h != 0 {
        return Err(Error::Config(format!("hidden_dim {d} not divisible by {h} heads")));
    }
    if let Some(m) = key_mask {
        if m.len() != lk || m.batch() != batch {
            return Err(Error::MaskMismatch {
                mask: m.len(),
                seq: lk,
            });
        }
    }
    let q = p.query.forward(g, s, queries)?;
    let q = g.scale(q, 1.0 / Float::sqrt((d / h) as f64));
    let k = p.key.forward(g, s, keys_values)?;
    let v = p.value.forward(g, s, keys_values)?;
    let q = split_heads(g, q, h)?;
    let k = split_heads(g, k, h)?;
    let v = split_heads(g, v, h)?;
    let kt = g.transpose(k)?;
    let mut scores = g.matmul(q, kt)?;
    if let Some(m) = key_mask {
        if m.keep().iter().any(|&k| !k) {
            let mut bias = Tensor::zeros(&[batch, h, lq, lk]);
            for (row_idx, row) in bias.data_mut().chunks_exact_mut(lk).enumerate() {
                let b = row_idx / (h * lq);
                for (j, v) in row.iter_mut().enumerate() {
                    if !m.keep()[b * lk + j] {
                        *v = F::neg_infinity();
                    }
                }
            }
            let bias = g.constant(bias);
            scores = g.add(scores, bias)?;
        }
    }
    let weights = g.softmax(scores, 3)?;
    let ctx = g.matmul(weights, v)?;
    let ctx = g.swap_axes(ctx, 1, 2)?;
    let ctx = g.reshape(ctx, &[batch, lq, d])?;
    let output = p.output.forward(g, s, ctx)?;
    Ok(AttentionOutput { output, weights })
}

/// Self-attention over `x` `[B, L, d]`.
pub fn multi_head_attention<F: Real>(
    g: &mut Graph<F>,
    s: &ParamStore<F>,
    p: &AttentionParams,
    x: Var,
    mask: &AttentionMask,
) -> Result<Var> {
    Ok(attention(g, s, p, x, x, Some(mask))?.output)
}

/// Pre-layernorm residual block: `x + MHA(LN(x))`, then `+ MLP(LN(.))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: AttentionParams,
    pub ln_mlp: LayerNorm,
    pub fc_in: Linear,
    pub fc_out: Linear,
}

impl EncoderBlock {
    pub fn register<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &EncoderBlockConfig,
        init: &mut Init<'_>,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        Ok(EncoderBlock {
            ln_attn: LayerNorm::register(store, &format!("{name}.ln1"), d),
            attn: AttentionParams::register(store, &format!("{name}.attn"), d, cfg.num_heads, init),
            ln_mlp: LayerNorm::register(store, &format!("{name}.ln2"), d),
            fc_in: Linear::register(store, &format!("{name}.mlp.fc1"), d, d * cfg.mlp_ratio, true, init),
            fc_out: Linear::register(store, &format!("{name}.mlp.fc2"), d * cfg.mlp_ratio, d, true, init),
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: Var, mask: &AttentionMask) -> Result<Var> {
        let h = self.ln_attn.forward(g, s, x)?;
        let h = multi_head_attention(g, s, &self.attn, h, mask)?;
        let x = g.add(x, h)?;
        let h = self.ln_mlp.forward(g, s, x)?;
        let h = self.fc_in.forward(g, s, h)?;
        let h = g.gelu(h);
        let h = self.fc_out.forward(g, s, h)?;
        g.add(x, h)
    }
}

/// Adds rows `0..L` of a learned position table `[Lmax, d]` to `x`
/// `[.., L, d]`.
pub fn add_position_embeddings<F: Real>(g: &mut Graph<F>, s: &ParamStore<F>, x: Var, table: ParamId) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(Error::InvalidAxis {
            axis: 1,
            rank: shape.len(),
        });
    }
    let len = shape[shape.len() - 2];
    let tshape = s.get(table).value.shape().to_vec();
    if tshape.len() != 2 || tshape[1] != shape[shape.len() - 1] {
        return Err(Error::ShapeMismatch {
            op: "add_position_embeddings",
            lhs: shape,
            rhs: tshape,
        });
    }
    if len > tshape[0] {
        return Err(Error::SequenceTooLong { len, max: tshape[0] });
    }
    let t = g.param(s, table);
    let rows: Vec<usize> = (0..len).collect();
    let pos = g.select_rows(t, &rows)?;
    g.note_position_add(&s.get(table).name);
    g.add(x, pos)
}
