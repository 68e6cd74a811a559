use crate::attention::{AttentionConfig, AttentionKind, AttentionOutput, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::nn::{Ctx, FeedForward, LayerNorm, Linear, ParamBuilder, ParamId};
use crate::tensor::{Real, Tensor, Var};

use super::config::PositionalKind;

/// Sinusoidal table: `sin(pos / 10000^(2i/d))` on even columns, `cos` on odd.
pub fn sinusoidal_table<T: Real>(max_len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(max_len * d);
    for pos in 0..max_len {
        for j in 0..d {
            let i2 = (j - j % 2) as f64;
            let angle = pos as f64 / 10000f64.powf(i2 / d as f64);
            data.push(T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(&[max_len, d], data).expect("positive sizes")
}

#[derive(Clone, Debug)]
enum PositionTable<T> {
    Fixed(Tensor<T>),
    Learned(ParamId),
}

/// Token embedding scaled by `sqrt(d)` plus a positional table.
#[derive(Clone, Debug)]
pub struct Embedder<T> {
    pub table: ParamId,
    positions: PositionTable<T>,
    pub max_len: usize,
    d_model: usize,
}

impl<T: Real> Embedder<T> {
    pub fn new(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        vocab: usize,
        d: usize,
        max_len: usize,
        kind: PositionalKind,
    ) -> Self {
        let std = (d as f64).powf(-0.5);
        let table = b.normal(&format!("{name}_embed.weight"), &[vocab, d], std);
        let positions = match kind {
            PositionalKind::Sinusoidal => PositionTable::Fixed(sinusoidal_table(max_len, d)),
            PositionalKind::Learned => PositionTable::Learned(b.normal(&format!("{name}_pos.weight"), &[max_len, d], std)),
        };
        Self {
            table,
            positions,
            max_len,
            d_model: d,
        }
    }

    /// Adds rows `0..len` of the positional table to `x (len×d)`.
    pub fn add_positions(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Result<Var> {
        let len = ctx.tape.shape(x)[0];
        if len > self.max_len {
            return Err(Error::TooLong {
                what: "positional encoding",
                len,
                max: self.max_len,
            });
        }
        let pe = match &self.positions {
            PositionTable::Fixed(t) => {
                let rows = Tensor::new(&[len, self.d_model], t.data()[..len * self.d_model].to_vec())?;
                ctx.tape.constant(rows)
            }
            PositionTable::Learned(id) => {
                let p = ctx.p(*id);
                ctx.tape.slice_rows(p, 0, len)?
            }
        };
        ctx.tape.add(x, pe)
    }

    /// `Embedding(ids)·sqrt(d) + PE`, followed by dropout.
    pub fn forward(&self, ctx: &mut Ctx<'_, '_, T>, ids: &[usize]) -> Result<Var> {
        if ids.len() > self.max_len {
            return Err(Error::TooLong {
                what: "sequence",
                len: ids.len(),
                max: self.max_len,
            });
        }
        let e = ctx.tape.embedding(ctx.p(self.table), ids)?;
        let e = ctx.tape.scale(e, (self.d_model as f64).sqrt());
        let e = self.add_positions(ctx, e)?;
        ctx.dropout(e)
    }
}

/// Post-norm encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    norm1: LayerNorm,
    ff: FeedForward,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, attn: AttentionConfig, ff_dim: usize) -> Result<Self> {
        let d = attn.d_model;
        Ok(Self {
            attention: MultiHeadAttention::new(b, &format!("{name}.attention"), attn)?,
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), d),
            ff: FeedForward::new(b, &format!("{name}.ff"), d, ff_dim),
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), d),
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Result<(Var, AttentionOutput)> {
        let att = self.attention.forward(ctx, x, x, false)?;
        let a = ctx.dropout(att.context)?;
        let x = ctx.tape.add(x, a)?;
        let x = self.norm1.forward(ctx, x)?;
        let f = self.ff.forward(ctx, x)?;
        let f = ctx.dropout(f)?;
        let x = ctx.tape.add(x, f)?;
        Ok((self.norm2.forward(ctx, x)?, att))
    }
}

/// Post-norm decoder layer: masked self-attention, cross-attention over the
/// fused encoder output, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attention: MultiHeadAttention,
    norm1: LayerNorm,
    pub cross_attention: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
    norm3: LayerNorm,
}

pub struct DecoderLayerOutput {
    pub hidden: Var,
    pub self_attention: AttentionOutput,
    pub cross_attention: AttentionOutput,
}

impl DecoderLayer {
    pub fn new<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        self_attn: AttentionConfig,
        cross_attn: AttentionConfig,
        ff_dim: usize,
    ) -> Result<Self> {
        let d = self_attn.d_model;
        Ok(Self {
            self_attention: MultiHeadAttention::new(b, &format!("{name}.self_attention"), self_attn)?,
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), d),
            cross_attention: MultiHeadAttention::new(b, &format!("{name}.cross_attention"), cross_attn)?,
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), d),
            ff: FeedForward::new(b, &format!("{name}.ff"), d, ff_dim),
            norm3: LayerNorm::new(b, &format!("{name}.norm3"), d),
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, '_, T>, y: Var, memory: Var) -> Result<DecoderLayerOutput> {
        let sa = self.self_attention.forward(ctx, y, y, true)?;
        let a = ctx.dropout(sa.context)?;
        let y = ctx.tape.add(y, a)?;
        let y = self.norm1.forward(ctx, y)?;
        let ca = self.cross_attention.forward(ctx, y, memory, false)?;
        let c = ctx.dropout(ca.context)?;
        let y = ctx.tape.add(y, c)?;
        let y = self.norm2.forward(ctx, y)?;
        let f = self.ff.forward(ctx, y)?;
        let f = ctx.dropout(f)?;
        let y = ctx.tape.add(y, f)?;
        Ok(DecoderLayerOutput {
            hidden: self.norm3.forward(ctx, y)?,
            self_attention: sa,
            cross_attention: ca,
        })
    }
}

/// One CFER block: `(X + GLU(Conv(X))) · sqrt(0.5)` with the convolution
/// doubling the channel count for the gate.
#[derive(Clone, Copy, Debug)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl ConvBlock {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, d: usize, kernel: usize) -> Self {
        Self {
            weight: b.glorot(&format!("{name}.weight"), &[kernel, d, 2 * d], kernel * d, kernel * 2 * d),
            bias: b.constant(&format!("{name}.bias"), &[2 * d], 0.0),
            kernel,
        }
    }

    /// The block without dropout.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Result<Var> {
        let h = ctx.tape.conv1d(x, ctx.p(self.weight), ctx.p(self.bias), self.kernel)?;
        let g = ctx.tape.glu(h)?;
        let r = ctx.tape.add(x, g)?;
        Ok(ctx.tape.scale(r, 0.5f64.sqrt()))
    }
}

/// Code feature extractor: convolutional blocks then a linear map to `d`.
#[derive(Clone, Debug)]
pub struct Cfer {
    pub blocks: Vec<ConvBlock>,
    pub project: Linear,
}

impl Cfer {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, d: usize, kernel: usize, n_blocks: usize) -> Self {
        Self {
            blocks: (0..n_blocks)
                .map(|i| ConvBlock::new(b, &format!("{name}.block{i}.conv"), d, kernel))
                .collect(),
            project: Linear::new(b, &format!("{name}.project"), d, d),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(ctx, h)?;
            h = ctx.dropout(h)?;
        }
        self.project.forward(ctx, h)
    }
}

/// `Z = C + Linear(F)`.
pub fn fuse<T: Real>(ctx: &mut Ctx<'_, '_, T>, map: &Linear, c: Var, f: Var) -> Result<Var> {
    let mapped = map.forward(ctx, f)?;
    ctx.tape.add(c, mapped)
}

pub(crate) fn attention_config(kind: AttentionKind, cfg: &super::ModelConfig, max_len: usize) -> AttentionConfig {
    AttentionConfig {
        kind,
        n_heads: cfg.n_heads,
        d_model: cfg.d_model,
        linear_k: cfg.linear_k,
        max_len,
        norm_gain_init: cfg.norm_gain(),
    }
}
