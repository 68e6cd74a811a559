//! Multi-head attention with four interchangeable kernels: scaled dot-product,
//! linear (length-projected keys/values), dense synthesizer and
//! query-key-normalised attention.

pub mod kernels;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, ParamBuilder, ParamId};
use crate::tensor::{Real, Tape, Tensor, Var};

pub use kernels::{causal_mask, HeadOutput, NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    SelfAttention,
    Linear,
    Synthesizer,
    Norm,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 4] = [
        AttentionKind::SelfAttention,
        AttentionKind::Linear,
        AttentionKind::Synthesizer,
        AttentionKind::Norm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::SelfAttention => "self",
            AttentionKind::Linear => "linear",
            AttentionKind::Synthesizer => "synthesizer",
            AttentionKind::Norm => "norm",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(AttentionKind::SelfAttention),
            "linear" => Ok(AttentionKind::Linear),
            "synthesizer" => Ok(AttentionKind::Synthesizer),
            "norm" => Ok(AttentionKind::Norm),
            other => Err(Error::Config(format!(
                "unknown attention `{other}` (expected self, linear, synthesizer or norm)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    pub n_heads: usize,
    pub d_model: usize,
    /// Projection length of the linear kernel.
    pub linear_k: usize,
    /// Longest key sequence: rows of the linear projections and the
    /// synthesized alignment width.
    pub max_len: usize,
    /// Initial gain of the norm kernel.
    pub norm_gain_init: f64,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.linear_k == 0 {
            return Err(Error::Config("linear attention projection k must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("attention max_len must be positive".into()));
        }
        if !self.norm_gain_init.is_finite() {
            return Err(Error::Config("norm gain initialisation must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum KernelParams {
    Plain,
    Linear { e: ParamId, f: ParamId },
    Synthesizer { w1: Vec<ParamId>, w2: Vec<ParamId>, b: Vec<ParamId> },
    Norm { gains: ParamId },
}

/// Tape-level result of a multi-head attention call.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `len_q × d_model` after the output projection.
    pub context: Var,
    /// One `len_q × len_k` (or `len_q × k` for linear) matrix per head.
    pub weights: Vec<Var>,
}

impl AttentionOutput {
    /// Stacks the per-head weights into an `n_heads × len_q × len_k` tensor.
    pub fn weights_tensor<T: Real>(&self, tape: &Tape<'_, T>) -> Tensor<T> {
        let s = tape.shape(self.weights[0]).to_vec();
        let data: Vec<T> = self.weights.iter().flat_map(|&w| tape.value(w).iter().copied()).collect();
        Tensor::new(&[self.weights.len(), s[0], s[1]], data).expect("weights are non-empty")
    }
}

/// Per-head projections, a kernel, head concatenation and an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub config: AttentionConfig,
    query: Linear,
    key: Option<Linear>,
    value: Linear,
    output: Linear,
    kernel: KernelParams,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, config: AttentionConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let hd = config.head_dim();
        let query = Linear::new(b, &format!("{name}.query"), d, d);
        let key = (config.kind != AttentionKind::Synthesizer).then(|| Linear::new(b, &format!("{name}.key"), d, d));
        let value = Linear::new(b, &format!("{name}.value"), d, d);
        let output = Linear::new(b, &format!("{name}.output"), d, d);
        let (l, k) = (config.max_len, config.linear_k);
        let kernel = match config.kind {
            AttentionKind::SelfAttention => KernelParams::Plain,
            AttentionKind::Linear => KernelParams::Linear {
                e: b.glorot(&format!("{name}.proj_e"), &[l, k], l, k),
                f: b.glorot(&format!("{name}.proj_f"), &[l, k], l, k),
            },
            AttentionKind::Synthesizer => {
                let mut w1 = Vec::new();
                let mut w2 = Vec::new();
                let mut bias = Vec::new();
                for h in 0..config.n_heads {
                    w1.push(b.glorot(&format!("{name}.synth.{h}.w1"), &[hd, l], hd, l));
                    w2.push(b.glorot(&format!("{name}.synth.{h}.w2"), &[l, l], l, l));
                    bias.push(b.constant(&format!("{name}.synth.{h}.bias"), &[l], 0.0));
                }
                KernelParams::Synthesizer { w1, w2, b: bias }
            }
            AttentionKind::Norm => KernelParams::Norm {
                gains: b.constant(&format!("{name}.gain"), &[1, config.n_heads], config.norm_gain_init),
            },
        };
        Ok(Self {
            config,
            query,
            key,
            value,
            output,
            kernel,
        })
    }

    pub fn kind(&self) -> AttentionKind {
        self.config.kind
    }

    /// Attends from `query_in (len_q×d)` over `memory (len_k×d)`.
    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<'_, '_, T>,
        query_in: Var,
        memory: Var,
        causal: bool,
    ) -> Result<AttentionOutput> {
        let hd = self.config.head_dim();
        let len_k = ctx.tape.shape(memory)[0];
        let q = self.query.forward(ctx, query_in)?;
        let k = match &self.key {
            Some(key) => Some(key.forward(ctx, memory)?),
            None => None,
        };
        let v = self.value.forward(ctx, memory)?;

        // Length-axis projections are shared by all heads.
        let proj = match &self.kernel {
            KernelParams::Linear { e, f } => {
                if len_k > self.config.max_len {
                    return Err(Error::TooLong {
                        what: "linear attention",
                        len: len_k,
                        max: self.config.max_len,
                    });
                }
                let (e, f) = (ctx.p(*e), ctx.p(*f));
                Some((ctx.tape.slice_rows(e, 0, len_k)?, ctx.tape.slice_rows(f, 0, len_k)?))
            }
            _ => None,
        };

        let mut contexts = Vec::with_capacity(self.config.n_heads);
        let mut weights = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = ctx.tape.slice_cols(q, h * hd, hd)?;
            let vh = ctx.tape.slice_cols(v, h * hd, hd)?;
            let kh = match k {
                Some(k) => Some(ctx.tape.slice_cols(k, h * hd, hd)?),
                None => None,
            };
            let out = match &self.kernel {
                KernelParams::Plain => kernels::scaled_dot(ctx.tape, qh, kh.unwrap(), vh, causal)?,
                KernelParams::Linear { .. } => {
                    let (e, f) = proj.unwrap();
                    kernels::linear(ctx.tape, qh, kh.unwrap(), vh, e, f)?
                }
                KernelParams::Synthesizer { w1, w2, b } => {
                    let (w1, w2, b) = (ctx.p(w1[h]), ctx.p(w2[h]), ctx.p(b[h]));
                    kernels::synthesizer(ctx.tape, qh, w1, w2, b, vh, causal)?
                }
                KernelParams::Norm { gains } => {
                    let g = ctx.tape.slice_cols(ctx.p(*gains), h, 1)?;
                    kernels::norm(ctx.tape, qh, kh.unwrap(), vh, g, causal)?
                }
            };
            contexts.push(out.context);
            weights.push(out.weights);
        }
        let joined = if contexts.len() == 1 {
            contexts[0]
        } else {
            ctx.tape.concat_cols(&contexts)?
        };
        let context = self.output.forward(ctx, joined)?;
        Ok(AttentionOutput { context, weights })
    }
}

/// Linear-interpolation percentile (`0 <= pct <= 100`) of a non-empty sample.
pub fn percentile(values: &[usize], pct: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&pct) {
        return None;
    }
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(f64::total_cmp);
    let rank = pct / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(v[lo] + (rank - lo as f64) * (v[hi] - v[lo]))
}

/// Initial norm-attention gain `log2(L² - L)`, `L` being the 97.5th
/// percentile of all training sequence lengths (source and target).
pub fn init_norm_gain(lengths: &[usize]) -> Result<f64> {
    let l = percentile(lengths, 97.5)
        .ok_or_else(|| Error::InvalidInput("norm gain needs at least one training length".into()))?;
    norm_gain_for_length(l)
}

/// `log2(L² - L)` for `L >= 2`.
pub fn norm_gain_for_length(l: f64) -> Result<f64> {
    if !(l >= 2.0) {
        return Err(Error::InvalidInput(format!(
            "norm gain needs a length percentile of at least 2, got {l}"
        )));
    }
    Ok((l * l - l).log2())
}
