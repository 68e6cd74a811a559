//! Parameter storage and the small dense building blocks shared by the
//! encoder, decoder and attention layers.

mod params;

pub use params::{ParamBuilder, ParamId, ParamStore};

use crate::error::Result;
use crate::tensor::{Real, Tape, Var};

/// Forward-pass context: the tape, the bound parameters and the dropout rate.
pub struct Ctx<'a, 'p, T: Real> {
    pub tape: &'a mut Tape<'p, T>,
    pub params: &'a [Var],
    pub dropout: f64,
}

impl<'a, 'p, T: Real> Ctx<'a, 'p, T> {
    pub fn new(tape: &'a mut Tape<'p, T>, params: &'a [Var], dropout: f64) -> Self {
        Self { tape, params, dropout }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.dropout;
        self.tape.dropout(x, p)
    }
}

/// `y = x·W + b` with `W` stored `in×out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: b.glorot(&format!("{name}.weight"), &[d_in, d_out], d_in, d_out),
            bias: b.constant(&format!("{name}.bias"), &[d_out], 0.0),
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Result<Var> {
        let h = ctx.tape.matmul(x, ctx.p(self.weight))?;
        ctx.tape.add_bias(h, ctx.p(self.bias))
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, d: usize) -> Self {
        Self {
            gain: b.constant(&format!("{name}.gain"), &[d], 1.0),
            bias: b.constant(&format!("{name}.bias"), &[d], 0.0),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Result<Var> {
        ctx.tape.layer_norm(x, ctx.p(self.gain), ctx.p(self.bias), LAYER_NORM_EPS)
    }
}

/// Position-wise `Linear(ReLU(Linear(x)))`.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, d_model: usize, d_ff: usize) -> Self {
        Self {
            inner: Linear::new(b, &format!("{name}.inner"), d_model, d_ff),
            outer: Linear::new(b, &format!("{name}.outer"), d_ff, d_model),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Result<Var> {
        let h = self.inner.forward(ctx, x)?;
        let h = ctx.tape.relu(h);
        let h = ctx.dropout(h)?;
        self.outer.forward(ctx, h)
    }
}
