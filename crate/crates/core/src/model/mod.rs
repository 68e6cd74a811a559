//! The encoder-decoder: shared embedding, Transformer encoder, convolutional
//! code feature extractor (CFER), additive fusion and a Transformer decoder.

mod config;
mod layers;

use std::collections::BTreeMap;
use std::fmt;

pub use config::{ModelConfig, PositionalKind, MODEL_KEYS};
pub use layers::{fuse, sinusoidal_table, Cfer, ConvBlock, DecoderLayer, DecoderLayerOutput, Embedder, EncoderLayer};

use crate::attention::AttentionOutput;
use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, ParamBuilder, ParamStore};
use crate::rng::SeedTree;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug)]
struct Layers<T> {
    src_embed: Embedder<T>,
    tgt_embed: Embedder<T>,
    encoder: Vec<EncoderLayer>,
    cfer: Option<(Cfer, Linear)>,
    decoder: Vec<DecoderLayer>,
    generator: Linear,
}

/// Tape handles produced by [`Seq2Seq::forward_encode`].
pub struct EncoderOutput {
    /// Fused representation fed to the decoder.
    pub memory: Var,
    /// Transformer-encoder context before fusion.
    pub context: Var,
    /// CFER features (after its final linear), if enabled.
    pub features: Option<Var>,
    pub attention: Vec<AttentionOutput>,
}

pub struct DecoderOutput {
    /// `len×tgt_vocab` logits.
    pub logits: Var,
    pub self_attention: Vec<AttentionOutput>,
    pub cross_attention: Vec<AttentionOutput>,
}

/// Learnable-scalar counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub total: usize,
    pub by_component: BTreeMap<String, usize>,
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "component\tparameters")?;
        for (k, v) in &self.by_component {
            writeln!(f, "{k}\t{v}")?;
        }
        write!(f, "total\t{}", self.total)
    }
}

#[derive(Clone, Debug)]
pub struct Seq2Seq<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
    layers: Layers<T>,
}

impl<T: Real> Seq2Seq<T> {
    /// Builds and initialises a model; initial weights depend only on `seed`
    /// and parameter names.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layers = {
            let mut b = ParamBuilder::new(&mut params, SeedTree::new(seed).child("init"));
            build(&mut b, &config)?
        };
        Ok(Self { config, params, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// The same model at another float width.
    pub fn cast<U: Real>(&self) -> Seq2Seq<U> {
        let mut params = ParamStore::new();
        let layers = {
            let mut b = ParamBuilder::new(&mut params, SeedTree::new(0));
            build(&mut b, &self.config).expect("config was validated")
        };
        let mut out = Seq2Seq {
            config: self.config.clone(),
            params,
            layers,
        };
        for (name, t) in self.params.iter() {
            let c: Tensor<U> = t.cast();
            let shape = c.shape().to_vec();
            out.params.assign(name, &shape, c.into_data()).expect("same layout");
        }
        out
    }

    pub fn count_parameters(&self) -> ParamReport {
        ParamReport {
            total: self.params.count(),
            by_component: self.params.count_by_component(),
        }
    }

    /// Runs the encoder side on `src` (already wrapped in `<sos>`/`<eos>`).
    pub fn forward_encode(&self, ctx: &mut Ctx<'_, '_, T>, src: &[usize]) -> Result<EncoderOutput> {
        let x = self.layers.src_embed.forward(ctx, src)?;
        let mut h = x;
        let mut attention = Vec::with_capacity(self.layers.encoder.len());
        for layer in &self.layers.encoder {
            let (next, att) = layer.forward(ctx, h)?;
            h = next;
            attention.push(att);
        }
        let context = h;
        let (memory, features) = match &self.layers.cfer {
            Some((cfer, fusion)) => {
                let f = cfer.forward(ctx, x)?;
                (fuse(ctx, fusion, context, f)?, Some(f))
            }
            None => (context, None),
        };
        Ok(EncoderOutput {
            memory,
            context,
            features,
            attention,
        })
    }

    /// Runs the decoder on a target prefix over an encoded `memory`.
    pub fn forward_decode(&self, ctx: &mut Ctx<'_, '_, T>, memory: Var, prefix: &[usize]) -> Result<DecoderOutput> {
        let mut y = self.layers.tgt_embed.forward(ctx, prefix)?;
        let mut self_attention = Vec::new();
        let mut cross_attention = Vec::new();
        for layer in &self.layers.decoder {
            let out = layer.forward(ctx, y, memory)?;
            y = out.hidden;
            self_attention.push(out.self_attention);
            cross_attention.push(out.cross_attention);
        }
        let logits = self.layers.generator.forward(ctx, y)?;
        Ok(DecoderOutput {
            logits,
            self_attention,
            cross_attention,
        })
    }

    /// Teacher-forced mean cross-entropy of one pair. Both sequences carry
    /// `<sos>`/`<eos>`; returns the loss and the number of scored tokens.
    pub fn loss(&self, ctx: &mut Ctx<'_, '_, T>, src: &[usize], tgt: &[usize]) -> Result<(Var, usize)> {
        if tgt.len() < 2 {
            return Err(Error::DegenerateBatch("target needs at least <sos> and one token".into()));
        }
        let enc = self.forward_encode(ctx, src)?;
        let dec = self.forward_decode(ctx, enc.memory, &tgt[..tgt.len() - 1])?;
        let targets = &tgt[1..];
        let loss = ctx.tape.cross_entropy(dec.logits, targets, PAD)?;
        Ok((loss, targets.iter().filter(|&&t| t != PAD).count()))
    }

    /// Evaluation-mode encoding; returns the fused memory.
    pub fn encode(&self, src: &[usize]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &bound, 0.0);
        let out = self.forward_encode(&mut ctx, src)?;
        Ok(tape.tensor(out.memory))
    }

    /// Log-probabilities of the next token after `prefix` (which starts with
    /// `<sos>`), given an encoded memory.
    pub fn decode_step(&self, memory: &Tensor<T>, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::InvalidInput("decoder prefix must start with <sos>".into()));
        }
        if prefix.len() > self.config.max_tgt_len {
            return Err(Error::TooLong {
                what: "decoder prefix",
                len: prefix.len(),
                max: self.config.max_tgt_len,
            });
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &bound, 0.0);
        let m = ctx.tape.constant(memory.clone());
        let out = self.forward_decode(&mut ctx, m, prefix)?;
        let v = self.config.tgt_vocab;
        let last = ctx.tape.slice_rows(out.logits, prefix.len() - 1, 1)?;
        let lp = ctx.tape.log_softmax(last);
        debug_assert_eq!(tape.value(lp).len(), v);
        Ok(tape.value(lp).iter().map(|x| x.as_f64()).collect())
    }
}

fn build<T: Real>(b: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Layers<T>> {
    let d = cfg.d_model;
    let src_embed = Embedder::new(b, "src", cfg.src_vocab, d, cfg.max_src_len, cfg.positional);
    let tgt_embed = Embedder::new(b, "tgt", cfg.tgt_vocab, d, cfg.max_tgt_len, cfg.positional);
    let enc_attn = layers::attention_config(cfg.attention, cfg, cfg.max_src_len);
    let encoder = (0..cfg.n_layers)
        .map(|i| EncoderLayer::new(b, &format!("encoder.{i}"), enc_attn, cfg.ff_dim))
        .collect::<Result<Vec<_>>>()?;
    let cfer = cfg.use_cfer.then(|| {
        (
            Cfer::new(b, "cfer", d, cfg.kernel_size, cfg.cfer_blocks),
            Linear::new(b, "fusion", d, d),
        )
    });
    let dec_self = layers::attention_config(cfg.decoder_self_attention(), cfg, cfg.max_tgt_len);
    let dec_cross = layers::attention_config(cfg.cross_attention, cfg, cfg.max_src_len);
    let decoder = (0..cfg.n_layers)
        .map(|i| DecoderLayer::new(b, &format!("decoder.{i}"), dec_self, dec_cross, cfg.ff_dim))
        .collect::<Result<Vec<_>>>()?;
    let generator = Linear::new(b, "generator", d, cfg.tgt_vocab);
    Ok(Layers {
        src_embed,
        tgt_embed,
        encoder,
        cfer,
        decoder,
        generator,
    })
}
