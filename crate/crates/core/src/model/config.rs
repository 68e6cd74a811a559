use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::attention::{norm_gain_for_length, AttentionKind};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PositionalKind {
    Sinusoidal,
    Learned,
}

impl PositionalKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PositionalKind::Sinusoidal => "sinusoidal",
            PositionalKind::Learned => "learned",
        }
    }
}

impl fmt::Display for PositionalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PositionalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoidal" | "spe" => Ok(PositionalKind::Sinusoidal),
            "learned" | "lpe" => Ok(PositionalKind::Learned),
            other => Err(Error::Config(format!(
                "unknown positional encoding `{other}` (expected sinusoidal or learned)"
            ))),
        }
    }
}

/// Architecture hyperparameters. Vocabulary sizes come from the corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ff_dim: usize,
    pub kernel_size: usize,
    pub cfer_blocks: usize,
    pub use_cfer: bool,
    pub attention: AttentionKind,
    pub cross_attention: AttentionKind,
    pub positional: PositionalKind,
    /// Longest source sequence, `<sos>`/`<eos>` included.
    pub max_src_len: usize,
    /// Longest target sequence, `<sos>`/`<eos>` included.
    pub max_tgt_len: usize,
    pub linear_k: usize,
    /// Norm-attention gain. `None` falls back to `log2(L² - L)` with
    /// `L = max_src_len`; training fills it in from the corpus.
    pub norm_gain_init: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            src_vocab: 0,
            tgt_vocab: 0,
            d_model: 256,
            n_heads: 8,
            n_layers: 2,
            ff_dim: 1024,
            kernel_size: 3,
            cfer_blocks: 2,
            use_cfer: true,
            attention: AttentionKind::Norm,
            cross_attention: AttentionKind::Norm,
            positional: PositionalKind::Sinusoidal,
            max_src_len: 50,
            max_tgt_len: 60,
            linear_k: 32,
            norm_gain_init: None,
        }
    }
}

/// Keys accepted by [`ModelConfig::set`].
pub const MODEL_KEYS: [&str; 16] = [
    "src_vocab",
    "tgt_vocab",
    "d_model",
    "n_heads",
    "n_layers",
    "ff_dim",
    "kernel_size",
    "cfer_blocks",
    "use_cfer",
    "attention",
    "cross_attention",
    "positional",
    "max_src_len",
    "max_tgt_len",
    "linear_k",
    "norm_gain_init",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl ModelConfig {
    pub fn new(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            src_vocab,
            tgt_vocab,
            ..Self::default()
        }
    }

    /// Sets `n_layers` and keeps the CFER depth in step with it.
    pub fn with_layers(mut self, n: usize) -> Self {
        self.n_layers = n;
        self.cfer_blocks = n;
        self
    }

    /// Sets the self-attention variant and uses it for cross-attention too.
    pub fn with_attention(mut self, kind: AttentionKind) -> Self {
        self.attention = kind;
        self.cross_attention = kind;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn norm_gain(&self) -> f64 {
        self.norm_gain_init
            .unwrap_or_else(|| norm_gain_for_length(self.max_src_len.max(2) as f64).expect("length >= 2"))
    }

    /// Attention kind used by decoder self-attention. The linear kernel
    /// mixes positions along the length axis and cannot be masked causally,
    /// so it is replaced by scaled dot-product there.
    pub fn decoder_self_attention(&self) -> AttentionKind {
        match self.attention {
            AttentionKind::Linear => AttentionKind::SelfAttention,
            k => k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("ff_dim", self.ff_dim),
            ("kernel_size", self.kernel_size),
            ("max_src_len", self.max_src_len),
            ("max_tgt_len", self.max_tgt_len),
            ("linear_k", self.linear_k),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if self.src_vocab <= crate::corpus::SPECIALS.len() || self.tgt_vocab <= crate::corpus::SPECIALS.len() {
            return Err(Error::Config("vocabularies must hold more than the special tokens".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel_size {} must be odd", self.kernel_size)));
        }
        if self.use_cfer && self.cfer_blocks == 0 {
            return Err(Error::Config("cfer_blocks must be positive when CFER is enabled".into()));
        }
        if self.max_src_len < 2 || self.max_tgt_len < 2 {
            return Err(Error::Config("maximum lengths must leave room for <sos> and <eos>".into()));
        }
        if let Some(g) = self.norm_gain_init {
            if !g.is_finite() {
                return Err(Error::Config("norm_gain_init must be finite".into()));
            }
        }
        Ok(())
    }

    /// Sets one field from its text form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "src_vocab" => self.src_vocab = parse(key, value)?,
            "tgt_vocab" => self.tgt_vocab = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "n_layers" => self.n_layers = parse(key, value)?,
            "ff_dim" => self.ff_dim = parse(key, value)?,
            "kernel_size" => self.kernel_size = parse(key, value)?,
            "cfer_blocks" => self.cfer_blocks = parse(key, value)?,
            "use_cfer" => self.use_cfer = parse(key, value)?,
            "attention" => self.attention = value.parse()?,
            "cross_attention" => self.cross_attention = value.parse()?,
            "positional" => self.positional = value.parse()?,
            "max_src_len" => self.max_src_len = parse(key, value)?,
            "max_tgt_len" => self.max_tgt_len = parse(key, value)?,
            "linear_k" => self.linear_k = parse(key, value)?,
            "norm_gain_init" => {
                self.norm_gain_init = match value {
                    "" | "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            other => return Err(Error::Config(format!("unknown model key `{other}`"))),
        }
        Ok(())
    }

    /// Every field as `key -> value` text; the inverse of [`Self::set`].
    pub fn to_pairs(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        m.insert("src_vocab", self.src_vocab.to_string());
        m.insert("tgt_vocab", self.tgt_vocab.to_string());
        m.insert("d_model", self.d_model.to_string());
        m.insert("n_heads", self.n_heads.to_string());
        m.insert("n_layers", self.n_layers.to_string());
        m.insert("ff_dim", self.ff_dim.to_string());
        m.insert("kernel_size", self.kernel_size.to_string());
        m.insert("cfer_blocks", self.cfer_blocks.to_string());
        m.insert("use_cfer", self.use_cfer.to_string());
        m.insert("attention", self.attention.to_string());
        m.insert("cross_attention", self.cross_attention.to_string());
        m.insert("positional", self.positional.to_string());
        m.insert("max_src_len", self.max_src_len.to_string());
        m.insert("max_tgt_len", self.max_tgt_len.to_string());
        m.insert("linear_k", self.linear_k.to_string());
        // `{:?}` prints the shortest text that parses back to the same f64.
        m.insert(
            "norm_gain_init",
            self.norm_gain_init.map_or_else(|| "auto".to_string(), |g| format!("{g:?}")),
        );
        m
    }
}
