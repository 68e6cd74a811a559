//! Flat `key=value` run configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use deeppseudo::corpus::DEFAULT_MIN_FREQUENCY;
use deeppseudo::model::{ModelConfig, MODEL_KEYS};
use deeppseudo::training::{TrainConfig, TRAIN_KEYS};

/// Vocabulary sizes are taken from the corpus, never from a config file.
const DERIVED_KEYS: [&str; 2] = ["src_vocab", "tgt_vocab"];

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub min_frequency: usize,
    /// Train/valid/test ratios for a corpus that is not already split.
    pub split: (f64, f64, f64),
    pub beam_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            corpus: None,
            checkpoint: None,
            out: None,
            min_frequency: DEFAULT_MIN_FREQUENCY,
            split: (0.8, 0.1, 0.1),
            beam_size: 3,
        }
    }
}

fn parse_split(value: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("invalid split `{value}`"))?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => bail!("split needs three comma-separated ratios, got `{value}`"),
    }
}

impl RunConfig {
    /// Sets one key. `attention` also sets `cross_attention`, and `n_layers`
    /// the feature-extractor depth, unless those are given separately afterwards.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "corpus" => self.corpus = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "min_frequency" => {
                self.min_frequency = value.parse().with_context(|| format!("invalid min_frequency `{value}`"))?
            }
            "split" => self.split = parse_split(value)?,
            "beam_size" => {
                self.beam_size = value.parse().with_context(|| format!("invalid beam_size `{value}`"))?;
                if self.beam_size == 0 {
                    bail!("beam_size must be at least 1");
                }
            }
            "attention" => {
                self.model.set("attention", value)?;
                self.model.cross_attention = self.model.attention;
            }
            "n_layers" => {
                let n: usize = value.parse().with_context(|| format!("invalid n_layers `{value}`"))?;
                self.model = self.model.clone().with_layers(n);
            }
            k if DERIVED_KEYS.contains(&k) => bail!("`{k}` is derived from the corpus and cannot be set"),
            k if MODEL_KEYS.contains(&k) => self.model.set(k, value)?,
            k if TRAIN_KEYS.contains(&k) => self.train.set(k, value)?,
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .with_context(|| format!("expected key=value, got `{pair}`"))?;
        self.set(k.trim(), v)
    }

    /// Applies every line of a config file. Blank lines and `#` comments
    /// are skipped; a key may appear once.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = || format!("{origin}:{}", no + 1);
            let (k, v) = line.split_once('=').with_context(|| format!("{}: expected key=value", at()))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                bail!("{}: duplicate key `{k}`", at());
            }
            self.set(k, v).with_context(at)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// The whole configuration in the file format, readable by [`Self::load`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        for (k, v) in [("corpus", path(&self.corpus)), ("checkpoint", path(&self.checkpoint)), ("out", path(&self.out))] {
            if let Some(v) = v {
                let _ = writeln!(s, "{k}={v}");
            }
        }
        let _ = writeln!(s, "min_frequency={}", self.min_frequency);
        let (a, b, c) = self.split;
        let _ = writeln!(s, "split={a},{b},{c}");
        let _ = writeln!(s, "beam_size={}", self.beam_size);
        for (k, v) in self.model.to_pairs() {
            if !DERIVED_KEYS.contains(&k) {
                let _ = writeln!(s, "{k}={v}");
            }
        }
        let t = &self.train;
        let opt = |o: Option<String>| o.unwrap_or_else(|| "none".into());
        let _ = writeln!(s, "learning_rate={:?}", t.learning_rate);
        let _ = writeln!(s, "dropout={:?}", t.dropout);
        let _ = writeln!(s, "batch_size={}", t.batch_size);
        let _ = writeln!(s, "epochs={}", t.epochs);
        let _ = writeln!(s, "seed={}", t.seed);
        let _ = writeln!(s, "clip={}", opt(t.clip.map(|c| format!("{c:?}"))));
        let _ = writeln!(s, "patience={}", opt(t.patience.map(|p| p.to_string())));
        s
    }

    pub fn corpus_dir(&self) -> Result<&Path> {
        self.corpus
            .as_deref()
            .context("no corpus directory (set `corpus=` in the config or pass --corpus)")
    }

    pub fn checkpoint_path(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .context("no checkpoint (set `checkpoint=` in the config or pass --checkpoint)")
    }
}
