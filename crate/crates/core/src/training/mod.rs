//! Teacher-forced training with Adam, gradient clipping, early stopping and
//! checkpointing.

mod checkpoint;
mod optim;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use optim::{clip_grad_norm, grad_norm, Adam, AdamConfig, Grads};

use crate::attention::init_norm_gain;
use crate::corpus::{batch_iterator, truncate_ids, BatchConfig, ParallelCorpus, PAD};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Seq2Seq};
use crate::nn::Ctx;
use crate::rng::SeedTree;
use crate::tensor::{Real, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
    /// Epochs without validation improvement before stopping; `None` never stops early.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            dropout: 0.25,
            batch_size: 12,
            epochs: 30,
            seed: 1,
            clip: Some(1.0),
            patience: Some(5),
        }
    }
}

pub const TRAIN_KEYS: [&str; 7] = ["learning_rate", "dropout", "batch_size", "epochs", "seed", "clip", "patience"];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip {c} must be positive")));
            }
        }
        Ok(())
    }

    /// Sets one field from text; `none`/`off` disable `clip` and `patience`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<V: std::str::FromStr>(k: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `{k}`")))
        }
        let off = matches!(value, "none" | "off");
        match key {
            "learning_rate" => self.learning_rate = p(key, value)?,
            "dropout" => self.dropout = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "clip" => self.clip = if off { None } else { Some(p(key, value)?) },
            "patience" => self.patience = if off { None } else { Some(p(key, value)?) },
            other => return Err(Error::Config(format!("unknown training key `{other}`"))),
        }
        Ok(())
    }
}

/// Token-weighted loss of a set of pairs and, on a training tape, the
/// gradient of every parameter.
pub fn batch_loss<T: Real>(
    model: &Seq2Seq<T>,
    pairs: &[(&[usize], &[usize])],
    dropout: f64,
    rng: Option<crate::rng::StreamRng>,
) -> Result<(f64, Option<Grads<T>>)> {
    let training = rng.is_some();
    let mut tape = match rng {
        Some(r) => Tape::training(r),
        None => Tape::new(),
    };
    let bound = model.params().bind(&mut tape);
    let mut ctx = Ctx::new(&mut tape, &bound, dropout);
    let mut parts = Vec::with_capacity(pairs.len());
    let mut total = 0usize;
    for (src, tgt) in pairs {
        let (loss, n) = model.loss(&mut ctx, src, tgt)?;
        parts.push((loss, n));
        total += n;
    }
    if total == 0 {
        return Err(Error::DegenerateBatch("batch has no target tokens".into()));
    }
    let mut sum = None;
    for (loss, n) in parts {
        let w = ctx.tape.scale(loss, n as f64 / total as f64);
        sum = Some(match sum {
            None => w,
            Some(s) => ctx.tape.add(s, w)?,
        });
    }
    let root = sum.expect("at least one pair");
    let value = tape.value(root)[0].as_f64();
    if !training {
        return Ok((value, None));
    }
    if !value.is_finite() {
        return Ok((value, None));
    }
    tape.backward(root)?;
    let grads = bound.iter().map(|&v| tape.grad(v).map(<[T]>::to_vec)).collect();
    Ok((value, Some(grads)))
}

/// Per-epoch record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch\ttrain_loss\tvalid_loss\tseconds";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.3}",
            self.epoch, self.train_loss, self.valid_loss, self.seconds
        )
    }
}

type Pairs = [(Vec<usize>, Vec<usize>)];

/// Model plus optimizer state, advanced one batch or one epoch at a time.
pub struct Trainer {
    pub model: Seq2Seq<f32>,
    pub optimizer: Adam<f32>,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    steps: u64,
    seeds: SeedTree,
}

impl Trainer {
    pub fn new(model: Seq2Seq<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(model.params(), AdamConfig::default());
        let seeds = SeedTree::new(config.seed).child("train");
        Ok(Self {
            model,
            optimizer,
            config,
            epoch: 0,
            steps: 0,
            seeds,
        })
    }

    /// Continues from a checkpoint holding optimizer state.
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let model = ckpt.model()?;
        let mut t = Self::new(model, config)?;
        if let Some(adam) = ckpt.optimizer(&t.model)? {
            t.optimizer = adam;
        }
        let meta = |k: &str| ckpt.meta.get(k).and_then(|v| v.parse::<u64>().ok());
        t.epoch = meta("epoch").unwrap_or(0) as usize;
        t.steps = meta("steps").unwrap_or(0);
        Ok(t)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One optimizer step on `pairs`; returns the loss before the update.
    pub fn step(&mut self, pairs: &[(&[usize], &[usize])]) -> Result<f64> {
        let rng = self.seeds.child("dropout").stream(&self.steps.to_string());
        let (loss, grads) = batch_loss(&self.model, pairs, self.config.dropout, Some(rng))?;
        let mut grads = match grads {
            Some(g) if loss.is_finite() => g,
            _ => return Err(Error::Diverged { epoch: self.epoch + 1 }),
        };
        if let Some(c) = self.config.clip {
            clip_grad_norm(&mut grads, c);
        }
        self.optimizer
            .update(self.model.params_mut(), &grads, self.config.learning_rate)?;
        self.steps += 1;
        Ok(loss)
    }

    fn batch_config(&self) -> BatchConfig {
        BatchConfig {
            batch_size: self.config.batch_size,
            max_src_len: self.model.config().max_src_len,
            max_tgt_len: self.model.config().max_tgt_len,
            pad_id: PAD,
        }
    }

    /// One shuffled pass; returns the token-weighted mean training loss.
    pub fn train_epoch(&mut self, data: &Pairs) -> Result<f64> {
        let seed = self.seeds.child("order").seed_for(&self.epoch.to_string());
        let cfg = self.batch_config();
        let batches: Vec<_> = batch_iterator(data, cfg, Some(seed)).collect();
        let (mut sum, mut tokens) = (0.0, 0usize);
        for b in &batches {
            let pairs: Vec<(&[usize], &[usize])> = (0..b.src.rows()).map(|r| (b.src.row(r), b.tgt.row(r))).collect();
            let n: usize = pairs.iter().map(|(_, t)| t.len().saturating_sub(1)).sum();
            let loss = self.step(&pairs)?;
            sum += loss * n as f64;
            tokens += n;
        }
        self.epoch += 1;
        Ok(if tokens == 0 { 0.0 } else { sum / tokens as f64 })
    }

    /// Token-weighted mean loss in evaluation mode.
    pub fn evaluate(&self, data: &Pairs) -> Result<f64> {
        evaluate_loss(&self.model, data, self.config.batch_size)
    }

    pub fn checkpoint(&self, corpus: &ParallelCorpus, valid_loss: Option<f64>) -> Checkpoint {
        let mut c = Checkpoint::from_model(&self.model, &corpus.src_vocab, &corpus.tgt_vocab, Some(&self.optimizer));
        c.meta.insert("epoch".into(), self.epoch.to_string());
        c.meta.insert("steps".into(), self.steps.to_string());
        c.meta.insert("seed".into(), self.config.seed.to_string());
        if let Some(v) = valid_loss {
            c.meta.insert("valid_loss".into(), format!("{v:?}"));
        }
        c
    }
}

/// Token-weighted mean teacher-forced loss, no dropout.
pub fn evaluate_loss<T: Real>(model: &Seq2Seq<T>, data: &Pairs, batch_size: usize) -> Result<f64> {
    let cfg = BatchConfig {
        batch_size,
        max_src_len: model.config().max_src_len,
        max_tgt_len: model.config().max_tgt_len,
        pad_id: PAD,
    };
    let (mut sum, mut tokens) = (0.0, 0usize);
    for b in batch_iterator(data, cfg, None) {
        let pairs: Vec<(&[usize], &[usize])> = (0..b.src.rows()).map(|r| (b.src.row(r), b.tgt.row(r))).collect();
        let n: usize = pairs.iter().map(|(_, t)| t.len().saturating_sub(1)).sum();
        let (loss, _) = batch_loss(model, &pairs, 0.0, None)?;
        sum += loss * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::DegenerateBatch("no target tokens to evaluate".into()));
    }
    Ok(sum / tokens as f64)
}

/// Fills in corpus-derived model settings: vocabulary sizes and, when unset,
/// the norm-attention gain from the (truncated) training lengths.
pub fn prepare_config(mut config: ModelConfig, corpus: &ParallelCorpus) -> Result<ModelConfig> {
    config.src_vocab = corpus.src_vocab.len();
    config.tgt_vocab = corpus.tgt_vocab.len();
    if config.norm_gain_init.is_none() {
        let lengths: Vec<usize> = corpus
            .train
            .iter()
            .flat_map(|e| {
                [
                    e.src.len().min(config.max_src_len),
                    e.tgt.len().min(config.max_tgt_len),
                ]
            })
            .collect();
        config.norm_gain_init = Some(init_norm_gain(&lengths)?);
    }
    config.validate()?;
    Ok(config)
}

/// Where [`train`] writes its files.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub const BEST: &'static str = "best.dpsc";
    pub const LAST: &'static str = "last.dpsc";
    pub const LOG: &'static str = "train_log.tsv";

    pub fn best(&self) -> PathBuf {
        self.dir.join(Self::BEST)
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join(Self::LAST)
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join(Self::LOG)
    }
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub log: Vec<EpochLog>,
    /// Set when training stopped because the loss became non-finite.
    pub diverged: bool,
}

/// Trains until `epochs` or early stopping, keeping the checkpoint with the
/// lowest validation loss. With `out`, writes `best.dpsc`, `last.dpsc` (for
/// resuming) and a TSV log. A non-finite loss stops training and returns
/// the best checkpoint so far.
pub fn train(
    corpus: &ParallelCorpus,
    trainer: &mut Trainer,
    out: Option<&TrainOutput>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainResult> {
    if corpus.train.is_empty() || corpus.valid.is_empty() {
        return Err(Error::InvalidInput("training needs non-empty train and valid splits".into()));
    }
    let train_pairs = ParallelCorpus::id_pairs(&corpus.train);
    let valid_pairs = ParallelCorpus::id_pairs(&corpus.valid);
    let mut log_file = match out {
        Some(o) => {
            fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            let path = o.log();
            let fresh = trainer.epoch == 0 || !path.exists();
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "{}", EpochLog::HEADER).map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };

    let initial = trainer.evaluate(&valid_pairs)?;
    let mut best = (trainer.checkpoint(corpus, Some(initial)), trainer.epoch, initial);
    if let Some(o) = out.filter(|_| trainer.epoch > 0) {
        if let Ok(prev) = Checkpoint::load(&o.best()) {
            if let Some(v) = prev.meta.get("valid_loss").and_then(|v| v.parse::<f64>().ok()) {
                if v <= initial {
                    let e = prev.meta.get("epoch").and_then(|e| e.parse().ok()).unwrap_or(0);
                    best = (prev, e, v);
                }
            }
        }
    }
    let mut log = Vec::new();
    let mut stale = 0usize;
    let mut diverged = false;
    while trainer.epoch < trainer.config.epochs {
        let start = Instant::now();
        let train_loss = match trainer.train_epoch(&train_pairs) {
            Ok(l) => l,
            Err(Error::Diverged { epoch }) => {
                log::error!("loss became non-finite in epoch {epoch}; keeping the best checkpoint");
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let valid_loss = trainer.evaluate(&valid_pairs)?;
        let entry = EpochLog {
            epoch: trainer.epoch,
            train_loss,
            valid_loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{}", entry.tsv_row()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        on_epoch(&entry);
        log.push(entry);
        let ckpt = trainer.checkpoint(corpus, Some(valid_loss));
        if valid_loss < best.2 {
            best = (ckpt.clone(), trainer.epoch, valid_loss);
            stale = 0;
            if let Some(o) = out {
                ckpt.save(&o.best())?;
            }
        } else {
            stale += 1;
        }
        if let Some(o) = out {
            ckpt.save(&o.last())?;
        }
        if trainer.config.patience.is_some_and(|p| stale >= p) {
            log::info!("no validation improvement for {stale} epochs; stopping");
            break;
        }
    }
    if let Some(o) = out {
        if best.1 == 0 || !o.best().exists() {
            best.0.save(&o.best())?;
        }
    }
    Ok(TrainResult {
        best: best.0,
        best_epoch: best.1,
        best_valid_loss: best.2,
        log,
        diverged,
    })
}

/// Convenience: builds a model for `corpus` and trains it.
pub fn train_new(
    corpus: &ParallelCorpus,
    model_config: ModelConfig,
    config: TrainConfig,
    out: Option<&Path>,
) -> Result<TrainResult> {
    let cfg = prepare_config(model_config, corpus)?;
    let model = Seq2Seq::new(cfg, config.seed)?;
    let mut trainer = Trainer::new(model, config)?;
    let out = out.map(|d| TrainOutput { dir: d.to_path_buf() });
    train(corpus, &mut trainer, out.as_ref(), |_| {})
}

/// Truncates every pair to the model's limits, as batching does.
pub fn clip_pairs<T: Real>(model: &Seq2Seq<T>, pairs: &Pairs) -> Vec<(Vec<usize>, Vec<usize>)> {
    let c = model.config();
    pairs
        .iter()
        .map(|(s, t)| (truncate_ids(s, c.max_src_len), truncate_ids(t, c.max_tgt_len)))
        .collect()
}
