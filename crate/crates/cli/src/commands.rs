use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{bail, ensure, Context, Result};
use deeppseudo::corpus::{
    load_splits, preprocess_code, truncate_ids, Example, ParallelCorpus, Splits, TokenPair, Vocabulary, SPLIT_NAMES,
};
use deeppseudo::decode::{self, translate_ids};
use deeppseudo::metrics::{evaluate_corpus, MetricReport};
use deeppseudo::model::Seq2Seq;
use deeppseudo::training::{self, prepare_config, Checkpoint, EpochLog, TrainOutput, Trainer};
use log::{info, warn};
use rayon::prelude::*;

use crate::config::RunConfig;

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn out_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = cfg
        .out
        .clone()
        .with_context(|| format!("{command} needs an output directory (--out DIR)"))?;
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn tokenized(cfg: &RunConfig) -> Result<Splits<TokenPair>> {
    let raw = load_splits(cfg.corpus_dir()?, cfg.split, cfg.train.seed)?;
    Ok(raw.map(|r| TokenPair::from_raw(&r)))
}

fn build_corpus(cfg: &RunConfig) -> Result<ParallelCorpus> {
    Ok(ParallelCorpus::build(tokenized(cfg)?, cfg.min_frequency)?)
}

fn load_checkpoint(cfg: &RunConfig) -> Result<(Checkpoint, Seq2Seq<f32>)> {
    let path = cfg.checkpoint_path()?;
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.model()?;
    Ok((ckpt, model))
}

/// Tokenized splits, vocabularies and a statistics report.
pub fn preprocess(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg, "preprocess")?;
    let corpus = build_corpus(cfg)?;
    for name in SPLIT_NAMES {
        let examples = corpus.split(name).expect("known split");
        let join = |f: fn(&Example) -> &[String]| examples.iter().map(|e| f(e).join(" ") + "\n").collect::<String>();
        write(&out.join(format!("{name}.code.tok")), &join(|e| &e.tokens.code))?;
        write(&out.join(format!("{name}.anno.tok")), &join(|e| &e.tokens.pseudo))?;
    }
    corpus.src_vocab.save(&out.join("src_vocab.txt"))?;
    corpus.tgt_vocab.save(&out.join("tgt_vocab.txt"))?;
    let report = corpus.report();
    write(&out.join("stats.tsv"), &format!("{report}\n"))?;
    println!("{report}");
    Ok(())
}

/// A fresh trainer, or one continued from `dir/last.dpsc` when `resume` is set.
fn make_trainer(cfg: &RunConfig, corpus: &ParallelCorpus, dir: &Path, resume: bool) -> Result<Trainer> {
    let model_config = prepare_config(cfg.model.clone(), corpus)?;
    let last = dir.join(TrainOutput::LAST);
    if resume && last.exists() {
        let ckpt = Checkpoint::load(&last)?;
        ensure!(
            ckpt.src_vocab == corpus.src_vocab && ckpt.tgt_vocab == corpus.tgt_vocab,
            "{} was trained on different vocabularies",
            last.display()
        );
        ensure!(
            ckpt.config == model_config,
            "{} was trained with a different model configuration",
            last.display()
        );
        let trainer = Trainer::resume(&ckpt, cfg.train.clone())?;
        info!("resuming from {} after epoch {}", last.display(), trainer.epoch);
        return Ok(trainer);
    }
    Ok(Trainer::new(Seq2Seq::new(model_config, cfg.train.seed)?, cfg.train.clone())?)
}

fn log_epoch(e: &EpochLog) {
    info!(
        "epoch {:>3}  train {:.4}  valid {:.4}  ({:.1}s)",
        e.epoch, e.train_loss, e.valid_loss, e.seconds
    );
}

/// Trains into `dir` and returns the best checkpoint.
fn train_into(cfg: &RunConfig, corpus: &ParallelCorpus, dir: &Path, resume: bool) -> Result<Checkpoint> {
    let mut trainer = make_trainer(cfg, corpus, dir, resume)?;
    let mut saved = cfg.clone();
    saved.out = Some(dir.to_path_buf());
    write(&dir.join("config.txt"), &saved.to_text())?;
    let params = trainer.model.count_parameters();
    info!(
        "{} training pairs, {} validation pairs, {} parameters",
        corpus.train.len(),
        corpus.valid.len(),
        params.total
    );
    let output = TrainOutput { dir: dir.to_path_buf() };
    let result = training::train(corpus, &mut trainer, Some(&output), log_epoch)?;
    if result.diverged {
        warn!("training diverged; {} holds the last good weights", output.best().display());
    }
    info!(
        "best epoch {} with validation loss {:.4}",
        result.best_epoch, result.best_valid_loss
    );
    Ok(result.best)
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<()> {
    let dir = out_dir(cfg, "train")?;
    let corpus = build_corpus(cfg)?;
    let best = train_into(cfg, &corpus, &dir, resume)?;
    println!(
        "best_epoch\t{}\nvalid_loss\t{}\nparams\t{}\ncheckpoint\t{}",
        best.meta.get("epoch").map_or("0", String::as_str),
        best.meta.get("valid_loss").map_or("nan", String::as_str),
        best.model()?.count_parameters().total,
        dir.join(TrainOutput::BEST).display()
    );
    Ok(())
}

fn generate_line(model: &Seq2Seq<f32>, ckpt: &Checkpoint, line: &str, k: usize) -> Result<String> {
    if preprocess_code(line).is_empty() {
        return Ok(String::new());
    }
    Ok(decode::generate(model, &ckpt.src_vocab, &ckpt.tgt_vocab, line, k)?)
}

/// One pseudo-code line per input line, in input order.
pub fn generate(cfg: &RunConfig, input: Option<&Path>, line: Option<&str>) -> Result<()> {
    let (ckpt, model) = load_checkpoint(cfg)?;
    let lines: Vec<String> = match (input, line) {
        (_, Some(l)) => vec![l.to_string()],
        (Some(p), None) => fs::read_to_string(p)
            .with_context(|| format!("cannot read {}", p.display()))?
            .lines()
            .map(str::to_string)
            .collect(),
        (None, None) => bail!("pass --input FILE or --line CODE"),
    };
    let outputs = lines
        .par_iter()
        .map(|l| generate_line(&model, &ckpt, l, cfg.beam_size))
        .collect::<Result<Vec<_>>>()?;
    match &cfg.out {
        Some(_) => {
            let dir = out_dir(cfg, "generate")?;
            let path = dir.join("predictions.txt");
            write(&path, &outputs.iter().map(|o| format!("{o}\n")).collect::<String>())?;
            info!("wrote {} lines to {}", outputs.len(), path.display());
        }
        None => outputs.iter().for_each(|o| println!("{o}")),
    }
    Ok(())
}

/// Beam-decodes encoded examples in parallel, keeping their order.
fn decode_examples(model: &Seq2Seq<f32>, tgt_vocab: &Vocabulary, examples: &[Example], k: usize) -> Result<Vec<Vec<String>>> {
    let max = model.config().max_src_len;
    examples
        .par_iter()
        .map(|e| Ok(tgt_vocab.decode(&translate_ids(model, &truncate_ids(&e.src, max), k)?)))
        .collect()
}

fn references(examples: &[Example]) -> Vec<Vec<String>> {
    examples.iter().map(|e| e.tokens.pseudo.clone()).collect()
}

fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

/// Scores a checkpoint on one corpus split, or a hypothesis file against a
/// reference file.
pub fn evaluate(cfg: &RunConfig, split: &str, files: Option<(&Path, &Path)>) -> Result<()> {
    let (hyps, refs, decoded) = match files {
        Some((h, r)) => (read_token_lines(h)?, read_token_lines(r)?, false),
        None => {
            let (ckpt, model) = load_checkpoint(cfg)?;
            if let Some(seed) = ckpt.meta.get("seed") {
                if *seed != cfg.train.seed.to_string() {
                    warn!("checkpoint was trained with seed {seed}; splitting with seed {}", cfg.train.seed);
                }
            }
            let corpus = ParallelCorpus::with_vocabularies(tokenized(cfg)?, ckpt.src_vocab.clone(), ckpt.tgt_vocab.clone());
            let examples = corpus
                .split(split)
                .with_context(|| format!("unknown split `{split}` (expected train, valid or test)"))?;
            ensure!(!examples.is_empty(), "the {split} split is empty");
            info!("decoding {} {split} pairs with beam size {}", examples.len(), cfg.beam_size);
            (decode_examples(&model, &ckpt.tgt_vocab, examples, cfg.beam_size)?, references(examples), true)
        }
    };
    let report = evaluate_corpus(&hyps, &refs)?;
    if cfg.out.is_some() {
        let dir = out_dir(cfg, "evaluate")?;
        write(&dir.join("report.tsv"), &format!("{report}\n"))?;
        if decoded {
            write(&dir.join("hypotheses.txt"), &hyps.iter().map(|h| h.join(" ") + "\n").collect::<String>())?;
        }
    }
    println!("{report}");
    Ok(())
}

/// Model-size axes of the sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    #[value(name = "d_model")]
    DModel,
    #[value(name = "n_layers")]
    NLayers,
    #[value(name = "kernel_size")]
    KernelSize,
}

impl Axis {
    pub fn key(self) -> &'static str {
        match self {
            Axis::DModel => "d_model",
            Axis::NLayers => "n_layers",
            Axis::KernelSize => "kernel_size",
        }
    }

    pub fn values(self) -> &'static [&'static str] {
        match self {
            Axis::DModel => &["256", "384", "512"],
            Axis::NLayers => &["2", "3", "4"],
            Axis::KernelSize => &["1", "3", "5"],
        }
    }
}

const SWEEP_HEADER: &str = "setting\tparams\tbest_epoch\tvalid_loss";
const REPORT: &str = "report.tsv";
const DONE: &str = "done";

/// Trains (or resumes) one setting and writes its `report.tsv`. A setting
/// whose report exists is skipped.
fn sweep_setting(cfg: &RunConfig, axis: Axis, value: &str, root: &Path) -> Result<()> {
    let name = format!("{}={value}", axis.key());
    let dir = root.join(format!("{}_{value}", axis.key()));
    if dir.join(REPORT).exists() {
        info!("{name}: already done");
        return Ok(());
    }
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut c = cfg.clone();
    c.set(axis.key(), value)?;
    let corpus = build_corpus(&c)?;
    info!("{name}: training in {}", dir.display());
    let best = if dir.join(DONE).exists() {
        Checkpoint::load(&dir.join(TrainOutput::BEST))?
    } else {
        let best = train_into(&c, &corpus, &dir, true)?;
        write(&dir.join(DONE), "")?;
        best
    };
    let model = best.model()?;
    ensure!(!corpus.test.is_empty(), "the test split is empty");
    let hyps = decode_examples(&model, &best.tgt_vocab, &corpus.test, c.beam_size)?;
    let metrics = evaluate_corpus(&hyps, &references(&corpus.test))?;
    let row = format!(
        "{name}\t{}\t{}\t{}\t{}",
        model.count_parameters().total,
        best.meta.get("epoch").map_or("0", String::as_str),
        best.meta.get("valid_loss").map_or("nan", String::as_str),
        metrics.tsv_row()
    );
    write(&dir.join(REPORT), &format!("{SWEEP_HEADER}\t{}\n{row}\n", MetricReport::HEADER))
}

/// Command-line arguments for a child process that runs one setting.
fn child_args(value: &str) -> Vec<OsString> {
    let mut args = Vec::new();
    let mut skip = false;
    for a in std::env::args_os().skip(1) {
        if skip {
            skip = false;
            continue;
        }
        let s = a.to_string_lossy();
        if s == "--jobs" || s == "-j" {
            skip = true;
            continue;
        }
        if s.starts_with("--jobs=") {
            continue;
        }
        args.push(a);
    }
    args.push("--only".into());
    args.push(value.into());
    args
}

pub fn sweep(cfg: &RunConfig, axis: Axis, jobs: usize, only: Option<&str>) -> Result<()> {
    let root = out_dir(cfg, "sweep")?;
    if let Some(v) = only {
        ensure!(axis.values().contains(&v), "`{v}` is not a {} setting", axis.key());
        return sweep_setting(cfg, axis, v, &root);
    }
    ensure!(jobs >= 1, "--jobs must be at least 1");
    if jobs == 1 {
        for v in axis.values() {
            sweep_setting(cfg, axis, v, &root)?;
        }
    } else {
        let exe = std::env::current_exe().context("cannot locate the running executable")?;
        for chunk in axis.values().chunks(jobs) {
            let children = chunk
                .iter()
                .map(|v| {
                    let child = Command::new(&exe).args(child_args(v)).spawn();
                    child.map(|c| (v, c)).context("cannot start a sweep worker")
                })
                .collect::<Result<Vec<_>>>()?;
            for (v, mut child) in children {
                let status = child.wait()?;
                ensure!(status.success(), "sweep setting {}={v} failed ({status})", axis.key());
            }
        }
    }
    let mut table = format!("{SWEEP_HEADER}\t{}\n", MetricReport::HEADER);
    for v in axis.values() {
        let path = root.join(format!("{}_{v}", axis.key())).join(REPORT);
        let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
        let row = text.lines().nth(1).with_context(|| format!("{} has no result row", path.display()))?;
        table.push_str(row);
        table.push('\n');
    }
    write(&root.join(format!("sweep_{}.tsv", axis.key())), &table)?;
    print!("{table}");
    Ok(())
}
