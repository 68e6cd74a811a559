//! Parallel code/pseudo-code corpus: loading, tokenization, vocabularies,
//! splitting and batching.

mod batch;
mod split;
mod stats;
mod tokenize;
mod vocab;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub use batch::{batch_iterator, truncate as truncate_ids, Batch, BatchConfig, BatchIter, PaddedBatch};
pub use split::{split_corpus, Splits};
pub use stats::{CorpusReport, LengthStats};
pub use tokenize::{preprocess_code, preprocess_pseudo, NUM_TOKEN, STR_TOKEN};
pub use vocab::{Vocabulary, DEFAULT_MIN_FREQUENCY, EOS, NUM, PAD, SOS, SPECIALS, STR, UNK};

/// File names of a combined corpus directory.
pub const CODE_FILE: &str = "code.txt";
pub const ANNO_FILE: &str = "anno.txt";
/// Split names of a pre-split corpus directory (`train.code`, `train.anno`, ...).
pub const SPLIT_NAMES: [&str; 3] = ["train", "valid", "test"];

/// One aligned line pair before tokenization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawPair {
    pub index: usize,
    pub code: String,
    pub pseudo: String,
}

/// A tokenized pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenPair {
    pub index: usize,
    pub code: Vec<String>,
    pub pseudo: Vec<String>,
}

impl TokenPair {
    pub fn from_raw(raw: &RawPair) -> Self {
        Self {
            index: raw.index,
            code: preprocess_code(&raw.code),
            pseudo: preprocess_pseudo(&raw.pseudo),
        }
    }
}

/// Reads two line-aligned files. Pairs where either side is blank are
/// dropped; a line-count mismatch is an error.
pub fn load_pairs(code_path: &Path, anno_path: &Path) -> Result<Vec<RawPair>> {
    let code = fs::read_to_string(code_path).map_err(|e| Error::io(code_path, e))?;
    let anno = fs::read_to_string(anno_path).map_err(|e| Error::io(anno_path, e))?;
    pair_lines(&code, &anno)
}

pub fn pair_lines(code: &str, anno: &str) -> Result<Vec<RawPair>> {
    let code: Vec<&str> = code.lines().collect();
    let anno: Vec<&str> = anno.lines().collect();
    if code.len() != anno.len() {
        return Err(Error::InvalidInput(format!(
            "code has {} lines but annotations have {}",
            code.len(),
            anno.len()
        )));
    }
    let mut dropped = 0;
    let pairs: Vec<RawPair> = code
        .iter()
        .zip(&anno)
        .enumerate()
        .filter_map(|(index, (c, a))| {
            if c.trim().is_empty() || a.trim().is_empty() {
                dropped += 1;
                return None;
            }
            Some(RawPair {
                index,
                code: c.trim_end().to_string(),
                pseudo: a.trim().to_string(),
            })
        })
        .collect();
    if dropped > 0 {
        log::warn!("dropped {dropped} pairs with a blank side");
    }
    Ok(pairs)
}

/// Loads a corpus directory.
///
/// A directory holding `{train,valid,test}.{code,anno}` is used as published;
/// otherwise `code.txt`/`anno.txt` are split with a seeded shuffle.
pub fn load_splits(dir: &Path, ratios: (f64, f64, f64), seed: u64) -> Result<Splits<RawPair>> {
    if SPLIT_NAMES
        .iter()
        .all(|s| dir.join(format!("{s}.code")).exists() && dir.join(format!("{s}.anno")).exists())
    {
        let load = |s: &str| load_pairs(&dir.join(format!("{s}.code")), &dir.join(format!("{s}.anno")));
        return Ok(Splits {
            train: load("train")?,
            valid: load("valid")?,
            test: load("test")?,
        });
    }
    let code = dir.join(CODE_FILE);
    let anno = dir.join(ANNO_FILE);
    if !code.exists() || !anno.exists() {
        return Err(Error::InvalidInput(format!(
            "{} holds neither {CODE_FILE}/{ANNO_FILE} nor pre-split {{train,valid,test}}.{{code,anno}} files",
            dir.display()
        )));
    }
    split_corpus(load_pairs(&code, &anno)?, ratios, seed)
}

/// One encoded example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: TokenPair,
    /// Source ids wrapped in `<sos>`/`<eos>`.
    pub src: Vec<usize>,
    /// Target ids wrapped in `<sos>`/`<eos>`.
    pub tgt: Vec<usize>,
}

/// Encoded splits with vocabularies built from the training split.
#[derive(Clone, Debug)]
pub struct ParallelCorpus {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

impl ParallelCorpus {
    pub fn build(splits: Splits<TokenPair>, min_frequency: usize) -> Result<Self> {
        let src_vocab = Vocabulary::build(splits.train.iter().map(|p| p.code.as_slice()), min_frequency)?;
        let tgt_vocab = Vocabulary::build(splits.train.iter().map(|p| p.pseudo.as_slice()), min_frequency)?;
        Ok(Self::with_vocabularies(splits, src_vocab, tgt_vocab))
    }

    pub fn with_vocabularies(splits: Splits<TokenPair>, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> Self {
        let encode = |p: TokenPair| Example {
            src: src_vocab.encode(&p.code, true),
            tgt: tgt_vocab.encode(&p.pseudo, true),
            tokens: p,
        };
        let enc = splits.map(encode);
        Self {
            train: enc.train,
            valid: enc.valid,
            test: enc.test,
            src_vocab,
            tgt_vocab,
        }
    }

    pub fn from_raw(splits: Splits<RawPair>, min_frequency: usize) -> Result<Self> {
        Self::build(splits.map(|r| TokenPair::from_raw(&r)), min_frequency)
    }

    pub fn split(&self, name: &str) -> Option<&[Example]> {
        match name {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// `(src, tgt)` id pairs of a split, for [`batch_iterator`].
    pub fn id_pairs(examples: &[Example]) -> Vec<(Vec<usize>, Vec<usize>)> {
        examples.iter().map(|e| (e.src.clone(), e.tgt.clone())).collect()
    }

    /// Table-style statistics over all splits.
    pub fn report(&self) -> CorpusReport {
        let all = || self.train.iter().chain(&self.valid).chain(&self.test);
        let code: Vec<usize> = all().map(|e| e.tokens.code.len()).collect();
        let pseudo: Vec<usize> = all().map(|e| e.tokens.pseudo.len()).collect();
        let unique = |f: fn(&Example) -> &[String]| {
            all().flat_map(|e| f(e).iter().map(String::as_str)).collect::<HashSet<_>>().len()
        };
        CorpusReport {
            code: LengthStats::from_lengths(&code),
            pseudo: LengthStats::from_lengths(&pseudo),
            split_sizes: (self.train.len(), self.valid.len(), self.test.len()),
            unique_code_tokens: unique(|e| &e.tokens.code),
            unique_pseudo_tokens: unique(|e| &e.tokens.pseudo),
            code_vocab_size: self.src_vocab.len(),
            pseudo_vocab_size: self.tgt_vocab.len(),
        }
    }

    /// Every sequence length of the training split, source and target, as
    /// seen by the model (with `<sos>`/`<eos>`).
    pub fn train_lengths(&self) -> Vec<usize> {
        self.train
            .iter()
            .flat_map(|e| [e.src.len(), e.tgt.len()])
            .collect()
    }
}
