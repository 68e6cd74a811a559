//! Beam-search and greedy generation.

use crate::corpus::{preprocess_code, Vocabulary, EOS, SOS};
use crate::error::{Error, Result};
use crate::model::Seq2Seq;
use crate::tensor::{Real, Tensor};

/// Next-token log-probabilities for a prefix that starts with `<sos>`.
pub trait StepScorer {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<F> StepScorer for F
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Sum of token log-probabilities.
    pub score: f64,
    /// Token ids, starting with `<sos>`.
    pub ids: Vec<usize>,
    pub finished: bool,
}

impl BeamHypothesis {
    fn start() -> Self {
        Self {
            score: 0.0,
            ids: vec![SOS],
            finished: false,
        }
    }
}

fn descending(a: &BeamHypothesis, b: &BeamHypothesis) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score)
}

/// Runs beam search for up to `n_max - 1` steps and returns every member of
/// the final beam, best first.
///
/// Finished hypotheses are carried forward unchanged, each live one is
/// expanded over the whole vocabulary and the `k` best survive. Ties keep
/// generation order.
pub fn beam_search_all<S: StepScorer>(scorer: &mut S, k: usize, n_max: usize) -> Result<Vec<BeamHypothesis>> {
    if k == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    if n_max < 2 {
        return Err(Error::Config("maximum hypothesis length must be at least 2".into()));
    }
    let mut beam = vec![BeamHypothesis::start()];
    for _ in 1..n_max {
        if beam.iter().all(|h| h.finished) {
            break;
        }
        let mut next = Vec::new();
        for h in beam {
            if h.finished {
                next.push(h);
                continue;
            }
            let lp = scorer.log_probs(&h.ids)?;
            for (y, &p) in lp.iter().enumerate() {
                let mut ids = h.ids.clone();
                ids.push(y);
                next.push(BeamHypothesis {
                    score: h.score + p,
                    ids,
                    finished: y == EOS,
                });
            }
        }
        next.sort_by(descending);
        next.truncate(k);
        beam = next;
    }
    Ok(beam)
}

/// The best hypothesis of [`beam_search_all`]. An unfinished winner gets
/// `<eos>` appended (its score is unchanged).
pub fn beam_search<S: StepScorer>(scorer: &mut S, k: usize, n_max: usize) -> Result<BeamHypothesis> {
    let mut best = beam_search_all(scorer, k, n_max)?.swap_remove(0);
    if !best.finished {
        best.ids.push(EOS);
        best.finished = true;
    }
    Ok(best)
}

/// Picks the first most likely token at every step until `<eos>` or `n_max`
/// tokens (counting `<sos>`); an unfinished result gets `<eos>` appended.
pub fn greedy_decode<S: StepScorer>(scorer: &mut S, n_max: usize) -> Result<BeamHypothesis> {
    if n_max < 2 {
        return Err(Error::Config("maximum hypothesis length must be at least 2".into()));
    }
    let mut h = BeamHypothesis::start();
    while h.ids.len() < n_max {
        let lp = scorer.log_probs(&h.ids)?;
        let (y, p) = lp
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
        h.score += p;
        h.ids.push(y);
        if y == EOS {
            h.finished = true;
            return Ok(h);
        }
    }
    h.ids.push(EOS);
    h.finished = true;
    Ok(h)
}

/// Scores prefixes with a model over a fixed encoded memory.
pub struct ModelScorer<'m, T: Real> {
    model: &'m Seq2Seq<T>,
    memory: Tensor<T>,
}

impl<'m, T: Real> ModelScorer<'m, T> {
    pub fn new(model: &'m Seq2Seq<T>, src: &[usize]) -> Result<Self> {
        Ok(Self {
            model,
            memory: model.encode(src)?,
        })
    }
}

impl<T: Real> StepScorer for ModelScorer<'_, T> {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.model.decode_step(&self.memory, prefix)
    }
}

/// Encodes a code line into source ids, truncated to the model's limit.
pub fn source_ids<T: Real>(model: &Seq2Seq<T>, src_vocab: &Vocabulary, code_line: &str) -> Result<Vec<usize>> {
    let tokens = preprocess_code(code_line);
    if tokens.is_empty() {
        return Err(Error::InvalidInput("empty code line".into()));
    }
    Ok(crate::corpus::truncate_ids(&src_vocab.encode(&tokens, true), model.config().max_src_len))
}

/// Decodes source ids with beam size `k` (`k = 1` is greedy) and returns the
/// target ids without `<sos>`/`<eos>`.
pub fn translate_ids<T: Real>(model: &Seq2Seq<T>, src: &[usize], k: usize) -> Result<Vec<usize>> {
    let mut scorer = ModelScorer::new(model, src)?;
    let n_max = model.config().max_tgt_len;
    let best = beam_search(&mut scorer, k, n_max)?;
    Ok(best.ids.into_iter().filter(|&i| i != SOS && i != EOS).collect())
}

/// Preprocesses, encodes, beam-decodes and space-joins one code line.
pub fn generate<T: Real>(
    model: &Seq2Seq<T>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    code_line: &str,
    k: usize,
) -> Result<String> {
    let src = source_ids(model, src_vocab, code_line)?;
    let ids = translate_ids(model, &src, k)?;
    Ok(tgt_vocab.decode(&ids).join(" "))
}
