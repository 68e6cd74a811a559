//! Corpus-level BLEU, METEOR, ROUGE-L and CIDEr over whitespace tokens, plus
//! the finite-population sample-size formula used for human evaluation.

use std::collections::HashMap;
use std::fmt;

use rust_stemmers::{Algorithm, Stemmer};

use crate::error::{Error, Result};

/// One candidate with its references.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new(candidate: &[&str], references: &[&[&str]]) -> Self {
        let own = |s: &[&str]| s.iter().map(|t| t.to_string()).collect::<Vec<_>>();
        Self {
            candidate: own(candidate),
            references: references.iter().map(|r| own(r)).collect(),
        }
    }

    /// Splits both sides on whitespace.
    pub fn from_text(candidate: &str, references: &[&str]) -> Self {
        let split = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        Self {
            candidate: split(candidate),
            references: references.iter().map(|r| split(r)).collect(),
        }
    }
}

fn check(pairs: &[EvalPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("cannot score an empty corpus".into()));
    }
    if let Some(i) = pairs.iter().position(|p| p.references.is_empty()) {
        return Err(Error::InvalidInput(format!("pair {i} has no reference")));
    }
    Ok(())
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Per-order clipped matches and candidate n-gram totals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuStats {
    pub fn precision(&self, n: usize) -> f64 {
        if self.totals[n - 1] == 0 {
            0.0
        } else {
            self.matches[n - 1] as f64 / self.totals[n - 1] as f64
        }
    }

    /// `e^(1 - r/c)` when the candidate side is not longer than the reference side.
    pub fn brevity_penalty(&self) -> f64 {
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        if c > r {
            1.0
        } else if c == 0.0 {
            0.0
        } else {
            (1.0 - r / c).exp()
        }
    }

    pub fn score(&self) -> f64 {
        let n = self.matches.len();
        let mut log_sum = 0.0;
        for k in 1..=n {
            let p = self.precision(k);
            if p == 0.0 {
                return 0.0;
            }
            log_sum += p.ln() / n as f64;
        }
        self.brevity_penalty() * log_sum.exp()
    }
}

/// Corpus statistics for BLEU up to order `max_n`. Each candidate n-gram
/// count is clipped by its largest count in any one reference; the reference
/// length is the one closest to the candidate (shorter wins ties).
pub fn bleu_stats(pairs: &[EvalPair], max_n: usize) -> Result<BleuStats> {
    check(pairs)?;
    let mut s = BleuStats {
        matches: vec![0; max_n],
        totals: vec![0; max_n],
        ..Default::default()
    };
    for p in pairs {
        let c = p.candidate.len();
        s.candidate_len += c;
        s.reference_len += p
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .expect("checked non-empty");
        for n in 1..=max_n {
            let cand = ngrams(&p.candidate, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &p.references {
                for (g, k) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in cand {
                s.matches[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
                s.totals[n - 1] += k;
            }
        }
    }
    Ok(s)
}

/// Corpus BLEU with uniform weights over orders `1..=max_n` and no smoothing.
pub fn bleu(pairs: &[EvalPair], max_n: usize) -> Result<f64> {
    Ok(bleu_stats(pairs, max_n)?.score())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeteorParams {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for MeteorParams {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            gamma: 0.5,
            beta: 3.0,
        }
    }
}

/// Sentence-level METEOR parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeteorParts {
    pub matches: usize,
    pub chunks: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_mean: f64,
    pub penalty: f64,
    pub score: f64,
}

/// Aligns unigrams in two stages (exact surface, then Porter stem), each
/// pairing a candidate token with the first free reference token.
/// Returns `(candidate position, reference position)` pairs.
fn align(cand: &[String], reference: &[String], stemmer: &Stemmer) -> Vec<(usize, usize)> {
    let mut cand_used = vec![false; cand.len()];
    let mut ref_used = vec![false; reference.len()];
    let mut out = Vec::new();
    let stems = |s: &[String]| s.iter().map(|t| stemmer.stem(t).into_owned()).collect::<Vec<_>>();
    let (cs, rs) = (stems(cand), stems(reference));
    for stage in 0..2 {
        for i in 0..cand.len() {
            if cand_used[i] {
                continue;
            }
            let hit = (0..reference.len()).find(|&j| {
                !ref_used[j] && if stage == 0 { cand[i] == reference[j] } else { cs[i] == rs[j] }
            });
            if let Some(j) = hit {
                cand_used[i] = true;
                ref_used[j] = true;
                out.push((i, j));
            }
        }
    }
    out.sort_unstable();
    out
}

pub fn meteor_sentence(cand: &[String], reference: &[String], params: MeteorParams) -> MeteorParts {
    let stemmer = Stemmer::create(Algorithm::English);
    meteor_with(cand, reference, params, &stemmer)
}

fn meteor_with(cand: &[String], reference: &[String], params: MeteorParams, stemmer: &Stemmer) -> MeteorParts {
    let a = align(cand, reference, stemmer);
    let m = a.len();
    if m == 0 {
        return MeteorParts {
            matches: 0,
            chunks: 0,
            precision: 0.0,
            recall: 0.0,
            f_mean: 0.0,
            penalty: 0.0,
            score: 0.0,
        };
    }
    let chunks = 1 + a
        .windows(2)
        .filter(|w| w[1].0 != w[0].0 + 1 || w[1].1 != w[0].1 + 1)
        .count();
    let precision = m as f64 / cand.len() as f64;
    let recall = m as f64 / reference.len() as f64;
    let f_mean = precision * recall / (params.alpha * precision + (1.0 - params.alpha) * recall);
    let penalty = params.gamma * (chunks as f64 / m as f64).powf(params.beta);
    MeteorParts {
        matches: m,
        chunks,
        precision,
        recall,
        f_mean,
        penalty,
        score: (1.0 - penalty) * f_mean,
    }
}

/// Mean over pairs of the best sentence METEOR against any reference.
pub fn meteor(pairs: &[EvalPair], params: MeteorParams) -> Result<f64> {
    check(pairs)?;
    if !(params.alpha > 0.0 && params.alpha < 1.0) {
        return Err(Error::Config(format!("METEOR alpha {} not in (0, 1)", params.alpha)));
    }
    let stemmer = Stemmer::create(Algorithm::English);
    let total: f64 = pairs
        .iter()
        .map(|p| {
            p.references
                .iter()
                .map(|r| meteor_with(&p.candidate, r, params, &stemmer).score)
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Length of the longest common subsequence.
pub fn lcs_len<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// Sentence ROUGE-L with `P = LCS / |reference|`, `R = LCS / |candidate|`.
pub fn rouge_l_sentence(cand: &[String], reference: &[String], beta: f64) -> f64 {
    let l = lcs_len(cand, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / reference.len() as f64;
    let r = l as f64 / cand.len() as f64;
    let b2 = beta * beta;
    (b2 + 1.0) * r * p / (r + b2 * p)
}

/// Mean over pairs of the best sentence ROUGE-L against any reference.
pub fn rouge_l(pairs: &[EvalPair], beta: f64) -> Result<f64> {
    check(pairs)?;
    if !(beta > 0.0) {
        return Err(Error::Config(format!("ROUGE-L beta {beta} must be positive")));
    }
    let total: f64 = pairs
        .iter()
        .map(|p| {
            p.references
                .iter()
                .map(|r| rouge_l_sentence(&p.candidate, r, beta))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

fn tfidf(tokens: &[String], n: usize, df: &HashMap<Vec<String>, usize>, docs: f64) -> HashMap<Vec<String>, f64> {
    ngrams(tokens, n)
        .into_iter()
        .map(|(g, k)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g.to_vec(), k as f64 * (docs / d).ln())
        })
        .collect()
}

fn cosine(a: &HashMap<Vec<String>, f64>, b: &HashMap<Vec<String>, f64>) -> f64 {
    let norm = |v: &HashMap<Vec<String>, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().map(|(g, x)| x * b.get(g).copied().unwrap_or(0.0)).sum();
    dot / (na * nb)
}

/// Per-pair CIDEr_n values for `n = 1..=max_n`.
///
/// Documents are the reference sets of the pairs: `idf = ln(N / df)` with
/// `df` the number of pairs whose references contain the n-gram (at least 1).
/// Term weights are raw counts times idf; a zero vector scores 0.
pub fn cider_terms(pairs: &[EvalPair], max_n: usize) -> Result<Vec<Vec<f64>>> {
    check(pairs)?;
    let docs = pairs.len() as f64;
    let mut out = vec![vec![0.0; max_n]; pairs.len()];
    for n in 1..=max_n {
        let mut df: HashMap<Vec<String>, usize> = HashMap::new();
        for p in pairs {
            let mut seen: std::collections::HashSet<&[String]> = std::collections::HashSet::new();
            for r in &p.references {
                seen.extend(ngrams(r, n).into_keys());
            }
            for g in seen {
                *df.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
        for (i, p) in pairs.iter().enumerate() {
            let c = tfidf(&p.candidate, n, &df, docs);
            let sum: f64 = p.references.iter().map(|r| cosine(&c, &tfidf(r, n, &df, docs))).sum();
            out[i][n - 1] = sum / p.references.len() as f64;
        }
    }
    Ok(out)
}

/// Raw CIDEr: mean over pairs of the mean over `n` of CIDEr_n.
pub fn cider(pairs: &[EvalPair], max_n: usize) -> Result<f64> {
    let terms = cider_terms(pairs, max_n)?;
    Ok(terms.iter().map(|t| t.iter().sum::<f64>() / max_n as f64).sum::<f64>() / pairs.len() as f64)
}

/// Minimum sample size `n0 / (1 + (n0 - 1) / population)` with
/// `n0 = Z²·0.25 / e²`, rounded to the nearest integer.
pub fn sample_size(e: f64, z: f64, population: u64) -> Result<u64> {
    if !(e > 0.0 && e < 1.0) {
        return Err(Error::InvalidInput(format!("margin of error {e} not in (0, 1)")));
    }
    if population == 0 {
        return Err(Error::InvalidInput("population must be at least 1".into()));
    }
    let n0 = z * z * 0.25 / (e * e);
    Ok((n0 / (1.0 + (n0 - 1.0) / population as f64)).round() as u64)
}

/// All four corpus metrics as fractions; CIDEr is raw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub bleu: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub pairs: usize,
}

impl MetricReport {
    pub const HEADER: &'static str = "BLEU(%)\tMETEOR(%)\tROUGE-L(%)\tCIDER\tCIDER(x10)";

    pub fn tsv_row(&self) -> String {
        format!(
            "{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.3}",
            self.bleu * 100.0,
            self.meteor * 100.0,
            self.rouge_l * 100.0,
            self.cider,
            self.cider * 10.0
        )
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\n{}", Self::HEADER, self.tsv_row())
    }
}

/// Scores aligned hypotheses against one reference each.
pub fn evaluate_corpus(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<MetricReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidInput(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let pairs: Vec<EvalPair> = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| EvalPair {
            candidate: h.clone(),
            references: vec![r.clone()],
        })
        .collect();
    evaluate_pairs(&pairs)
}

pub fn evaluate_pairs(pairs: &[EvalPair]) -> Result<MetricReport> {
    Ok(MetricReport {
        bleu: bleu(pairs, 4)?,
        meteor: meteor(pairs, MeteorParams::default())?,
        rouge_l: rouge_l(pairs, ROUGE_BETA)?,
        cider: cider(pairs, 4)?,
        pairs: pairs.len(),
    })
}
