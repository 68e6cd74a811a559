#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

pub mod grad_cases;

use deeppseudo::attention::kernels;
use deeppseudo::decode::StepScorer;
use deeppseudo::model::ModelConfig;
use deeppseudo::tensor::{Tape, Tensor, Var};
use deeppseudo::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    TestRng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut TestRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn rand_tensor(rng: &mut TestRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, rand_vec(rng, n, -1.0, 1.0)).unwrap()
}

/// Like [`rand_tensor`] but every entry has magnitude at least `gap`
/// (keeps finite differences away from kinks).
pub fn rand_tensor_away(rng: &mut TestRng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Compares the tape gradient of `sum(f(inputs) ⊙ R)` (R random) with central
/// differences over every input entry. Returns the relative error.
pub fn gradcheck<F>(rng: &mut TestRng, inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let forward = |xs: &[Tensor<f64>], proj: Option<&Tensor<f64>>| -> (Vec<usize>, f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
        let y = f(&mut tape, &vars).expect("forward");
        let shape = tape.shape(y).to_vec();
        let Some(r) = proj else {
            return (shape, 0.0, Vec::new());
        };
        let rv = tape.constant(r.clone());
        let prod = tape.mul(y, rv).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss)[0];
        tape.backward(loss).unwrap();
        let grads = vars
            .iter()
            .map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec))
            .collect();
        (shape, value, grads)
    };
    let (shape, _, _) = forward(inputs, None);
    let proj = rand_tensor(rng, &shape);
    let (_, _, analytic) = forward(inputs, Some(&proj));
    let mut a_all = Vec::new();
    let mut n_all = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let (_, lp, _) = forward(&plus, Some(&proj));
            let (_, lm, _) = forward(&minus, Some(&proj));
            n_all.push((lp - lm) / (2.0 * FD_STEP));
            a_all.push(analytic[i][j]);
        }
    }
    rel_err(&a_all, &n_all)
}

// ------------------------------------------------------------------ dense oracles

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor<f64>) -> Mat {
    let c = t.shape()[1];
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

pub fn to_tensor(m: &Mat) -> Tensor<f64> {
    Tensor::from_rows(m).unwrap()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

pub fn tr(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn softmax_rows(s: &Mat) -> Mat {
    s.iter()
        .map(|r| {
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect()
        })
        .collect()
}

pub fn mask_causal(s: &mut Mat) {
    for (i, r) in s.iter_mut().enumerate() {
        for (j, x) in r.iter_mut().enumerate() {
            if j > i {
                *x = f64::NEG_INFINITY;
            }
        }
    }
}

/// `(context, weights)`.
pub fn oracle_self(q: &Mat, k: &Mat, v: &Mat, causal: bool) -> (Mat, Mat) {
    let d = q[0].len() as f64;
    let mut s: Mat = mm(q, &tr(k)).iter().map(|r| r.iter().map(|x| x / d.sqrt()).collect()).collect();
    if causal {
        mask_causal(&mut s);
    }
    let w = softmax_rows(&s);
    (mm(&w, v), w)
}

pub fn oracle_linear(q: &Mat, k: &Mat, v: &Mat, e: &Mat, f: &Mat) -> (Mat, Mat) {
    let pk = mm(&tr(e), k);
    let pv = mm(&tr(f), v);
    oracle_self(q, &pk, &pv, false)
}

pub fn oracle_synth(x: &Mat, w1: &Mat, w2: &Mat, b: &[f64], g: &Mat, causal: bool) -> (Mat, Mat) {
    let len_k = g.len();
    let h: Mat = mm(x, w1)
        .iter()
        .map(|r| r.iter().zip(b).map(|(v, bb)| (v + bb).max(0.0)).collect())
        .collect();
    let big: Mat = mm(&h, w2)
        .iter()
        .map(|r| r.iter().zip(b).map(|(v, bb)| v + bb).collect())
        .collect();
    let mut s: Mat = big.iter().map(|r| r[..len_k].to_vec()).collect();
    if causal {
        mask_causal(&mut s);
    }
    let w = softmax_rows(&s);
    (mm(&w, g), w)
}

pub fn l2_rows(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / (n + kernels::NORM_EPS)).collect()
        })
        .collect()
}

pub fn oracle_norm(q: &Mat, k: &Mat, v: &Mat, g: f64, causal: bool) -> (Mat, Mat) {
    let mut s: Mat = mm(&l2_rows(q), &tr(&l2_rows(k)))
        .iter()
        .map(|r| r.iter().map(|x| g * x).collect())
        .collect();
    if causal {
        mask_causal(&mut s);
    }
    let w = softmax_rows(&s);
    (mm(&w, v), w)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

// ------------------------------------------------------------------ beam toys

/// Deterministic random next-token distributions keyed on the prefix.
pub struct ToyModel {
    pub vocab: usize,
    pub seed: u64,
}

impl ToyModel {
    pub fn log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        let mut h = DefaultHasher::new();
        (self.seed, prefix).hash(&mut h);
        let mut r = rng(h.finish());
        let logits: Vec<f64> = (0..self.vocab).map(|_| r.random_range(-3.0..3.0)).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
        logits.iter().map(|x| x - z).collect()
    }
}

impl StepScorer for ToyModel {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(ToyModel::log_probs(self, prefix))
    }
}

/// Best score over every sequence reachable within `n_max` tokens (counting
/// `<sos>`): sequences stop at the first `<eos>` or at the length limit.
pub fn exhaustive_best(model: &ToyModel, n_max: usize) -> (f64, Vec<usize>) {
    fn go(model: &ToyModel, prefix: &mut Vec<usize>, score: f64, n_max: usize, best: &mut (f64, Vec<usize>)) {
        let done = prefix.last() == Some(&deeppseudo::corpus::EOS) || prefix.len() == n_max;
        if done {
            if score > best.0 {
                *best = (score, prefix.clone());
            }
            return;
        }
        let lp = model.log_probs(prefix);
        for (y, p) in lp.iter().enumerate() {
            prefix.push(y);
            go(model, prefix, score + p, n_max, best);
            prefix.pop();
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    go(model, &mut vec![deeppseudo::corpus::SOS], 0.0, n_max, &mut best);
    best
}

// ------------------------------------------------------------------ fixtures

pub fn tiny_config(src: usize, tgt: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        ff_dim: 32,
        max_src_len: 12,
        max_tgt_len: 12,
        linear_k: 4,
        ..ModelConfig::new(src, tgt)
    }
}

pub fn sample_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/sample")
}

/// Outcome of the randomized beam-search comparison.
#[derive(Debug, Default)]
pub struct BeamSuite {
    pub models: usize,
    /// `(seed, k, beam score, greedy score)` where beam lost to greedy.
    pub below_greedy: Vec<(u64, usize, f64, f64)>,
    /// `(seed, beam score, optimum)` where the full-width beam missed the optimum.
    pub missed_optimum: Vec<(u64, f64, f64)>,
    /// Seeds where `k = 1` and greedy disagree bit-for-bit.
    pub k1_mismatch: Vec<u64>,
}

/// Fifty toy models with vocabularies of 3..=5 and `n_max` of 2..=4.
pub fn run_beam_suite() -> BeamSuite {
    use deeppseudo::decode::{beam_search, greedy_decode};
    let mut out = BeamSuite::default();
    for seed in 0..50u64 {
        let mut r = rng(0xbea0 + seed);
        let vocab = r.random_range(3..=5usize);
        let n_max = r.random_range(2..=4usize);
        let mut model = ToyModel { vocab, seed };
        out.models += 1;

        let greedy = greedy_decode(&mut model, n_max).unwrap();
        let k1 = beam_search(&mut model, 1, n_max).unwrap();
        if k1.ids != greedy.ids || k1.score.to_bits() != greedy.score.to_bits() {
            out.k1_mismatch.push(seed);
        }
        for k in 2..=vocab {
            let b = beam_search(&mut model, k, n_max).unwrap();
            if b.score < greedy.score {
                out.below_greedy.push((seed, k, b.score, greedy.score));
            }
        }
        let width = vocab.pow(n_max as u32 - 1);
        let full = beam_search(&mut model, width, n_max).unwrap();
        let (best, _) = exhaustive_best(&model, n_max);
        if (full.score - best).abs() > 1e-12 {
            out.missed_optimum.push((seed, full.score, best));
        }
    }
    out
}

/// Hand-derived metric values: `(label, computed, expected)`.
pub fn metric_cases() -> Vec<(&'static str, f64, f64)> {
    use deeppseudo::metrics::*;
    let t = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let one = |c: &str, r: &str| vec![EvalPair::from_text(c, &[r])];
    let mp = MeteorParams::default();
    let mut out = Vec::new();

    let same = one("call the method self . foo with argument x", "call the method self . foo with argument x");
    out.push(("BLEU identity", bleu(&same, 4).unwrap(), 1.0));
    out.push(("ROUGE-L identity", rouge_l(&same, ROUGE_BETA).unwrap(), 1.0));

    let clip = bleu_stats(&one("the the the", "the cat"), 4).unwrap();
    out.push(("BLEU clipped p1", clip.precision(1), 1.0 / 3.0));
    let short = bleu(&one("a b c d e", "a b c d e f"), 4).unwrap();
    out.push(("BLEU brevity", short, (-0.2f64).exp()));
    let multi = bleu_stats(&[EvalPair::from_text("a a b", &["a b b", "a a c"])], 1).unwrap();
    out.push(("BLEU multi-reference clip", multi.precision(1), 1.0));

    let m = meteor_sentence(&t("a b c"), &t("a c"), mp);
    let (p, r) = (2.0 / 3.0, 1.0);
    let f = p * r / (0.9 * p + 0.1 * r);
    out.push(("METEOR precision", m.precision, p));
    out.push(("METEOR recall", m.recall, r));
    out.push(("METEOR penalty", m.penalty, 0.5));
    out.push(("METEOR score", m.score, 0.5 * f));

    out.push(("ROUGE-L symmetric", rouge_l_sentence(&t("a b c"), &t("a c d"), ROUGE_BETA), 2.0 / 3.0));
    out.push(("ROUGE-L symmetric beta 3", rouge_l_sentence(&t("a b c"), &t("a c d"), 3.0), 2.0 / 3.0));
    out.push(("ROUGE-L asymmetric", rouge_l_sentence(&t("a c"), &t("a b c d"), ROUGE_BETA), 1.22 / 1.72));

    // idf: a appears in two of three reference sets, every other unigram in one.
    let pairs = vec![
        EvalPair::from_text("a b", &["a b"]),
        EvalPair::from_text("a c", &["a d"]),
        EvalPair::from_text("b e", &["c e"]),
    ];
    let (ia, i3) = (1.5f64.ln(), 3f64.ln());
    let cos2 = ia * ia / (ia * ia + i3 * i3);
    let terms = cider_terms(&pairs, 4).unwrap();
    out.push(("CIDEr pair 1, n=1", terms[0][0], 1.0));
    out.push(("CIDEr pair 1, n=2", terms[0][1], 1.0));
    out.push(("CIDEr pair 2, n=1", terms[1][0], cos2));
    out.push(("CIDEr pair 3, n=1", terms[2][0], 0.5));
    out.push(("CIDEr pair 3, n=2", terms[2][1], 0.0));
    out.push(("CIDEr corpus", cider(&pairs, 4).unwrap(), (0.5 + cos2 / 4.0 + 0.125) / 3.0));

    out.push(("sample size 1880", sample_size(0.05, 1.96, 1880).unwrap() as f64, 319.0));
    out.push(("sample size 384", sample_size(0.05, 1.96, 384).unwrap() as f64, 192.0));
    out
}

/// The bundled 64-pair sample as both train and valid split, with the
/// held-out pairs as test; every token is kept.
pub fn sample_corpus() -> deeppseudo::corpus::ParallelCorpus {
    use deeppseudo::corpus::{load_pairs, ParallelCorpus, Splits};
    let dir = sample_dir();
    let train = load_pairs(&dir.join("code.txt"), &dir.join("anno.txt")).unwrap();
    let test = load_pairs(&dir.join("heldout.code"), &dir.join("heldout.anno")).unwrap();
    let splits = Splits {
        valid: train.clone(),
        train,
        test,
    };
    ParallelCorpus::from_raw(splits, 1).unwrap()
}

/// Corpus BLEU of beam-decoded outputs against the examples' target tokens.
pub fn decode_bleu(
    model: &deeppseudo::model::Seq2Seq<f32>,
    corpus: &deeppseudo::corpus::ParallelCorpus,
    examples: &[deeppseudo::corpus::Example],
    k: usize,
) -> f64 {
    use deeppseudo::decode::translate_ids;
    use deeppseudo::metrics::{bleu, EvalPair};
    let pairs: Vec<EvalPair> = examples
        .iter()
        .map(|e| {
            let src = deeppseudo::corpus::truncate_ids(&e.src, model.config().max_src_len);
            let ids = translate_ids(model, &src, k).unwrap();
            EvalPair {
                candidate: corpus.tgt_vocab.decode(&ids),
                references: vec![e.tokens.pseudo.clone()],
            }
        })
        .collect();
    bleu(&pairs, 4).unwrap()
}
