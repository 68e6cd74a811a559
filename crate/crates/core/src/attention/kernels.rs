//! Single-head attention kernels on the tape.
//!
//! Each kernel returns the context rows and the (post-softmax) weight matrix.

use std::sync::Once;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Guard added to row norms before dividing in norm attention.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub context: Var,
    pub weights: Var,
}

/// Additive mask hiding key positions after each query position.
pub fn causal_mask<T: Real>(len_q: usize, len_k: usize) -> Tensor<T> {
    let data = (0..len_q)
        .flat_map(|i| (0..len_k).map(move |j| if j > i { T::neg_infinity() } else { T::zero() }))
        .collect();
    Tensor::new(&[len_q, len_k], data).expect("positive lengths")
}

fn finish<T: Real>(tape: &mut Tape<'_, T>, scores: Var, values: Var, causal: bool) -> Result<HeadOutput> {
    let scores = if causal {
        let (q, k) = (tape.shape(scores)[0], tape.shape(scores)[1]);
        let mask = tape.constant(causal_mask(q, k));
        tape.add(scores, mask)?
    } else {
        scores
    };
    let weights = tape.softmax(scores, 1)?;
    let context = tape.matmul(weights, values)?;
    Ok(HeadOutput { context, weights })
}

fn check_qkv<T: Real>(tape: &Tape<'_, T>, q: Var, k: Var, v: Var) -> Result<()> {
    let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 {
        return Err(Error::shape("attention", "query, key and value must be matrices"));
    }
    if sq[1] != sk[1] {
        return Err(Error::dims("attention (query/key width)", sq, sk));
    }
    if sk[0] != sv[0] {
        return Err(Error::dims("attention (key/value length)", sk, sv));
    }
    Ok(())
}

/// `softmax(Q·Kᵀ / sqrt(d_k)) · V`.
pub fn scaled_dot<T: Real>(tape: &mut Tape<'_, T>, q: Var, k: Var, v: Var, causal: bool) -> Result<HeadOutput> {
    check_qkv(tape, q, k, v)?;
    let d_k = tape.shape(q)[1] as f64;
    let s = tape.matmul_t(q, k)?;
    let s = tape.scale(s, 1.0 / d_k.sqrt());
    finish(tape, s, v, causal)
}

/// `softmax(Q·(EᵀK)ᵀ / sqrt(d_k)) · (FᵀV)` with `E`, `F` of shape `len_k×k`:
/// keys and values are projected along the length axis down to `k` rows.
pub fn linear<T: Real>(tape: &mut Tape<'_, T>, q: Var, k: Var, v: Var, e: Var, f: Var) -> Result<HeadOutput> {
    check_qkv(tape, q, k, v)?;
    let len_k = tape.shape(k)[0];
    for p in [e, f] {
        if tape.shape(p).len() != 2 || tape.shape(p)[0] != len_k {
            return Err(Error::dims("linear attention projection", tape.shape(p), tape.shape(k)));
        }
    }
    let proj = tape.shape(e)[1];
    if proj > len_k {
        static WARN: Once = Once::new();
        WARN.call_once(|| {
            log::warn!("linear attention projection k={proj} exceeds sequence length {len_k}; no savings")
        });
    }
    let et = tape.transpose(e)?;
    let ft = tape.transpose(f)?;
    let pk = tape.matmul(et, k)?;
    let pv = tape.matmul(ft, v)?;
    let d_k = tape.shape(q)[1] as f64;
    let s = tape.matmul_t(q, pk)?;
    let s = tape.scale(s, 1.0 / d_k.sqrt());
    finish(tape, s, pv, false)
}

/// Dense synthesizer: `B = W2·ReLU(W1·X + b) + b`, sliced to `len_q×len_k`,
/// then `softmax(B) · G(X)`.
///
/// `w1` is `d×l`, `w2` is `l×l`, the shared bias `b` has `l` entries and
/// `values` (the already-projected `G(X)`) has `len_k` rows.
pub fn synthesizer<T: Real>(
    tape: &mut Tape<'_, T>,
    x: Var,
    w1: Var,
    w2: Var,
    b: Var,
    values: Var,
    causal: bool,
) -> Result<HeadOutput> {
    let l = tape.shape(w2)[1];
    let len_k = tape.shape(values)[0];
    if len_k > l {
        return Err(Error::TooLong {
            what: "synthesizer attention",
            len: len_k,
            max: l,
        });
    }
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b)?;
    let h = tape.relu(h);
    let big = tape.matmul(h, w2)?;
    let big = tape.add_bias(big, b)?;
    let scores = if len_k < l { tape.slice_cols(big, 0, len_k)? } else { big };
    finish(tape, scores, values, causal)
}

/// `softmax(g · Q̂·K̂ᵀ) · V` with rows of `Q` and `K` scaled to unit l2 norm.
/// `g` is a single-element gain.
pub fn norm<T: Real>(tape: &mut Tape<'_, T>, q: Var, k: Var, v: Var, g: Var, causal: bool) -> Result<HeadOutput> {
    check_qkv(tape, q, k, v)?;
    if tape.value(g).len() != 1 {
        return Err(Error::shape("norm attention", "gain must be a single value"));
    }
    let qn = tape.l2_normalize_rows(q, NORM_EPS);
    let kn = tape.l2_normalize_rows(k, NORM_EPS);
    let s = tape.matmul_t(qn, kn)?;
    let s = tape.mul(s, g)?;
    finish(tape, s, v, causal)
}
