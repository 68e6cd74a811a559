//! One randomized finite-difference case per differentiable operation.

use deeppseudo::attention::kernels;
use deeppseudo::tensor::Tensor;
use rand::Rng;

use super::{gradcheck, rand_tensor, rand_tensor_away, TestRng};

pub type Case = fn(&mut TestRng) -> f64;

fn dim(rng: &mut TestRng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn rand2(r: &mut TestRng, rows: (usize, usize), cols: (usize, usize)) -> Tensor<f64> {
    let s = [dim(r, rows.0, rows.1), dim(r, cols.0, cols.1)];
    rand_tensor(r, &s)
}

fn matmul(r: &mut TestRng) -> f64 {
    let (m, k, n) = (dim(r, 1, 5), dim(r, 1, 5), dim(r, 1, 5));
    let xs = [rand_tensor(r, &[m, k]), rand_tensor(r, &[k, n])];
    gradcheck(r, &xs, |t, v| t.matmul(v[0], v[1]))
}

fn matmul_t(r: &mut TestRng) -> f64 {
    let (m, k, n) = (dim(r, 1, 5), dim(r, 1, 5), dim(r, 1, 5));
    let xs = [rand_tensor(r, &[m, k]), rand_tensor(r, &[n, k])];
    gradcheck(r, &xs, |t, v| t.matmul_t(v[0], v[1]))
}

fn transpose(r: &mut TestRng) -> f64 {
    let xs = [rand2(r, (1, 5), (1, 5))];
    gradcheck(r, &xs, |t, v| t.transpose(v[0]))
}

fn add(r: &mut TestRng) -> f64 {
    let s = [dim(r, 1, 4), dim(r, 1, 4)];
    let xs = [rand_tensor(r, &s), rand_tensor(r, &s), rand_tensor(r, &[1])];
    gradcheck(r, &xs, |t, v| {
        let a = t.add(v[0], v[1])?;
        t.add(a, v[2])
    })
}

fn sub(r: &mut TestRng) -> f64 {
    let s = [dim(r, 1, 4), dim(r, 1, 4)];
    let xs = [rand_tensor(r, &s), rand_tensor(r, &s)];
    gradcheck(r, &xs, |t, v| t.sub(v[0], v[1]))
}

fn mul(r: &mut TestRng) -> f64 {
    let s = [dim(r, 1, 4), dim(r, 1, 4)];
    let xs = [rand_tensor(r, &s), rand_tensor(r, &s), rand_tensor(r, &[1])];
    gradcheck(r, &xs, |t, v| {
        let a = t.mul(v[0], v[1])?;
        t.mul(a, v[2])
    })
}

fn scale(r: &mut TestRng) -> f64 {
    let c: f64 = r.random_range(-2.0..2.0);
    let xs = [rand2(r, (1, 4), (1, 4))];
    gradcheck(r, &xs, move |t, v| Ok(t.scale(v[0], c)))
}

fn add_bias(r: &mut TestRng) -> f64 {
    let (m, n) = (dim(r, 1, 5), dim(r, 1, 5));
    let xs = [rand_tensor(r, &[m, n]), rand_tensor(r, &[n])];
    gradcheck(r, &xs, |t, v| t.add_bias(v[0], v[1]))
}

fn sigmoid(r: &mut TestRng) -> f64 {
    let xs = [rand2(r, (1, 4), (1, 4))];
    gradcheck(r, &xs, |t, v| Ok(t.sigmoid(v[0])))
}

fn relu(r: &mut TestRng) -> f64 {
    let xs = { let s = [dim(r, 1, 4), dim(r, 1, 4)]; [rand_tensor_away(r, &s, 0.01)] };
    gradcheck(r, &xs, |t, v| Ok(t.relu(v[0])))
}

fn log(r: &mut TestRng) -> f64 {
    let s = [dim(r, 1, 4), dim(r, 1, 4)];
    let n = s[0] * s[1];
    let xs = [Tensor::new(&s, (0..n).map(|_| r.random_range(0.2..2.0)).collect()).unwrap()];
    gradcheck(r, &xs, |t, v| t.log(v[0]))
}

fn dropout_mask(r: &mut TestRng) -> f64 {
    let s = [dim(r, 1, 4), dim(r, 1, 4)];
    let mask: Vec<f64> = (0..s[0] * s[1]).map(|_| if r.random_bool(0.25) { 0.0 } else { 1.0 / 0.75 }).collect();
    let xs = [rand_tensor(r, &s)];
    gradcheck(r, &xs, move |t, v| t.dropout_with_mask(v[0], mask.clone()))
}

fn softmax(r: &mut TestRng) -> f64 {
    let axis = dim(r, 0, 1);
    let xs = [rand2(r, (1, 5), (1, 5))];
    gradcheck(r, &xs, move |t, v| t.softmax(v[0], axis))
}

fn log_softmax(r: &mut TestRng) -> f64 {
    let xs = [rand2(r, (1, 4), (2, 6))];
    gradcheck(r, &xs, |t, v| Ok(t.log_softmax(v[0])))
}

fn layer_norm(r: &mut TestRng) -> f64 {
    let (m, n) = (dim(r, 1, 4), dim(r, 2, 6));
    let xs = [rand_tensor(r, &[m, n]), rand_tensor(r, &[n]), rand_tensor(r, &[n])];
    gradcheck(r, &xs, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))
}

fn l2_normalize(r: &mut TestRng) -> f64 {
    let s = [dim(r, 1, 4), dim(r, 2, 5)];
    let xs = [rand_tensor_away(r, &s, 0.1)];
    gradcheck(r, &xs, |t, v| Ok(t.l2_normalize_rows(v[0], kernels::NORM_EPS)))
}

fn conv1d(r: &mut TestRng) -> f64 {
    let k = [1, 3, 5][dim(r, 0, 2)];
    let (len, di, dout) = (dim(r, 1, 6), dim(r, 1, 4), dim(r, 1, 4));
    let xs = [rand_tensor(r, &[len, di]), rand_tensor(r, &[k, di, dout]), rand_tensor(r, &[dout])];
    gradcheck(r, &xs, move |t, v| t.conv1d(v[0], v[1], v[2], k))
}

fn glu(r: &mut TestRng) -> f64 {
    let xs = [{ let s = [dim(r, 1, 4), 2 * dim(r, 1, 3)]; rand_tensor(r, &s) }];
    gradcheck(r, &xs, |t, v| t.glu(v[0]))
}

fn embedding(r: &mut TestRng) -> f64 {
    let (vocab, d) = (dim(r, 1, 5), dim(r, 1, 4));
    let ids: Vec<usize> = (0..dim(r, 1, 6)).map(|_| r.random_range(0..vocab)).collect();
    let xs = [rand_tensor(r, &[vocab, d])];
    gradcheck(r, &xs, move |t, v| t.embedding(v[0], &ids))
}

fn cross_entropy(r: &mut TestRng) -> f64 {
    let (n, vocab) = (dim(r, 2, 5), dim(r, 2, 6));
    let mut targets: Vec<usize> = (0..n).map(|_| r.random_range(0..vocab)).collect();
    targets[0] = 1.min(vocab - 1);
    let xs = [rand_tensor(r, &[n, vocab])];
    gradcheck(r, &xs, move |t, v| t.cross_entropy(v[0], &targets, 0))
}

fn sum(r: &mut TestRng) -> f64 {
    let xs = [rand2(r, (1, 4), (1, 4))];
    gradcheck(r, &xs, |t, v| Ok(t.sum(v[0])))
}

fn slice_concat(r: &mut TestRng) -> f64 {
    let (m, n) = (dim(r, 2, 5), dim(r, 2, 5));
    let xs = [rand_tensor(r, &[m, n]), rand_tensor(r, &[m, n])];
    gradcheck(r, &xs, move |t, v| {
        let a = t.slice_cols(v[0], 1, n - 1)?;
        let b = t.slice_rows(v[1], 0, m - 1)?;
        let b = t.transpose(b)?;
        let b = t.slice_cols(b, 0, m - 1)?;
        let b = t.transpose(b)?;
        let c = t.concat_cols(&[a, v[1]])?;
        let d = t.concat_rows(&[c, c])?;
        let s = t.sum(b);
        t.mul(d, s)
    })
}

fn attn_dims(r: &mut TestRng) -> (usize, usize, usize) {
    (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4))
}

fn attn_self(r: &mut TestRng) -> f64 {
    let (lq, lk, d) = attn_dims(r);
    let causal = lq == lk && r.random_bool(0.5);
    let xs = [rand_tensor(r, &[lq, d]), rand_tensor(r, &[lk, d]), rand_tensor(r, &[lk, d])];
    gradcheck(r, &xs, move |t, v| Ok(kernels::scaled_dot(t, v[0], v[1], v[2], causal)?.context))
}

fn attn_linear(r: &mut TestRng) -> f64 {
    let (lq, lk, d) = attn_dims(r);
    let k = dim(r, 1, lk);
    let xs = [
        rand_tensor(r, &[lq, d]),
        rand_tensor(r, &[lk, d]),
        rand_tensor(r, &[lk, d]),
        rand_tensor(r, &[lk, k]),
        rand_tensor(r, &[lk, k]),
    ];
    gradcheck(r, &xs, |t, v| Ok(kernels::linear(t, v[0], v[1], v[2], v[3], v[4])?.context))
}

fn attn_synth(r: &mut TestRng) -> f64 {
    let (lq, lk, d) = attn_dims(r);
    let l = lk.max(lq) + dim(r, 0, 2);
    let causal = lq == lk && r.random_bool(0.5);
    let xs = [
        rand_tensor(r, &[lq, d]),
        rand_tensor(r, &[d, l]),
        rand_tensor(r, &[l, l]),
        rand_tensor_away(r, &[l], 0.05),
        rand_tensor(r, &[lk, d]),
    ];
    gradcheck(r, &xs, move |t, v| Ok(kernels::synthesizer(t, v[0], v[1], v[2], v[3], v[4], causal)?.context))
}

fn attn_norm(r: &mut TestRng) -> f64 {
    let (lq, lk, d) = attn_dims(r);
    let causal = lq == lk && r.random_bool(0.5);
    let g = Tensor::new(&[1, 1], vec![r.random_range(0.5..4.0)]).unwrap();
    let xs = [rand_tensor(r, &[lq, d]), rand_tensor(r, &[lk, d]), rand_tensor(r, &[lk, d]), g];
    gradcheck(r, &xs, move |t, v| Ok(kernels::norm(t, v[0], v[1], v[2], v[3], causal)?.context))
}

/// Every differentiable operation, by name.
pub const CASES: &[(&str, Case)] = &[
    ("matmul", matmul),
    ("matmul_t", matmul_t),
    ("transpose", transpose),
    ("add", add),
    ("sub", sub),
    ("mul", mul),
    ("scale", scale),
    ("add_bias", add_bias),
    ("sigmoid", sigmoid),
    ("relu", relu),
    ("log", log),
    ("dropout_mask", dropout_mask),
    ("softmax", softmax),
    ("log_softmax", log_softmax),
    ("layer_norm", layer_norm),
    ("l2_normalize_rows", l2_normalize),
    ("conv1d", conv1d),
    ("glu", glu),
    ("embedding", embedding),
    ("cross_entropy", cross_entropy),
    ("sum", sum),
    ("slice_concat", slice_concat),
    ("attention_self", attn_self),
    ("attention_linear", attn_linear),
    ("attention_synthesizer", attn_synth),
    ("attention_norm", attn_norm),
];

/// Worst relative error of `trials` random instances of one case.
pub fn worst(case: Case, trials: usize, seed: u64) -> f64 {
    let mut r = super::rng(seed);
    (0..trials).map(|_| case(&mut r)).fold(0.0, f64::max)
}
