mod common;

use common::*;
use deeppseudo::attention::{kernels, AttentionConfig, AttentionKind, MultiHeadAttention};
use deeppseudo::nn::{Ctx, ParamBuilder, ParamStore};
use deeppseudo::rng::SeedTree;
use deeppseudo::tensor::{Tape, Tensor};
use deeppseudo::Error;

const TOL: f64 = 1e-6;

fn run<F>(inputs: &[Tensor<f64>], f: F) -> (Vec<f64>, Vec<f64>)
where
    F: Fn(&mut Tape<'_, f64>, &[deeppseudo::tensor::Var]) -> deeppseudo::Result<kernels::HeadOutput>,
{
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    (tape.value(out.context).to_vec(), tape.value(out.weights).to_vec())
}

fn assert_close(got: &[f64], want: &[f64], what: &str) {
    let err = max_abs_diff(got, want);
    assert!(err < TOL, "{what}: max abs diff {err:e}");
}

#[test]
fn scaled_dot_matches_dense_oracle() {
    let mut r = rng(1);
    for causal in [false, true] {
        let (q, k, v) = (rand_tensor(&mut r, &[4, 4]), rand_tensor(&mut r, &[4, 4]), rand_tensor(&mut r, &[4, 4]));
        let (ctx, w) = run(&[q.clone(), k.clone(), v.clone()], |t, x| kernels::scaled_dot(t, x[0], x[1], x[2], causal));
        let (oc, ow) = oracle_self(&mat(&q), &mat(&k), &mat(&v), causal);
        assert_close(&ctx, &flat(&oc), "context");
        assert_close(&w, &flat(&ow), "weights");
    }
}

#[test]
fn linear_matches_dense_oracle() {
    let mut r = rng(2);
    let (q, k, v) = (rand_tensor(&mut r, &[4, 4]), rand_tensor(&mut r, &[4, 4]), rand_tensor(&mut r, &[4, 4]));
    let (e, f) = (rand_tensor(&mut r, &[4, 2]), rand_tensor(&mut r, &[4, 2]));
    let (ctx, w) = run(&[q.clone(), k.clone(), v.clone(), e.clone(), f.clone()], |t, x| {
        kernels::linear(t, x[0], x[1], x[2], x[3], x[4])
    });
    let (oc, ow) = oracle_linear(&mat(&q), &mat(&k), &mat(&v), &mat(&e), &mat(&f));
    assert_close(&ctx, &flat(&oc), "context");
    assert_close(&w, &flat(&ow), "weights");
}

#[test]
fn linear_with_identity_projections_is_scaled_dot() {
    let mut r = rng(3);
    let (q, k, v) = (rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[4, 4]), rand_tensor(&mut r, &[4, 4]));
    let eye = to_tensor(&(0..4).map(|i| (0..4).map(|j| f64::from(u8::from(i == j))).collect()).collect());
    let (lin, _) = run(&[q.clone(), k.clone(), v.clone(), eye.clone(), eye], |t, x| {
        kernels::linear(t, x[0], x[1], x[2], x[3], x[4])
    });
    let (plain, _) = run(&[q, k, v], |t, x| kernels::scaled_dot(t, x[0], x[1], x[2], false));
    assert_close(&lin, &plain, "identity projections");
}

#[test]
fn synthesizer_matches_dense_oracle() {
    let mut r = rng(4);
    for causal in [false, true] {
        let x = rand_tensor(&mut r, &[4, 4]);
        let w1 = rand_tensor(&mut r, &[4, 6]);
        let w2 = rand_tensor(&mut r, &[6, 6]);
        let b = rand_tensor(&mut r, &[6]);
        let g = rand_tensor(&mut r, &[4, 4]);
        let (ctx, w) = run(&[x.clone(), w1.clone(), w2.clone(), b.clone(), g.clone()], |t, v| {
            kernels::synthesizer(t, v[0], v[1], v[2], v[3], v[4], causal)
        });
        let (oc, ow) = oracle_synth(&mat(&x), &mat(&w1), &mat(&w2), b.data(), &mat(&g), causal);
        assert_close(&ctx, &flat(&oc), "context");
        assert_close(&w, &flat(&ow), "weights");
    }
}

#[test]
fn synthesizer_rejects_sequences_longer_than_its_table() {
    let mut r = rng(5);
    let inputs = [
        rand_tensor(&mut r, &[5, 4]),
        rand_tensor(&mut r, &[4, 3]),
        rand_tensor(&mut r, &[3, 3]),
        rand_tensor(&mut r, &[3]),
        rand_tensor(&mut r, &[5, 4]),
    ];
    let mut tape = Tape::new();
    let v: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let err = kernels::synthesizer(&mut tape, v[0], v[1], v[2], v[3], v[4], false).unwrap_err();
    assert!(matches!(err, Error::TooLong { .. }), "{err}");
}

#[test]
fn norm_matches_dense_oracle() {
    let mut r = rng(6);
    for causal in [false, true] {
        let (q, k, v) = (rand_tensor(&mut r, &[4, 4]), rand_tensor(&mut r, &[4, 4]), rand_tensor(&mut r, &[4, 4]));
        let g = Tensor::new(&[1, 1], vec![7.9]).unwrap();
        let (ctx, w) = run(&[q.clone(), k.clone(), v.clone(), g], |t, x| kernels::norm(t, x[0], x[1], x[2], x[3], causal));
        let (oc, ow) = oracle_norm(&mat(&q), &mat(&k), &mat(&v), 7.9, causal);
        assert_close(&ctx, &flat(&oc), "context");
        assert_close(&w, &flat(&ow), "weights");
    }
}

#[test]
fn norm_is_invariant_to_row_rescaling() {
    let mut r = rng(7);
    let (q, k, v) = (rand_tensor(&mut r, &[4, 4]), rand_tensor(&mut r, &[5, 4]), rand_tensor(&mut r, &[5, 4]));
    let scale_rows = |t: &Tensor<f64>, r: &mut TestRng| {
        let factors = rand_vec(r, t.shape()[0], 0.1, 50.0);
        let m: Mat = mat(t).iter().zip(&factors).map(|(row, f)| row.iter().map(|x| x * f).collect()).collect();
        to_tensor(&m)
    };
    let (q2, k2) = (scale_rows(&q, &mut r), scale_rows(&k, &mut r));
    let g = Tensor::new(&[1, 1], vec![5.0]).unwrap();
    let (_, w1) = run(&[q, k, v.clone(), g.clone()], |t, x| kernels::norm(t, x[0], x[1], x[2], x[3], false));
    let (_, w2) = run(&[q2, k2, v, g], |t, x| kernels::norm(t, x[0], x[1], x[2], x[3], false));
    assert_close(&w1, &w2, "rescaled rows");
}

fn multi_head(kind: AttentionKind) -> (ParamStore<f32>, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let mha = {
        let mut b = ParamBuilder::new(&mut store, SeedTree::new(9));
        let cfg = AttentionConfig {
            kind,
            n_heads: 4,
            d_model: 16,
            linear_k: 3,
            max_len: 10,
            norm_gain_init: 8.0,
        };
        MultiHeadAttention::new(&mut b, "att", cfg).unwrap()
    };
    (store, mha)
}

#[test]
fn every_variant_yields_row_stochastic_weights() {
    let mut r = rng(8);
    let x: Tensor<f32> = rand_tensor(&mut r, &[6, 16]).cast();
    for kind in AttentionKind::ALL {
        for causal in [false, true] {
            if causal && kind == AttentionKind::Linear {
                continue;
            }
            let (store, mha) = multi_head(kind);
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let mut ctx = Ctx::new(&mut tape, &bound, 0.0);
            let xv = ctx.tape.constant(x.clone());
            let out = mha.forward(&mut ctx, xv, xv, causal).unwrap();
            assert_eq!(tape.shape(out.context), &[6, 16]);
            let w = out.weights_tensor(&tape);
            let cols = w.shape()[2];
            for (ri, row) in w.data().chunks(cols).enumerate() {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-5, "{kind} row sum {s}");
                assert!(row.iter().all(|p| *p >= 0.0));
                if causal {
                    let qi = ri % 6;
                    assert!(row[qi + 1..].iter().all(|p| *p == 0.0), "{kind} attends to the future");
                }
            }
        }
    }
}

#[test]
fn linear_attention_weights_have_projection_width() {
    let (store, mha) = multi_head(AttentionKind::Linear);
    let mut r = rng(10);
    let x: Tensor<f32> = rand_tensor(&mut r, &[7, 16]).cast();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let mut ctx = Ctx::new(&mut tape, &bound, 0.0);
    let xv = ctx.tape.constant(x);
    let out = mha.forward(&mut ctx, xv, xv, false).unwrap();
    assert_eq!(out.weights_tensor(&tape).shape(), &[4, 7, 3]);
}

#[test]
fn linear_and_synthesizer_reject_overlong_input() {
    let mut r = rng(11);
    let x: Tensor<f32> = rand_tensor(&mut r, &[11, 16]).cast();
    for kind in [AttentionKind::Linear, AttentionKind::Synthesizer] {
        let (store, mha) = multi_head(kind);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &bound, 0.0);
        let xv = ctx.tape.constant(x.clone());
        let err = mha.forward(&mut ctx, xv, xv, false).unwrap_err();
        assert!(matches!(err, Error::TooLong { .. }), "{kind}: {err}");
    }
}

#[test]
fn synthesizer_has_no_key_projection() {
    let (store, _) = multi_head(AttentionKind::Synthesizer);
    assert!(store.id("att.key.weight").is_none());
    assert!(store.id("att.synth.3.w2").is_some());
    let (store, _) = multi_head(AttentionKind::SelfAttention);
    assert!(store.id("att.key.weight").is_some());
}

/// Same-padded cross-correlation by explicit loops.
fn naive_conv(x: &Mat, w: &Tensor<f64>, b: &[f64], k: usize) -> Mat {
    let (len, di) = (x.len(), x[0].len());
    let dout = w.shape()[2];
    let pad = (k - 1) / 2;
    let mut out = vec![b.to_vec(); len];
    for t in 0..len {
        for j in 0..k {
            let src = t as isize + j as isize - pad as isize;
            if src < 0 || src >= len as isize {
                continue;
            }
            for i in 0..di {
                for o in 0..dout {
                    out[t][o] += x[src as usize][i] * w.data()[(j * di + i) * dout + o];
                }
            }
        }
    }
    out
}

#[test]
fn conv1d_matches_loop_oracle() {
    let mut r = rng(12);
    for k in [1, 3, 5] {
        for len in [1, 2, 4, 7] {
            let x = rand_tensor(&mut r, &[len, 3]);
            let w = rand_tensor(&mut r, &[k, 3, 4]);
            let b = rand_tensor(&mut r, &[4]);
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
            let y = tape.conv1d(xv, wv, bv, k).unwrap();
            let want = naive_conv(&mat(&x), &w, b.data(), k);
            assert_close(tape.value(y), &flat(&want), &format!("conv k={k} len={len}"));
        }
    }
}
