//! Attention-weight export: one TSV matrix per head plus a long-format file.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{ensure, Context, Result};
use deeppseudo::attention::AttentionKind;
use deeppseudo::corpus::{Vocabulary, SOS};
use deeppseudo::decode::{source_ids, translate_ids};
use deeppseudo::nn::Ctx;
use deeppseudo::tensor::Tape;
use deeppseudo::training::Checkpoint;
use log::info;

use crate::config::RunConfig;

/// Decimal text with six significant digits.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs().log10().floor() as i32;
    let s = format!("{v:.*}", (5 - mag).max(0) as usize);
    // Rounding can carry into a new leading digit (0.9999996 -> 1.000000).
    if s.parse::<f64>().is_ok_and(|r| r.abs() >= 10f64.powi(mag + 1)) {
        return format!("{v:.*}", (4 - mag).max(0) as usize);
    }
    s
}

fn labels(vocab: &Vocabulary, ids: &[usize]) -> Vec<String> {
    ids.iter().map(|&i| vocab.token(i).unwrap_or("<unk>").to_string()).collect()
}

/// Writes the weights of one layer for `line`: encoder self-attention, or
/// decoder cross-attention over the beam-decoded output with `cross`.
pub fn dump_attention(cfg: &RunConfig, line: &str, layer: Option<usize>, cross: bool) -> Result<()> {
    let ckpt = Checkpoint::load(cfg.checkpoint_path()?)?;
    let model = ckpt.model()?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("attention"));
    let src = source_ids(&model, &ckpt.src_vocab, line)?;
    let src_labels = labels(&ckpt.src_vocab, &src);

    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let mut ctx = Ctx::new(&mut tape, &bound, 0.0);
    let enc = model.forward_encode(&mut ctx, &src)?;
    let (layers, row_labels, kind) = if cross {
        let mut prefix = vec![SOS];
        prefix.extend(translate_ids(&model, &src, cfg.beam_size)?);
        let dec = model.forward_decode(&mut ctx, enc.memory, &prefix)?;
        (dec.cross_attention, labels(&ckpt.tgt_vocab, &prefix), model.config().cross_attention)
    } else {
        (enc.attention, src_labels.clone(), model.config().attention)
    };
    let layer = layer.unwrap_or(layers.len() - 1);
    ensure!(layer < layers.len(), "layer {layer} out of range (model has {})", layers.len());
    let w = layers[layer].weights_tensor(&*ctx.tape);
    let (heads, rows, cols) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let col_labels: Vec<String> = if kind == AttentionKind::Linear {
        (0..cols).map(|j| format!("proj_{j}")).collect()
    } else {
        src_labels
    };

    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut long = String::from("layer\thead\tquery_pos\tquery\tkey_pos\tkey\tweight\n");
    for h in 0..heads {
        let mut t = String::new();
        let _ = writeln!(t, "\t{}", col_labels.join("\t"));
        let matrix = &w.data()[h * rows * cols..(h + 1) * rows * cols];
        for (r, (row, label)) in matrix.chunks(cols).zip(&row_labels).enumerate() {
            let cells: Vec<String> = row.iter().map(|&x| sig6(f64::from(x))).collect();
            let _ = writeln!(t, "{label}\t{}", cells.join("\t"));
            for (c, (cell, key)) in cells.iter().zip(&col_labels).enumerate() {
                let _ = writeln!(long, "{layer}\t{h}\t{r}\t{label}\t{c}\t{key}\t{cell}");
            }
        }
        let path = out.join(format!("head_{h}.tsv"));
        fs::write(&path, t).with_context(|| format!("cannot write {}", path.display()))?;
    }
    let path = out.join("attention.tsv");
    fs::write(&path, long).with_context(|| format!("cannot write {}", path.display()))?;
    info!("wrote {heads} heads of layer {layer} to {}", out.display());
    println!("{}", row_labels.join(" "));
    Ok(())
}
