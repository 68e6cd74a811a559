use rand::seq::SliceRandom;

use super::vocab::EOS;
use crate::rng::SeedTree;

/// Right-padded id matrix with a pad mask (`true` marks padding).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBatch {
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
}

impl PaddedBatch {
    /// Truncates each sequence to `max_len` and pads to the longest one.
    ///
    /// A sequence that ended in `<eos>` still ends in `<eos>` after
    /// truncation.
    pub fn new(seqs: &[&[usize]], max_len: usize, pad: usize) -> Self {
        let trimmed: Vec<Vec<usize>> = seqs.iter().map(|s| truncate(s, max_len)).collect();
        let width = trimmed.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(trimmed.len());
        let mut mask = Vec::with_capacity(trimmed.len());
        for s in trimmed {
            let mut m = vec![false; s.len()];
            m.resize(width, true);
            let mut row = s;
            row.resize(width, pad);
            ids.push(row);
            mask.push(m);
        }
        Self { ids, mask }
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    /// The unpadded ids of row `r`.
    pub fn row(&self, r: usize) -> &[usize] {
        let len = self.mask[r].iter().take_while(|&&m| !m).count();
        &self.ids[r][..len]
    }
}

/// Truncates to `max_len`, keeping a final `<eos>`.
pub fn truncate(seq: &[usize], max_len: usize) -> Vec<usize> {
    if seq.len() <= max_len {
        return seq.to_vec();
    }
    let mut out = seq[..max_len].to_vec();
    if seq.last() == Some(&EOS) && max_len > 0 {
        *out.last_mut().unwrap() = EOS;
    }
    out
}

/// One mini-batch of aligned source/target sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Positions of the examples within the split.
    pub indices: Vec<usize>,
    pub src: PaddedBatch,
    pub tgt: PaddedBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub pad_id: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            batch_size: 12,
            max_src_len: 50,
            max_tgt_len: 60,
            pad_id: super::vocab::PAD,
        }
    }
}

/// Single-pass iterator over padded mini-batches.
pub struct BatchIter<'a> {
    pairs: &'a [(Vec<usize>, Vec<usize>)],
    order: Vec<usize>,
    cursor: usize,
    config: BatchConfig,
}

/// Batches over `(source ids, target ids)` pairs. With `seed` the epoch order
/// is a seeded shuffle, otherwise the split order.
pub fn batch_iterator<'a>(
    pairs: &'a [(Vec<usize>, Vec<usize>)],
    config: BatchConfig,
    seed: Option<u64>,
) -> BatchIter<'a> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    if let Some(seed) = seed {
        order.shuffle(&mut SeedTree::new(seed).stream("batch-order"));
    }
    BatchIter {
        pairs,
        order,
        cursor: 0,
        config: BatchConfig {
            batch_size: config.batch_size.max(1),
            ..config
        },
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.config.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let src: Vec<&[usize]> = indices.iter().map(|&i| self.pairs[i].0.as_slice()).collect();
        let tgt: Vec<&[usize]> = indices.iter().map(|&i| self.pairs[i].1.as_slice()).collect();
        Some(Batch {
            src: PaddedBatch::new(&src, self.config.max_src_len, self.config.pad_id),
            tgt: PaddedBatch::new(&tgt, self.config.max_tgt_len, self.config.pad_id),
            indices,
        })
    }
}
