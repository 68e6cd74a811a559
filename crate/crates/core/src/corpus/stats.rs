use std::collections::BTreeMap;
use std::fmt;

/// Length distribution summary for one side of the corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct LengthStats {
    pub count: usize,
    pub avg: f64,
    /// Most frequent length; the smallest one on ties.
    pub mode: usize,
    pub median: f64,
    /// Percentage of sequences strictly shorter than 20, 50 and 100 tokens.
    pub under_20: f64,
    pub under_50: f64,
    pub under_100: f64,
}

impl LengthStats {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        if lengths.is_empty() {
            return Self {
                count: 0,
                avg: 0.0,
                mode: 0,
                median: 0.0,
                under_20: 0.0,
                under_50: 0.0,
                under_100: 0.0,
            };
        }
        let n = lengths.len();
        let avg = lengths.iter().sum::<usize>() as f64 / n as f64;

        let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
        for &l in lengths {
            *hist.entry(l).or_default() += 1;
        }
        let top = *hist.values().max().unwrap();
        let mode = *hist.iter().find(|(_, &c)| c == top).unwrap().0;

        let mut sorted = lengths.to_vec();
        sorted.sort_unstable();
        let median = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        };
        let pct = |limit: usize| 100.0 * lengths.iter().filter(|&&l| l < limit).count() as f64 / n as f64;
        Self {
            count: n,
            avg,
            mode,
            median,
            under_20: pct(20),
            under_50: pct(50),
            under_100: pct(100),
        }
    }

    pub fn of<S>(sequences: &[Vec<S>]) -> Self {
        Self::from_lengths(&sequences.iter().map(Vec::len).collect::<Vec<_>>())
    }
}

/// Statistics for both sides plus split sizes and unique-token counts.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusReport {
    pub code: LengthStats,
    pub pseudo: LengthStats,
    pub split_sizes: (usize, usize, usize),
    pub unique_code_tokens: usize,
    pub unique_pseudo_tokens: usize,
    pub code_vocab_size: usize,
    pub pseudo_vocab_size: usize,
}

impl fmt::Display for CorpusReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "side\tcount\tavg\tmode\tmedian\tlt20\tlt50\tlt100")?;
        for (name, s) in [("code", &self.code), ("pseudo", &self.pseudo)] {
            writeln!(
                f,
                "{name}\t{}\t{:.2}\t{}\t{}\t{:.2}\t{:.2}\t{:.2}",
                s.count, s.avg, s.mode, s.median, s.under_20, s.under_50, s.under_100
            )?;
        }
        let (tr, va, te) = self.split_sizes;
        writeln!(f, "train\t{tr}")?;
        writeln!(f, "valid\t{va}")?;
        writeln!(f, "test\t{te}")?;
        writeln!(f, "unique_code_tokens\t{}", self.unique_code_tokens)?;
        writeln!(f, "unique_pseudo_tokens\t{}", self.unique_pseudo_tokens)?;
        writeln!(f, "code_vocab_size\t{}", self.code_vocab_size)?;
        write!(f, "pseudo_vocab_size\t{}", self.pseudo_vocab_size)
    }
}
