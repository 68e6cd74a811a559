use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM: usize = 4;
pub const STR: usize = 5;

/// Tokens rarer than this in the training split map to `<unk>`.
pub const DEFAULT_MIN_FREQUENCY: usize = 2;

/// Surface forms of the reserved ids, in id order.
pub const SPECIALS: [&str; 6] = ["<pad>", "<sos>", "<eos>", "<unk>", "<NUM>", "<STR>"];

/// Bidirectional token/id map with reserved special ids `0..6`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_frequency: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from training sequences.
    ///
    /// Ids after the specials are assigned by descending frequency, ties
    /// broken lexicographically; tokens seen fewer than `min_frequency` times
    /// are left out and will encode to `<unk>`.
    pub fn build<'a, I, S>(sequences: I, min_frequency: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut seen_any = false;
        for seq in sequences {
            seen_any = true;
            for tok in seq {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        if !seen_any || counts.is_empty() {
            return Err(Error::InvalidInput("cannot build a vocabulary from no tokens".into()));
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(tok, n)| *n >= min_frequency && !SPECIALS.contains(tok))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Ok(Self::from_parts(tokens, min_frequency))
    }

    fn from_parts(tokens: Vec<String>, min_frequency: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens,
            index,
            min_frequency,
        }
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::InvalidInput(format!(
                "vocabulary must start with the special tokens {SPECIALS:?}"
            )));
        }
        let vocab = Self::from_parts(tokens, 1);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::InvalidInput("duplicate token in vocabulary".into()));
        }
        if let Some(bad) = vocab.tokens.iter().find(|t| t.is_empty() || t.contains(char::is_whitespace)) {
            return Err(Error::InvalidInput(format!("invalid vocabulary token {bad:?}")));
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps tokens to ids; unknown tokens become `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], add_sos_eos: bool) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        if add_sos_eos {
            ids.push(SOS);
        }
        ids.extend(tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(UNK)));
        if add_sos_eos {
            ids.push(EOS);
        }
        ids
    }

    /// Maps ids back to tokens, dropping `<pad>`, `<sos>` and `<eos>`.
    /// Out-of-range ids decode to `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | SOS | EOS))
            .map(|&id| self.token(id).unwrap_or(SPECIALS[UNK]).to_string())
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seqs(v: &[&[&str]]) -> Vec<Vec<String>> {
        v.iter().map(|s| s.iter().map(|t| t.to_string()).collect()).collect()
    }

    #[test]
    fn frequency_cutoff() {
        let data = seqs(&[&["a", "a", "b"], &["a"]]);
        let v = Vocabulary::build(data.iter().map(Vec::as_slice), 2).unwrap();
        assert_eq!(v.id("a"), Some(6));
        assert_eq!(v.id("b"), None);
        assert_eq!(v.encode(&["b"], false), vec![UNK]);

        let v1 = Vocabulary::build(data.iter().map(Vec::as_slice), 1).unwrap();
        assert!(v1.id("a").is_some() && v1.id("b").is_some());
    }

    #[test]
    fn specials_fixed_and_ties_lexicographic() {
        let data = seqs(&[&["z", "y", "x", "x", "<NUM>"]]);
        let v = Vocabulary::build(data.iter().map(Vec::as_slice), 1).unwrap();
        assert_eq!(&v.tokens()[..6], SPECIALS.map(String::from).as_slice());
        assert_eq!(&v.tokens()[6..], &["x", "y", "z"]);
        assert_eq!(v.id("<NUM>"), Some(NUM));
    }

    #[test]
    fn encode_decode() {
        let data = seqs(&[&["a", "b"]]);
        let v = Vocabulary::build(data.iter().map(Vec::as_slice), 1).unwrap();
        let ids = v.encode(&["a"], true);
        assert_eq!(ids, vec![SOS, v.id("a").unwrap(), EOS]);
        assert_eq!(v.decode(&ids), vec!["a"]);
        assert_eq!(v.encode(&["zzz"], false), vec![UNK]);
        assert_eq!(v.decode(&[PAD, 99]), vec!["<unk>"]);
    }

    #[test]
    fn empty_input_is_an_error() {
        let empty: Vec<Vec<String>> = Vec::new();
        assert!(Vocabulary::build(empty.iter().map(Vec::as_slice), 1).is_err());
    }

    #[test]
    fn text_round_trip() {
        let data = seqs(&[&["if", "x", "x"]]);
        let v = Vocabulary::build(data.iter().map(Vec::as_slice), 1).unwrap();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back.tokens(), v.tokens());
        assert!(Vocabulary::from_text("a\nb\n").is_err());
    }
}
