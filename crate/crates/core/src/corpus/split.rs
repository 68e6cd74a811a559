use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::SeedTree;

/// Train/validation/test partition of some item type.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Splits<T> {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.valid.len(), self.test.len())
    }

    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> Splits<U> {
        Splits {
            train: self.train.into_iter().map(&mut f).collect(),
            valid: self.valid.into_iter().map(&mut f).collect(),
            test: self.test.into_iter().map(&mut f).collect(),
        }
    }
}

/// Seeded shuffle followed by a ratio split.
///
/// Validation and test sizes are `floor(n * ratio)`; the training split takes
/// the remainder.
pub fn split_corpus<T>(mut items: Vec<T>, ratios: (f64, f64, f64), seed: u64) -> Result<Splits<T>> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r)) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    if items.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 pairs to split, got {}",
            items.len()
        )));
    }
    let n = items.len();
    let n_valid = (n as f64 * va + 1e-9).floor() as usize;
    let n_test = (n as f64 * te + 1e-9).floor() as usize;
    items.shuffle(&mut SeedTree::new(seed).stream("corpus-split"));
    let test = items.split_off(n - n_test);
    let valid = items.split_off(n - n_test - n_valid);
    Ok(Splits {
        train: items,
        valid,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_sizes() {
        let s = split_corpus((0..18_800).collect(), (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!(s.sizes(), (15_040, 1_880, 1_880));
        let s = split_corpus((0..10).collect(), (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!(s.sizes(), (8, 1, 1));
    }

    #[test]
    fn deterministic_and_disjoint() {
        let a = split_corpus((0..100).collect::<Vec<_>>(), (0.8, 0.1, 0.1), 9).unwrap();
        let b = split_corpus((0..100).collect::<Vec<_>>(), (0.8, 0.1, 0.1), 9).unwrap();
        assert_eq!(a, b);
        let c = split_corpus((0..100).collect::<Vec<_>>(), (0.8, 0.1, 0.1), 10).unwrap();
        assert_ne!(a, c);
        let mut all: Vec<_> = a.train.iter().chain(&a.valid).chain(&a.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(split_corpus(vec![1, 2], (0.8, 0.1, 0.1), 0).is_err());
        assert!(split_corpus(vec![1, 2, 3], (0.8, 0.3, 0.1), 0).is_err());
    }
}
