//! Seedable, splittable random streams.
//!
//! Every consumer asks for a stream by name. The stream seed is a hash of the
//! master seed and the name, so adding a new layer (a new name) never shifts
//! the values drawn by existing layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    master: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Derives the seed for the named stream.
    pub fn seed_for(&self, name: &str) -> u64 {
        let mut h = splitmix64(self.master ^ 0x6a09_e667_f3bc_c908);
        for b in name.as_bytes() {
            h = splitmix64(h ^ u64::from(*b));
        }
        h
    }

    pub fn stream(&self, name: &str) -> StreamRng {
        StreamRng::seed_from_u64(self.seed_for(name))
    }

    /// A child tree whose streams are disjoint from the parent's.
    pub fn child(&self, name: &str) -> SeedTree {
        SeedTree::new(self.seed_for(name))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_independent_of_other_names() {
        let tree = SeedTree::new(7);
        let a: Vec<u32> = tree.stream("encoder.0").random_iter().take(4).collect();
        let again: Vec<u32> = SeedTree::new(7)
            .stream("encoder.0")
            .random_iter()
            .take(4)
            .collect();
        assert_eq!(a, again);
        let b: Vec<u32> = tree.stream("encoder.1").random_iter().take(4).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn master_seed_changes_streams() {
        assert_ne!(
            SeedTree::new(1).seed_for("x"),
            SeedTree::new(2).seed_for("x")
        );
        assert_ne!(
            SeedTree::new(1).child("a").seed_for("x"),
            SeedTree::new(1).seed_for("x")
        );
    }
}
