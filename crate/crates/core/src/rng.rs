//! Seed derivation. Every random draw in the pipeline comes from a ChaCha
//! stream whose seed is derived from a root seed plus a path of labels
//! (stage, checkpoint, class, view), so draws do not depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn hash_label(label: &str) -> u64 {
    // FNV-1a, stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// A node in the seed tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seed(pub u64);

impl Seed {
    pub fn new(root: u64) -> Self {
        Seed(splitmix64(root))
    }

    pub fn child(self, label: &str) -> Self {
        Seed(splitmix64(self.0 ^ hash_label(label)))
    }

    pub fn index(self, i: u64) -> Self {
        Seed(splitmix64(self.0.wrapping_add(splitmix64(i.wrapping_add(1)))))
    }

    pub fn rng(self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
