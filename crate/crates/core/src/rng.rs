//! Named, reproducible random streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives independent RNG streams from a root seed.
///
/// A stream is identified by a purpose string plus a list of indices, so
/// e.g. the attack stream for episode 17 of epoch 3 never depends on how many
/// numbers other modules consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    root: u64,
}

impl Streams {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn seed(&self, purpose: &str, indices: &[u64]) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.root.to_le_bytes());
        h.update((purpose.len() as u64).to_le_bytes());
        h.update(purpose.as_bytes());
        for i in indices {
            h.update(i.to_le_bytes());
        }
        let digest = h.finalize();
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }

    pub fn stream(&self, purpose: &str, indices: &[u64]) -> Rng {
        ChaCha8Rng::from_seed(self.seed(purpose, indices))
    }

    /// A child root, for handing a whole subsystem its own namespace.
    pub fn child(&self, purpose: &str, indices: &[u64]) -> Streams {
        let s = self.seed(purpose, indices);
        Streams::new(u64::from_le_bytes(s[..8].try_into().unwrap()))
    }
}
