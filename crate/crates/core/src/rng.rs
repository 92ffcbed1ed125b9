//! Counter-based keyed random streams.
//!
//! Every draw is addressed by `(purpose, a, b)` under a 64-bit master seed, so
//! the value a run receives does not depend on evaluation order or on how work
//! is split across threads. The purpose string and master seed are hashed into
//! a ChaCha8 key; `a` selects the ChaCha stream and `b` a 2^20-word window of
//! the keystream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const WINDOW_BITS: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandomStream {
    pub master_seed: u64,
}

impl RandomStream {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    /// Bind a purpose label, hashing it once.
    pub fn purpose(&self, purpose: &str) -> KeyedStream {
        let mut h = Sha256::new();
        h.update(self.master_seed.to_le_bytes());
        h.update((purpose.len() as u64).to_le_bytes());
        h.update(purpose.as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest[..32]);
        KeyedStream { key }
    }

    /// Derive an independent master seed, e.g. one per bootstrap resample.
    pub fn derive(&self, purpose: &str, index: u64) -> RandomStream {
        let mut rng = self.purpose(purpose).rng(index, 0);
        RandomStream::new(rng.random())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KeyedStream {
    key: [u8; 32],
}

impl KeyedStream {
    /// Generator positioned at the start of window `(a, b)`.
    pub fn rng(&self, a: u64, b: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(a);
        rng.set_word_pos((b as u128) << WINDOW_BITS);
        rng
    }

    /// A single uniform draw in `[0, 1)` for key `(a, b)`.
    pub fn uniform(&self, a: u64, b: u64) -> f64 {
        let mut rng = self.rng(a, b);
        unit_f64(rng.random::<u64>())
    }
}

/// Top 53 bits of a word as a double in `[0, 1)`.
pub fn unit_f64(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
