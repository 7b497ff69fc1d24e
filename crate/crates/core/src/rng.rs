//! Named, versioned deterministic randomness.
//!
//! Every random choice in a run goes through [`SeededRng`], whose algorithm
//! is pinned here rather than delegated to a sampling helper whose output may
//! drift between library releases. The name recorded in artifacts is
//! [`RNG_NAME`].

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Identifier written into provenance wherever a seed was consumed.
pub const RNG_NAME: &str = "chacha8-v1";

pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `0..bound` by rejection sampling. `bound` must be > 0.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "below() needs a positive bound");
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// `k` distinct indices from `0..n`, uniformly, in selection order.
    pub fn choose_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    /// `k` distinct indices from `0..n`, sorted ascending.
    pub fn choose_sorted(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx = self.choose_indices(n, k);
        idx.sort_unstable();
        idx
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Derives a labeled sub-seed, e.g. `sub_seed(run_seed, "synthesis/job", 7)`.
pub fn sub_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
}

/// Round-half-up of `fraction * n`.
///
/// A tiny tolerance absorbs binary representation error, so that e.g.
/// `2.54 * 5100` counts as exactly 12954.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}
