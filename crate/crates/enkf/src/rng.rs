//! Keyed, reproducible randomness.
//!
//! Every random draw in the crate is made from a [`SeededStream`] keyed by
//! `(phase tag, step index, member index)`. Identical keys yield identical
//! draws; distinct keys yield independent streams. Because each member owns
//! its key, per-member work can be scheduled on any number of threads without
//! changing a single bit of output.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// Master seed from which all per-(phase, step, member) generators derive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeededStream {
    seed: u64,
}

const SPLITMIX_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(SPLITMIX_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl SeededStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generator for the stream keyed by `(phase, step, member)`.
    pub fn rng(&self, phase: &str, step: u64, member: u64) -> ChaCha12Rng {
        let mut state = self.seed ^ fnv1a(phase.as_bytes());
        let _ = splitmix64(&mut state);
        state ^= step.wrapping_mul(0xa076_1d64_78bd_642f);
        let _ = splitmix64(&mut state);
        state ^= member.wrapping_mul(0xe703_7ed1_a0b4_28db);
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        ChaCha12Rng::from_seed(key)
    }

    /// Derived stream whose keys never collide with the parent's `phase`.
    pub fn substream(&self, tag: &str) -> SeededStream {
        let mut state = self.seed ^ fnv1a(tag.as_bytes());
        SeededStream { seed: splitmix64(&mut state) }
    }
}

/// `n` independent standard normal draws.
pub fn normal_vector(rng: &mut ChaCha12Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, StandardNormal.sample_iter(rng).take(n))
}

/// `rows x cols` matrix of independent standard normal draws, filled column
/// major so that a prefix of columns is independent of the total count.
pub fn normal_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_iterator(rows, cols, StandardNormal.sample_iter(rng).take(rows * cols))
}
