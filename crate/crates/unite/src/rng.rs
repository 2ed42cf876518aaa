//! Deterministic random streams.
//!
//! A single 64-bit seed fans out into independent per-purpose streams
//! (ChaCha8 with a distinct stream id per purpose), so every noise draw in a
//! run is reproducible and each stream can be checkpointed as a word
//! position and restored bit-exactly.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Fixed stream ids, one per noise purpose. Checkpoints identify streams by
/// these ids, so the values are part of the on-disk contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Init = 1,
    Data = 2,
    RegisterNoise = 3,
    FlowNoise = 4,
    ReconNoise = 5,
    LabelDrop = 6,
    Sample = 7,
    Analysis = 8,
}

/// One deterministic stream of draws.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, purpose: Purpose) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(purpose as u64);
        RngStream { rng }
    }

    /// Ad-hoc stream not tied to a run-level purpose (tests, one-off draws).
    pub fn from_seed(seed: u64) -> Self {
        RngStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f32 {
        // 53 random mantissa bits, computed in f64 so the cast is exact.
        let v = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        v as f32
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller. No spare value is cached so the
    /// stream state is fully captured by the ChaCha word position.
    pub fn normal(&mut self) -> f32 {
        let u1 = ((self.rng.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        z as f32
    }

    pub fn fill_normal(&mut self, out: &mut [f32]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f32> {
        let mut v = vec![0.0; n];
        self.fill_normal(&mut v);
        v
    }

    /// Bernoulli draw.
    pub fn below(&mut self, p: f32) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.rng.next_u64() % n as u64) as usize
    }

    /// Stream position for exact checkpoint/resume.
    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_word_pos(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }
}
