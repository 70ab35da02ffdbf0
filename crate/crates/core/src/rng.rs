//! Seeded randomness.
//!
//! Everything descends from one root seed. Sequential consumers (data
//! sampling, initialization, diffusion noise) get a named ChaCha8 sub-stream;
//! Gumbel noise is counter-based so any single draw can be recomputed from its
//! key without replaying a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named sub-streams of the root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data,
    Gumbel,
    Init,
    Noise,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Data => 0x6461_7461,
            Stream::Gumbel => 0x6775_6d62,
            Stream::Init => 0x696e_6974,
            Stream::Noise => 0x6e6f_6973,
        }
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Order-sensitive hash of a key tuple.
pub fn hash_key(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Sequential generator for `stream` under `root`, optionally specialised by
/// extra key parts (e.g. a step or shape index).
pub fn stream_rng(root: u64, stream: Stream, key: &[u64]) -> ChaCha8Rng {
    let mut parts = vec![root, stream.tag()];
    parts.extend_from_slice(key);
    ChaCha8Rng::seed_from_u64(hash_key(&parts))
}

/// Uniform draw in `[0, 1)` with 53 bits of resolution.
pub fn unit_from_bits(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Key of one routing call: which run, optimizer step, sample within the
/// batch and transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GumbelKey {
    pub seed: u64,
    pub step: u64,
    pub sample: u64,
    pub block: u64,
}

impl GumbelKey {
    pub fn new(seed: u64, step: u64, sample: u64, block: u64) -> Self {
        Self {
            seed,
            step,
            sample,
            block,
        }
    }

    /// Uniform in the open interval (0, 1) for `(token, view)`. Draws landing
    /// on 0 are resampled by bumping an attempt counter.
    pub fn uniform(&self, token: usize, view: usize) -> f64 {
        let mut attempt = 0u64;
        loop {
            let bits = hash_key(&[
                self.seed,
                Stream::Gumbel.tag(),
                self.step,
                self.sample,
                self.block,
                token as u64,
                view as u64,
                attempt,
            ]);
            let u = unit_from_bits(bits);
            if u > 0.0 && u < 1.0 {
                return u;
            }
            attempt += 1;
        }
    }

    /// Standard Gumbel sample `-ln(-ln u)`.
    pub fn gumbel(&self, token: usize, view: usize) -> f64 {
        -(-self.uniform(token, view).ln()).ln()
    }
}
