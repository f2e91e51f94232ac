//! Counter-addressable Gaussian increments.
//!
//! Every path owns one ChaCha8 stream: the key is expanded from the master
//! seed, the stream id is the path index. Step `k` consumes exactly four
//! 32-bit words starting at word position `4k`, which a Box-Muller transform
//! turns into the pair `(dB1_k, dB2_k)`. An increment is therefore a pure
//! function of `(seed, path_index, step)` and can be regenerated in any order.
//!
//! Sub-seeds (per maturity, per bump experiment, ...) are derived with
//! [`derive_seed`], a SplitMix64 hash of `(master, domain, index)`.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS_PER_STEP: u128 = 4;
const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

/// One round of SplitMix64.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent 64-bit seed for sub-experiment `index` of kind
/// `domain` under `master`.
pub fn derive_seed(master: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(domain)).wrapping_add(index))
}

fn key_from_seed(seed: u64) -> [u8; 32] {
    let mut key = [0u8; 32];
    let mut state = seed;
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    key
}

/// Deterministic source of standard normal pairs for a single path.
#[derive(Clone, Debug)]
pub struct PathStream {
    rng: ChaCha8Rng,
}

impl PathStream {
    pub fn new(seed: u64, path_index: u64) -> Self {
        let mut rng = ChaCha8Rng::from_seed(key_from_seed(seed));
        rng.set_stream(path_index);
        PathStream { rng }
    }

    /// Repositions the stream so that the next pair is the one for `step`.
    pub fn seek(&mut self, step: usize) {
        self.rng.set_word_pos(WORDS_PER_STEP * step as u128);
    }

    /// Next pair of independent standard normals.
    pub fn next_pair(&mut self) -> (f64, f64) {
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        // u1 in (0, 1], u2 in [0, 1)
        let u1 = ((a >> 11) + 1) as f64 * TWO_POW_M53;
        let u2 = (b >> 11) as f64 * TWO_POW_M53;
        let radius = (-2.0 * u1.ln()).sqrt();
        let (sin, cos) = (std::f64::consts::TAU * u2).sin_cos();
        (radius * cos, radius * sin)
    }

    /// The pair for `step`, independent of the current position.
    pub fn pair_at(&mut self, step: usize) -> (f64, f64) {
        self.seek(step);
        self.next_pair()
    }
}

/// Brownian increments `(dB1, dB2)` over `n` cells of width `dt`.
pub fn brownian_increments(seed: u64, path_index: u64, n: usize, dt: f64) -> (Vec<f64>, Vec<f64>) {
    let mut stream = PathStream::new(seed, path_index);
    let scale = dt.sqrt();
    let mut db1 = Vec::with_capacity(n);
    let mut db2 = Vec::with_capacity(n);
    for _ in 0..n {
        let (z1, z2) = stream.next_pair();
        db1.push(scale * z1);
        db2.push(scale * z2);
    }
    (db1, db2)
}
