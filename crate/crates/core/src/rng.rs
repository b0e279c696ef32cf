//! Deterministic random streams.
//!
//! Every stream is a ChaCha8 keystream whose key is derived from
//! `(seed, label)` and whose 64-bit stream id is the index. Two streams with
//! the same triple produce identical sequences; work split by index (one
//! stream per sample, per iteration) is reproducible regardless of how it is
//! scheduled across threads.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct RngStream {
    key: [u8; 32],
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, label: &str, index: u64) -> Self {
        Self::from_key(derive_key(mix64(seed ^ 0x5851_F42D_4C95_7F2D), label), index)
    }

    fn from_key(key: [u8; 32], index: u64) -> Self {
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(index);
        Self { key, inner }
    }

    /// A child stream keyed by this stream's key and `label`. Does not advance
    /// the parent.
    pub fn child(&self, label: &str, index: u64) -> Self {
        let parent = u64::from_le_bytes(self.key[..8].try_into().unwrap())
            ^ u64::from_le_bytes(self.key[24..].try_into().unwrap());
        Self::from_key(derive_key(parent, label), index)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Lemire's multiply-shift with rejection keeps the draw unbiased.
        let zone = n.wrapping_neg() % n;
        loop {
            let r = self.inner.next_u64();
            let m = (r as u128) * (n as u128);
            if (m as u64) >= zone {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn index_below(&mut self, n: usize) -> usize {
        self.below(n as u64) as usize
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn derive_key(base: u64, label: &str) -> [u8; 32] {
    let mut state = base ^ fnv1a64(label.as_bytes());
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        chunk.copy_from_slice(&mix64(state).to_le_bytes());
    }
    key
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
