/// Deterministic pseudo-random stream (splitmix64).
///
/// Every stochastic choice in the crate (parameter init, dropout masks,
/// task sampling) draws from one of these, so a run is fully determined by
/// its seed. Hand-rolled rather than pulled from a crate: the byte-for-byte
/// reproducibility contract must survive dependency upgrades.
#[derive(Debug, Clone)]
pub struct RngStream {
    state: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { state: seed }
    }

    /// Child stream whose draws are independent of the parent's position.
    /// Used to give data sampling, init, dropout, and evaluation their own
    /// streams off one master seed.
    pub fn derive(&self, tag: u64) -> RngStream {
        let mut mix = RngStream {
            state: self.state ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15),
        };
        // burn one draw so derive(0) differs from a clone
        mix.next_u64();
        RngStream {
            state: mix.next_u64(),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, bound).
    pub fn below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        // modulo bias is irrelevant at the bounds this crate uses (< 2^32)
        self.next_u64() % bound
    }

    pub fn range_usize(&mut self, lo: usize, hi_inclusive: usize) -> usize {
        lo + self.below((hi_inclusive - lo + 1) as u64) as usize
    }

    /// Keep-mask for inverted dropout: true with probability 1 - rate.
    pub fn keep_mask(&mut self, len: usize, rate: f64) -> Vec<bool> {
        (0..len).map(|_| self.next_f64() >= rate).collect()
    }
}
