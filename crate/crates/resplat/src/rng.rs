//! Deterministic pseudo-random generation.
//!
//! SplitMix64: single u64 of state advanced by a fixed odd constant, output
//! run through a bit-mixing finalizer. Chosen over a library RNG because
//! synthetic scenes must be bit-identical for a given seed on every platform
//! and toolchain, and the whole algorithm is smaller than any dependency that
//! would provide it. Draw order is part of every generator's contract: the
//! same seed always produces the same byte-for-byte artifact.

/// SplitMix64 generator. `new(seed)` followed by a fixed sequence of draws is
/// reproducible bit-for-bit everywhere.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1). Uses the top 24 bits so the value is exactly
    /// representable and the mapping is platform-independent.
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / 16_777_216.0)
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in [lo, hi).
    pub fn range_f32(&mut self, lo: f32, hi: f32) -> f32 {
        lo + self.next_f32() * (hi - lo)
    }

    /// Uniform in [-1, 1).
    pub fn symmetric_f32(&mut self) -> f32 {
        self.next_f32() * 2.0 - 1.0
    }
}
