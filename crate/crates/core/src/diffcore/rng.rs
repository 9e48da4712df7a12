//! Deterministic random number generation.
//!
//! All randomness in the crate flows through [`SeededRng`], a splitmix64
//! generator with Box-Muller normals layered on top. The exact stream is
//! part of the crate's reproducibility contract: a run is fully determined
//! by its seed, and an implementation in another language that follows the
//! same two algorithms reproduces runs byte for byte.

/// Splitmix64 generator with derived uniform and normal streams.
///
/// * `next_u64` is the splitmix64 sequence of the seed.
/// * `next_f64` maps each output to `[0, 1)` via the top 53 bits.
/// * `next_normal` consumes two uniforms per draw (Box-Muller, cosine
///   branch only, no caching).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { state: seed }
    }

    /// Next raw splitmix64 output.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in `[0, 1)` using the top 53 bits of `next_u64`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw.
    ///
    /// Box-Muller on two consecutive uniforms: the first is reflected to
    /// `(0, 1]` so the logarithm is finite, the second sets the angle.
    /// Only the cosine branch is used, so every draw consumes exactly two
    /// uniforms.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform index in `[0, n)`. `n` must be nonzero.
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0, "next_index requires n > 0");
        let i = (self.next_f64() * n as f64) as usize;
        i.min(n - 1)
    }

    /// Derive an independent generator, consuming one output of this one.
    ///
    /// Workers that need their own stream (one per sweep entry, one per
    /// parallel shard) should each take a split rather than sharing state.
    pub fn split(&mut self) -> SeededRng {
        SeededRng::new(self.next_u64())
    }
}
