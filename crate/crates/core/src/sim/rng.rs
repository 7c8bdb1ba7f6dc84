//! Counter-based random numbers.
//!
//! Every draw is a pure function of `(key, gate, tag)`, so any gate can be
//! simulated in isolation and a partitioned run reproduces a sequential one
//! bit for bit. Not cryptographic.

/// Finalizer from SplitMix64.
#[inline(always)]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Keyed hash over `(gate, tag)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: mix64(seed ^ 0x6A09_E667_F3BC_C908),
        }
    }

    #[inline(always)]
    pub fn draw(&self, gate: u64, tag: u64) -> u64 {
        let g = mix64(gate.wrapping_add(self.key));
        mix64(g ^ tag.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03))
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    #[inline(always)]
    pub fn uniform(&self, gate: u64, tag: u64) -> f64 {
        to_unit(self.draw(gate, tag))
    }
}

#[inline(always)]
pub fn to_unit(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal deviate from one 64-bit draw (Box-Muller on two 32-bit
/// halves).
#[inline]
pub fn normal_from_bits(bits: u64) -> f64 {
    let u1 = ((bits >> 32) as f64 + 0.5) / 4_294_967_296.0;
    let u2 = ((bits & 0xFFFF_FFFF) as f64) / 4_294_967_296.0;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
