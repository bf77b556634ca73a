//! xorshift64* — the fixed generator used for buffer fill, derived
//! per-position constants and per-thread register initialization, so that
//! independently written implementations produce identical streams.

/// Multiplier of the xorshift64* output stage.
pub const XS64_MULT: u64 = 2685821657736338717;

/// One xorshift64* step with the (12, 25, 27) triple.
pub fn xorshift_mix(mut x: u64) -> u64 {
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    x.wrapping_mul(XS64_MULT)
}

/// Deterministically combines a seed with a stream index, avoiding the
/// all-zero fixed point.
pub fn seed_mix(seed: u64, stream: u64) -> u64 {
    let x = seed ^ stream.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    xorshift_mix(if x == 0 { 0x9E3779B97F4A7C15 } else { x })
}

#[derive(Debug, Clone)]
pub struct XorShift64Star {
    state: u64,
}

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        XorShift64Star {
            state: if seed == 0 { 0x9E3779B97F4A7C15 } else { seed },
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state ^= self.state >> 12;
        self.state ^= self.state << 25;
        self.state ^= self.state >> 27;
        self.state.wrapping_mul(XS64_MULT)
    }

    /// Fills `out` with the little-endian byte stream of successive draws.
    pub fn fill_bytes(&mut self, out: &mut [u8]) {
        for chunk in out.chunks_mut(8) {
            let v = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_is_deterministic_and_nonzero() {
        let mut a = XorShift64Star::new(7);
        let mut b = XorShift64Star::new(7);
        for _ in 0..100 {
            let v = a.next_u64();
            assert_eq!(v, b.next_u64());
            assert_ne!(v, 0);
        }
    }

    #[test]
    fn zero_seed_does_not_stick() {
        let mut r = XorShift64Star::new(0);
        assert_ne!(r.next_u64(), 0);
    }
}
