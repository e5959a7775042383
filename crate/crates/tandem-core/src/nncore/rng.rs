//! Counter-based deterministic random number generator.
//!
//! Every draw is a pure function of `(seed, stream, counter)`, so independent
//! streams can be advanced in any order (or in parallel) and still reproduce
//! the same values. This is what makes num-samples decoding order-independent.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Splittable counter RNG. Cheap to copy; `split` derives a decorrelated child.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let key = mix(seed.wrapping_mul(GOLDEN) ^ mix(stream.wrapping_add(GOLDEN)));
        CounterRng { key, counter: 0 }
    }

    /// Derive an independent stream without disturbing this one.
    pub fn split(&self, substream: u64) -> Self {
        CounterRng::new(self.key, substream.wrapping_add(0x5bd1_e995))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter += 1;
        mix(self.key ^ c.wrapping_mul(GOLDEN))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_f64() * n as f64) as usize % n
    }

    /// Standard normal via Box-Muller.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}
