//! Seeded SplitMix64 generator.
//!
//! Every random draw in the library goes through this generator so that a
//! seed fully determines fixtures, sampled group elements and probes. The
//! algorithm is fixed and small enough to port:
//!
//! ```text
//! state = state + 0x9E3779B97F4A7C15            (wrapping)
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9      (wrapping)
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB      (wrapping)
//! return z ^ (z >> 31)
//! ```
//!
//! Derived draws:
//! - `next_f64`: `(next_u64() >> 11) * 2^-53`, uniform on `[0, 1)`.
//! - `uniform(lo, hi)`: `lo + (hi - lo) * next_f64()`.
//! - `below(n)`: `(next_u64() as u128 * n as u128) >> 64`.
//! - `sign()`: `-1.0` if the top bit of `next_u64()` is set, else `+1.0`.
//! - `permutation(n)`: Fisher-Yates from the back, swapping `i` with `below(i + 1)`.

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Generator for trial `index` of a run seeded with `seed`.
    pub fn for_trial(seed: u64, index: usize) -> Self {
        Self::new(seed.wrapping_add(index as u64))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn sign(&mut self) -> f64 {
        if self.next_u64() >> 63 == 1 {
            -1.0
        } else {
            1.0
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }

    pub fn uniform_vec(&mut self, len: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..len).map(|_| self.uniform(lo, hi)).collect()
    }
}
