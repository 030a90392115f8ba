//! Portable deterministic random numbers.
//!
//! The generator is xorshift64* (Vigna, 2016). With 64-bit state `x`:
//!
//! ```text
//! x ^= x >> 12
//! x ^= x << 25
//! x ^= x >> 27
//! out = x * 0x2545F4914F6CDD1D   (wrapping)
//! ```
//!
//! The state is seeded by one round of SplitMix64 applied to the user seed,
//! replacing a zero result with `0x9E3779B97F4A7C15`:
//!
//! ```text
//! z = seed + 0x9E3779B97F4A7C15
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! z = z ^ (z >> 31)
//! ```
//!
//! A uniform draw in `[0, 1)` is `(out >> 11) * 2^-53`. Every operation is
//! wrapping integer arithmetic, so the stream is identical on all platforms.

use super::Matrix;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        if z == 0 {
            z = 0x9E37_79B9_7F4A_7C15;
        }
        Rng { state: z }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[-scale, scale]`.
    pub fn uniform(&mut self, scale: f64) -> f64 {
        (2.0 * self.next_f64() - 1.0) * scale
    }

    /// Uniform integer in `0..n` (multiply-shift; `n` must be positive).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, scale: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| self.uniform(scale)).collect();
        Matrix::from_vec(rows, cols, data).expect("length matches by construction")
    }

    /// Fisher-Yates shuffle, drawing from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// i.i.d. uniform entries in `[-scale, scale]`.
pub fn init_uniform(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix {
    assert!(scale >= 0.0, "init scale must be non-negative");
    rng.uniform_matrix(rows, cols, scale)
}
