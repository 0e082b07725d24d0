//! Deterministic pseudo-randomness: splitmix64 with Box-Muller normals.
//!
//! Both pieces are small enough to restate exactly, which is the point: the
//! stream is reproducible bit-for-bit from a seed on any platform, so every
//! seeded experiment in the crate replays identically.
//!
//! * `next_u64`: splitmix64 (Steele et al.'s finalizer on a Weyl sequence).
//! * `uniform`: top 53 bits of `next_u64`, scaled to `[0, 1)`.
//! * `normal`: one sample per two consecutive uniform draws,
//!   `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`; the sine partner is discarded so
//!   each sample has a fixed draw cost.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in `[0, 1)` with 53 random mantissa bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Standard-normal draw via Box-Muller; consumes exactly two uniforms.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        r * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform index in `[0, n)`. The modulo bias is far below anything the
    /// experiments can resolve and keeps the draw count at one per call.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Tensor of i.i.d. `Normal(mean, stddev^2)` draws in row-major generator
/// order. Bit-reproducible for a given `(seed, shape, mean, stddev)`.
pub fn gaussian_tensor(rng: &mut Rng, shape: &[usize], mean: f64, stddev: f64) -> Result<Tensor> {
    if shape.is_empty() {
        return Err(Error::RankZero);
    }
    if stddev < 0.0 {
        return Err(Error::InvalidArg(format!("negative stddev {stddev}")));
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| mean + stddev * rng.normal()).collect();
    Tensor::new(shape.to_vec(), data)
}
