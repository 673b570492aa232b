//! Deterministic seeded weights and weight-file decoding.
//!
//! The generator is a 64-bit LCG, `s' = s * 6364136223846793005 +
//! 1442695040888963407 (mod 2^64)`, so any implementation can reproduce
//! the same weights. Per value:
//!
//! - float: `u = (s' >> 40) / 2^24`, `w = (2u - 1) * sqrt(3 / fan_in)`
//!   (unit-variance activations for unit-variance inputs);
//! - `uint8`: the top byte `s' >> 56`, zero point 128 and scale
//!   `sqrt(3 / fan_in) / 128`.
//!
//! Values are drawn layer by layer in weight-file order from one stream.

use crate::error::{Error, Result};
use crate::layout::decode_f32_le;

pub const LCG_MUL: u64 = 6364136223846793005;
pub const LCG_ADD: u64 = 1442695040888963407;

#[derive(Debug, Clone)]
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Lcg(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(LCG_MUL).wrapping_add(LCG_ADD);
        self.0
    }

    /// Uniform in `[0, 1)` with 24 bits.
    pub fn unit(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / (1u32 << 24) as f32
    }

    pub fn byte(&mut self) -> u8 {
        (self.next_u64() >> 56) as u8
    }

    pub fn float_weights(&mut self, n: usize, fan_in: usize) -> Vec<f32> {
        let bound = (3.0 / fan_in as f32).sqrt();
        (0..n).map(|_| (2.0 * self.unit() - 1.0) * bound).collect()
    }

    pub fn byte_weights(&mut self, n: usize) -> Vec<u8> {
        (0..n).map(|_| self.byte()).collect()
    }
}

/// Splits a flat little-endian `f32` payload into per-tensor chunks.
pub fn split_f32(bytes: &[u8], lengths: &[usize]) -> Result<Vec<Vec<f32>>> {
    let values = decode_f32_le(bytes)?;
    let expected: usize = lengths.iter().sum();
    if values.len() != expected {
        return Err(Error::WeightLength { expected, actual: values.len() });
    }
    let mut rest = &values[..];
    Ok(lengths
        .iter()
        .map(|&n| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        })
        .collect())
}
