use super::ring::Ring;
use crate::error::{Error, Result};

/// Two's-complement fixed point with `scale_bits` fractional bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedPoint {
    pub ring: Ring,
    pub scale_bits: u32,
}

impl FixedPoint {
    pub fn new(ring: Ring, scale_bits: u32) -> Result<Self> {
        if scale_bits == 0 || scale_bits + 2 > ring.bits() {
            return Err(Error::invalid(format!(
                "scale of {scale_bits} bits does not fit a {}-bit ring",
                ring.bits()
            )));
        }
        Ok(FixedPoint { ring, scale_bits })
    }

    /// Largest representable magnitude (exclusive): `2^(l - s - 1)`.
    pub fn limit(&self) -> f64 {
        2f64.powi((self.ring.bits() - self.scale_bits - 1) as i32)
    }

    pub fn one(&self) -> u64 {
        1u64 << self.scale_bits
    }

    pub fn encode(&self, x: f64) -> Result<u64> {
        let limit = self.limit();
        if !x.is_finite() || x.abs() >= limit {
            return Err(Error::Range { value: x, limit });
        }
        let v = (x * 2f64.powi(self.scale_bits as i32)).round() as i64;
        Ok(self.ring.from_signed(v))
    }

    pub fn decode(&self, x: u64) -> f64 {
        self.decode_signed(self.ring.to_signed(x))
    }

    pub fn decode_signed(&self, v: i64) -> f64 {
        v as f64 / 2f64.powi(self.scale_bits as i32)
    }

    pub fn encode_all(&self, xs: &[f64]) -> Result<Vec<u64>> {
        xs.iter().map(|&x| self.encode(x)).collect()
    }
}
