use rand::Rng;

use crate::error::{Error, Result};

/// Arithmetic modulo `2^l` on `u64` words, `8 <= l <= 64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ring {
    bits: u32,
    mask: u64,
}

impl Ring {
    pub fn new(bits: u32) -> Result<Self> {
        if !(8..=64).contains(&bits) || !bits.is_multiple_of(8) {
            return Err(Error::invalid(format!("ring width must be a multiple of 8 in [8, 64], got {bits}")));
        }
        let mask = if bits == 64 { u64::MAX } else { (1u64 << bits) - 1 };
        Ok(Ring { bits, mask })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn mask(&self) -> u64 {
        self.mask
    }

    pub fn element_bytes(&self) -> u64 {
        u64::from(self.bits / 8)
    }

    pub fn reduce(&self, x: u64) -> u64 {
        x & self.mask
    }

    pub fn add(&self, a: u64, b: u64) -> u64 {
        a.wrapping_add(b) & self.mask
    }

    pub fn sub(&self, a: u64, b: u64) -> u64 {
        a.wrapping_sub(b) & self.mask
    }

    pub fn mul(&self, a: u64, b: u64) -> u64 {
        a.wrapping_mul(b) & self.mask
    }

    pub fn neg(&self, a: u64) -> u64 {
        0u64.wrapping_sub(a) & self.mask
    }

    /// Two's-complement reading of an element.
    pub fn to_signed(&self, x: u64) -> i64 {
        let shift = 64 - self.bits;
        ((x << shift) as i64) >> shift
    }

    pub fn from_signed(&self, v: i64) -> u64 {
        (v as u64) & self.mask
    }

    /// Whether `v` lies in the signed range `[-2^(l-1), 2^(l-1))`.
    pub fn fits(&self, v: i128) -> bool {
        let half = 1i128 << (self.bits - 1);
        (-half..half).contains(&v)
    }

    /// Arithmetic right shift of the signed value.
    pub fn shr_signed(&self, x: u64, s: u32) -> u64 {
        self.from_signed(self.to_signed(x) >> s)
    }

    pub fn random(&self, rng: &mut impl Rng) -> u64 {
        rng.random::<u64>() & self.mask
    }

    pub fn random_vec(&self, rng: &mut impl Rng, n: usize) -> Vec<u64> {
        (0..n).map(|_| self.random(rng)).collect()
    }

    pub fn add_vec(&self, a: &[u64], b: &[u64]) -> Vec<u64> {
        a.iter().zip(b).map(|(&x, &y)| self.add(x, y)).collect()
    }

    pub fn sub_vec(&self, a: &[u64], b: &[u64]) -> Vec<u64> {
        a.iter().zip(b).map(|(&x, &y)| self.sub(x, y)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wraps_and_signs() {
        let r = Ring::new(64).unwrap();
        assert_eq!(r.add(u64::MAX, 2), 1);
        assert_eq!(r.to_signed(u64::MAX), -1);
        assert_eq!(r.shr_signed(r.from_signed(-16), 2), r.from_signed(-4));
        assert_eq!(r.shr_signed(r.from_signed(-5), 1), r.from_signed(-3));
        let r8 = Ring::new(8).unwrap();
        assert_eq!(r8.mul(16, 16), 0);
        assert_eq!(r8.to_signed(0x80), -128);
        assert_eq!(r8.to_signed(0x7f), 127);
        assert!(r8.fits(127) && !r8.fits(128) && r8.fits(-128) && !r8.fits(-129));
        assert!(Ring::new(12).is_err());
    }
}
