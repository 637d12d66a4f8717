use rand::Rng;

use super::ring::Ring;
use crate::error::{Error, Result};

/// Additive shares of one secret held by P0 and P1. The helper P2 holds no
/// share of data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShareTriple {
    pub share0: u64,
    pub share1: u64,
}

pub fn share(x: u64, ring: &Ring, rng: &mut impl Rng) -> ShareTriple {
    let share0 = ring.random(rng);
    ShareTriple {
        share0,
        share1: ring.sub(x, share0),
    }
}

pub fn reconstruct(t: ShareTriple, ring: &Ring) -> u64 {
    ring.add(t.share0, t.share1)
}

/// Elementwise shares of a flat tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedTensor {
    pub s0: Vec<u64>,
    pub s1: Vec<u64>,
}

impl SharedTensor {
    pub fn share(secrets: &[u64], ring: &Ring, rng: &mut impl Rng) -> Self {
        let s0 = ring.random_vec(rng, secrets.len());
        let s1 = ring.sub_vec(secrets, &s0);
        SharedTensor { s0, s1 }
    }

    pub fn len(&self) -> usize {
        self.s0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s0.is_empty()
    }

    pub fn reconstruct(&self, ring: &Ring) -> Vec<u64> {
        ring.add_vec(&self.s0, &self.s1)
    }

    pub fn get(&self, i: usize) -> ShareTriple {
        ShareTriple {
            share0: self.s0[i],
            share1: self.s1[i],
        }
    }

    pub fn check_len(&self, n: usize, what: &str) -> Result<()> {
        if self.len() != n || self.s1.len() != n {
            return Err(Error::shape(format!("{what}: expected {n} shared elements, got {}", self.len())));
        }
        Ok(())
    }

    /// Applies the same local linear map to both shares.
    pub fn map_local(&self, f: impl Fn(&[u64]) -> Vec<u64>) -> Self {
        SharedTensor {
            s0: f(&self.s0),
            s1: f(&self.s1),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn zero_shares_sum_to_zero() {
        let ring = Ring::new(64).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let t = share(0, &ring, &mut rng);
        assert_eq!(ring.add(t.share0, t.share1), 0);
    }

    #[test]
    fn round_trip_many() {
        for bits in [16, 64] {
            let ring = Ring::new(bits).unwrap();
            let mut rng = ChaCha20Rng::seed_from_u64(2);
            for _ in 0..10_000 {
                let x = ring.random(&mut rng);
                assert_eq!(reconstruct(share(x, &ring, &mut rng), &ring), x);
            }
        }
    }

    #[test]
    fn seeded_shares_repeat() {
        let ring = Ring::new(64).unwrap();
        let a = share(42, &ring, &mut ChaCha20Rng::seed_from_u64(9));
        let b = share(42, &ring, &mut ChaCha20Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let t = SharedTensor::share(&[1, 2, 3], &ring, &mut ChaCha20Rng::seed_from_u64(9));
        assert_eq!(t.reconstruct(&ring), vec![1, 2, 3]);
    }
}
