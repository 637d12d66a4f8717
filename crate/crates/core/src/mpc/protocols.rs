//! Three-party protocols over additive shares.
//!
//! P0 and P1 hold shares; P2 deals Beaver triples from pairwise common
//! randomness and assists sign extraction and truncation.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use super::fixed::FixedPoint;
use super::ledger::{MessageLog, Network, Party};
use super::ring::Ring;
use super::shares::{ShareTriple, SharedTensor};
use crate::cost::OpTag;
use crate::error::{Error, Result};

/// Per-round element counts of one DReLU are `log p + DRELU_EXTRA[r]`.
pub const DRELU_EXTRA: [u64; 8] = [3, 2, 2, 2, 3, 2, 2, 3];

/// Protocol state of one simulated evaluation.
pub struct Session {
    pub fp: FixedPoint,
    pub log_p: u32,
    pub net: Network,
    /// Randomness common to P0 and P2.
    rng02: ChaCha20Rng,
    /// Randomness common to P1 and P2.
    rng12: ChaCha20Rng,
    /// Private randomness of each party.
    own: [ChaCha20Rng; 3],
}

fn derive(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `a (m x k) . b (k x n)` modulo `2^l`, rows in parallel.
pub fn ring_matmul(ring: &Ring, a: &[u64], b: &[u64], m: usize, k: usize, n: usize) -> Vec<u64> {
    let mut out = vec![0u64; m * n];
    out.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = o.wrapping_add(av.wrapping_mul(bv));
            }
        }
        for o in row.iter_mut() {
            *o = ring.reduce(*o);
        }
    });
    out
}

impl Session {
    pub fn new(fp: FixedPoint, log_p: u32, seed: u64) -> Self {
        Session {
            fp,
            log_p,
            net: Network::new(fp.ring.element_bytes()),
            rng02: derive(seed, 2),
            rng12: derive(seed, 12),
            own: [derive(seed, 100), derive(seed, 101), derive(seed, 102)],
        }
    }

    pub fn ring(&self) -> Ring {
        self.fp.ring
    }

    pub fn into_log(self) -> MessageLog {
        self.net.into_log()
    }

    /// Secret-shares values owned by `owner` (input setup, not logged).
    pub fn share(&mut self, owner: Party, secrets: &[u64]) -> SharedTensor {
        let ring = self.ring();
        SharedTensor::share(secrets, &ring, &mut self.own[owner as usize])
    }

    /// Opens shares inside the simulator for assertions and outputs.
    pub fn reveal(&self, t: &SharedTensor) -> Vec<u64> {
        t.reconstruct(&self.ring())
    }

    /// Beaver product of shared `x (m x k)` and `y (k x n)`: P2 sends P1 its
    /// share correction of `C = AB` (`mn` elements), then P0 and P1 swap the
    /// masked operands `E = X - A`, `F = Y - B` (`mk + kn` each way).
    pub fn matmul(&mut self, x: &SharedTensor, y: &SharedTensor, m: usize, k: usize, n: usize, tag: OpTag) -> Result<SharedTensor> {
        x.check_len(m * k, "left operand")?;
        y.check_len(k * n, "right operand")?;
        let ring = self.ring();
        let a0 = ring.random_vec(&mut self.rng02, m * k);
        let b0 = ring.random_vec(&mut self.rng02, k * n);
        let c0 = ring.random_vec(&mut self.rng02, m * n);
        let a1 = ring.random_vec(&mut self.rng12, m * k);
        let b1 = ring.random_vec(&mut self.rng12, k * n);
        let c = ring_matmul(&ring, &ring.add_vec(&a0, &a1), &ring.add_vec(&b0, &b1), m, k, n);
        self.net.send(Party::P2, Party::P1, tag, ring.sub_vec(&c, &c0));
        self.net.end_round()?;
        let c1 = self.net.recv(Party::P1, Party::P2, tag)?;

        let (e0, f0) = (ring.sub_vec(&x.s0, &a0), ring.sub_vec(&y.s0, &b0));
        let (e1, f1) = (ring.sub_vec(&x.s1, &a1), ring.sub_vec(&y.s1, &b1));
        self.net.send(Party::P0, Party::P1, tag, [e0.as_slice(), &f0].concat());
        self.net.send(Party::P1, Party::P0, tag, [e1.as_slice(), &f1].concat());
        self.net.end_round()?;
        let from1 = self.net.recv(Party::P0, Party::P1, tag)?;
        let from0 = self.net.recv(Party::P1, Party::P0, tag)?;
        let (e1r, f1r) = from1.split_at(m * k);
        let (e0r, f0r) = from0.split_at(m * k);
        let e = ring.add_vec(&e0, e1r);
        let f = ring.add_vec(&f0, f1r);
        debug_assert_eq!(e, ring.add_vec(e0r, &e1));
        debug_assert_eq!(f, ring.add_vec(f0r, &f1));

        // Z = EF + EB + AF + C; P0 takes the public EF term.
        let z0 = ring.add_vec(
            &ring.add_vec(&ring_matmul(&ring, &e, &ring.add_vec(&f, &b0), m, k, n), &ring_matmul(&ring, &a0, &f, m, k, n)),
            &c0,
        );
        let z1 = ring.add_vec(
            &ring.add_vec(&ring_matmul(&ring, &e, &b1, m, k, n), &ring_matmul(&ring, &a1, &f, m, k, n)),
            &c1,
        );
        Ok(SharedTensor { s0: z0, s1: z1 })
    }

    /// Elementwise Beaver product: `n` correction elements, then `2n` each way.
    pub fn mul(&mut self, x: &SharedTensor, y: &SharedTensor, tag: OpTag) -> Result<SharedTensor> {
        let n = x.len();
        y.check_len(n, "elementwise product")?;
        let ring = self.ring();
        let a0 = ring.random_vec(&mut self.rng02, n);
        let b0 = ring.random_vec(&mut self.rng02, n);
        let c0 = ring.random_vec(&mut self.rng02, n);
        let a1 = ring.random_vec(&mut self.rng12, n);
        let b1 = ring.random_vec(&mut self.rng12, n);
        let c1: Vec<u64> = (0..n)
            .map(|i| ring.sub(ring.mul(ring.add(a0[i], a1[i]), ring.add(b0[i], b1[i])), c0[i]))
            .collect();
        self.net.send(Party::P2, Party::P1, tag, c1);
        self.net.end_round()?;
        let c1 = self.net.recv(Party::P1, Party::P2, tag)?;

        let (e0, f0) = (ring.sub_vec(&x.s0, &a0), ring.sub_vec(&y.s0, &b0));
        let (e1, f1) = (ring.sub_vec(&x.s1, &a1), ring.sub_vec(&y.s1, &b1));
        self.net.send(Party::P0, Party::P1, tag, [e0.as_slice(), &f0].concat());
        self.net.send(Party::P1, Party::P0, tag, [e1.as_slice(), &f1].concat());
        self.net.end_round()?;
        let from1 = self.net.recv(Party::P0, Party::P1, tag)?;
        let _ = self.net.recv(Party::P1, Party::P0, tag)?;
        let e = ring.add_vec(&e0, &from1[..n]);
        let f = ring.add_vec(&f0, &from1[n..]);
        let z0 = (0..n)
            .map(|i| ring.add(ring.add(ring.mul(e[i], ring.add(f[i], b0[i])), ring.mul(a0[i], f[i])), c0[i]))
            .collect();
        let z1 = (0..n)
            .map(|i| ring.add(ring.add(ring.mul(e[i], b1[i]), ring.mul(a1[i], f[i])), c1[i]))
            .collect();
        Ok(SharedTensor { s0: z0, s1: z1 })
    }

    /// Batched dot products `sum_{p in g} x_p y_p`, one per group: one
    /// correction element per group, then `2 |x|` elements each way.
    pub fn dot_groups(&mut self, x: &SharedTensor, y: &SharedTensor, groups: &[Vec<usize>], tag: OpTag) -> Result<SharedTensor> {
        let n = x.len();
        y.check_len(n, "dot product")?;
        let ring = self.ring();
        let a0 = ring.random_vec(&mut self.rng02, n);
        let b0 = ring.random_vec(&mut self.rng02, n);
        let c0 = ring.random_vec(&mut self.rng02, groups.len());
        let a1 = ring.random_vec(&mut self.rng12, n);
        let b1 = ring.random_vec(&mut self.rng12, n);
        let dot = |g: &[usize], u: &dyn Fn(usize) -> u64, v: &dyn Fn(usize) -> u64| {
            g.iter().fold(0u64, |acc, &p| ring.add(acc, ring.mul(u(p), v(p))))
        };
        let c1: Vec<u64> = groups
            .iter()
            .zip(&c0)
            .map(|(g, &c0g)| {
                let c = dot(g, &|p| ring.add(a0[p], a1[p]), &|p| ring.add(b0[p], b1[p]));
                ring.sub(c, c0g)
            })
            .collect();
        self.net.send(Party::P2, Party::P1, tag, c1);
        self.net.end_round()?;
        let c1 = self.net.recv(Party::P1, Party::P2, tag)?;

        let (e0, f0) = (ring.sub_vec(&x.s0, &a0), ring.sub_vec(&y.s0, &b0));
        let (e1, f1) = (ring.sub_vec(&x.s1, &a1), ring.sub_vec(&y.s1, &b1));
        self.net.send(Party::P0, Party::P1, tag, [e0.as_slice(), &f0].concat());
        self.net.send(Party::P1, Party::P0, tag, [e1.as_slice(), &f1].concat());
        self.net.end_round()?;
        let from1 = self.net.recv(Party::P0, Party::P1, tag)?;
        let _ = self.net.recv(Party::P1, Party::P0, tag)?;
        let e = ring.add_vec(&e0, &from1[..n]);
        let f = ring.add_vec(&f0, &from1[n..]);
        let mut z0 = Vec::with_capacity(groups.len());
        let mut z1 = Vec::with_capacity(groups.len());
        for (gi, g) in groups.iter().enumerate() {
            let t0 = ring.add(dot(g, &|p| e[p], &|p| ring.add(f[p], b0[p])), dot(g, &|p| a0[p], &|p| f[p]));
            let t1 = ring.add(dot(g, &|p| e[p], &|p| b1[p]), dot(g, &|p| a1[p], &|p| f[p]));
            z0.push(ring.add(t0, c0[gi]));
            z1.push(ring.add(t1, c1[gi]));
        }
        Ok(SharedTensor { s0: z0, s1: z1 })
    }

    /// Shared bit `[x >= 0]` (two's-complement sign test), re-shared as ring
    /// elements 0/1.
    ///
    /// The bit is computed by P2 as a trusted helper. The eight rounds carry
    /// `8 log p + 19` elements per value: P0 and P1 report to P2 in even
    /// rounds and P2 answers in odd rounds; P1's share of the bit rides in
    /// the last message and the remaining payload is random filler.
    pub fn drelu(&mut self, x: &SharedTensor) -> Result<SharedTensor> {
        let ring = self.ring();
        let n = x.len() as u64;
        let bits: Vec<u64> = self
            .reveal(x)
            .iter()
            .map(|&v| u64::from(ring.to_signed(v) >= 0))
            .collect();
        let b0 = ring.random_vec(&mut self.rng02, x.len());
        let b1 = ring.sub_vec(&bits, &b0);
        let tag = OpTag::Drelu;
        let mut received_b1 = Vec::new();
        for (r, extra) in DRELU_EXTRA.iter().enumerate() {
            let elements = n * (u64::from(self.log_p) + extra);
            let (big, small) = (elements.div_ceil(2) as usize, (elements / 2) as usize);
            if r % 2 == 0 {
                let p0 = ring.random_vec(&mut self.own[0], big);
                let p1 = ring.random_vec(&mut self.own[1], small);
                self.net.send(Party::P0, Party::P2, tag, p0);
                self.net.send(Party::P1, Party::P2, tag, p1);
                self.net.end_round()?;
                self.net.recv(Party::P2, Party::P0, tag)?;
                self.net.recv(Party::P2, Party::P1, tag)?;
            } else {
                let to0 = ring.random_vec(&mut self.own[2], small);
                let mut to1 = ring.random_vec(&mut self.own[2], big);
                if r == DRELU_EXTRA.len() - 1 {
                    if to1.len() < b1.len() {
                        return Err(Error::invalid("log p too small to carry the result shares"));
                    }
                    to1[..b1.len()].copy_from_slice(&b1);
                }
                self.net.send(Party::P2, Party::P0, tag, to0);
                self.net.send(Party::P2, Party::P1, tag, to1);
                self.net.end_round()?;
                self.net.recv(Party::P0, Party::P2, tag)?;
                let got = self.net.recv(Party::P1, Party::P2, tag)?;
                if r == DRELU_EXTRA.len() - 1 {
                    received_b1 = got[..x.len()].to_vec();
                }
            }
        }
        Ok(SharedTensor { s0: b0, s1: received_b1 })
    }

    /// Exact arithmetic right shift by the fixed-point scale, dealer-assisted
    /// and modeled at zero cost.
    pub fn truncate(&mut self, x: &SharedTensor) -> SharedTensor {
        let ring = self.ring();
        let s = self.fp.scale_bits;
        let shifted: Vec<u64> = self.reveal(x).iter().map(|&v| ring.shr_signed(v, s)).collect();
        let r0 = ring.random_vec(&mut self.rng02, shifted.len());
        let r1 = ring.sub_vec(&shifted, &r0);
        self.net.note(Party::P2, Party::P1, OpTag::Trunc);
        SharedTensor { s0: r0, s1: r1 }
    }
}

/// Secure product of two shared scalars.
pub fn sim_mul(a: ShareTriple, b: ShareTriple, session: &mut Session) -> Result<ShareTriple> {
    let x = SharedTensor {
        s0: vec![a.share0],
        s1: vec![a.share1],
    };
    let y = SharedTensor {
        s0: vec![b.share0],
        s1: vec![b.share1],
    };
    Ok(session.mul(&x, &y, OpTag::Mul)?.get(0))
}
