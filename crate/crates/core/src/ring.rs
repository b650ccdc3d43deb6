//! Exact arithmetic over the symmetric residue ring `Z_q = Z ∩ [-q/2, q/2)`
//! and additive secret sharing of vectors in `Z_q^p`.
//!
//! Entries are stored as `i64`. The modulus is capped at [`Modulus::MAX`]
//! (`2^62`), so every reduced entry has magnitude at most `2^61`. Products of
//! two reduced values (or of a reduced value and any `i64`) are below `2^125`
//! and are formed in `i128`; sums are accumulated in `i128` after each term is
//! reduced, which leaves room for more than `2^60` terms. All intermediate
//! arithmetic is therefore exact for every accepted modulus.

use rand::Rng;

use crate::error::{Error, Result};

/// Protocol-wide modulus `q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Modulus(u64);

impl Modulus {
    /// Largest modulus for which exact `i128` headroom is guaranteed.
    pub const MAX: u64 = 1 << 62;

    pub fn new(q: u64) -> Result<Self> {
        if q < 3 {
            return Err(Error::invalid(format!("modulus must be at least 3, got {q}")));
        }
        if q > Self::MAX {
            return Err(Error::invalid(format!(
                "modulus {q} exceeds the supported maximum 2^62"
            )));
        }
        Ok(Modulus(q))
    }

    /// `q = 2^bits`.
    pub fn pow2(bits: u32) -> Result<Self> {
        if bits >= 63 {
            return Err(Error::invalid(format!("modulus 2^{bits} exceeds 2^62")));
        }
        Self::new(1u64 << bits)
    }

    pub fn get(self) -> u64 {
        self.0
    }

    /// Smallest representative, `-floor(q/2)`.
    pub fn min_value(self) -> i64 {
        -((self.0 / 2) as i64)
    }

    /// Largest representative, `ceil(q/2) - 1`.
    pub fn max_value(self) -> i64 {
        (self.0 - self.0 / 2 - 1) as i64
    }

    /// Symmetric reduction of a single integer.
    pub fn reduce(self, a: i128) -> i64 {
        let q = self.0 as i128;
        let r = a.rem_euclid(q);
        // r in [0, q); values at or above ceil(q/2) wrap to the negative half
        let upper = q - q / 2;
        (if r >= upper { r - q } else { r }) as i64
    }

    pub fn contains(self, v: i64) -> bool {
        v >= self.min_value() && v <= self.max_value()
    }

    /// Uniform sample from `Z_q`. `random_range` is unbiased (rejection based).
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> i64 {
        rng.random_range(self.min_value()..=self.max_value())
    }
}

impl std::fmt::Display for Modulus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A vector in `Z_q^p`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RingVector {
    entries: Vec<i64>,
    modulus: Modulus,
}

/// Componentwise symmetric reduction `a mod q := a - floor((a + q/2)/q) q`.
pub fn reduce_mod(a: &[i128], q: Modulus) -> RingVector {
    RingVector {
        entries: a.iter().map(|&v| q.reduce(v)).collect(),
        modulus: q,
    }
}

impl RingVector {
    pub fn zeros(len: usize, modulus: Modulus) -> Self {
        RingVector {
            entries: vec![0; len],
            modulus,
        }
    }

    /// Reduces arbitrary integers into the ring.
    pub fn from_integers(values: &[i64], modulus: Modulus) -> Self {
        RingVector {
            entries: values.iter().map(|&v| modulus.reduce(v as i128)).collect(),
            modulus,
        }
    }

    /// Wraps entries that must already lie in `[-q/2, q/2)`.
    pub fn from_reduced(entries: Vec<i64>, modulus: Modulus) -> Result<Self> {
        if let Some(bad) = entries.iter().find(|&&v| !modulus.contains(v)) {
            return Err(Error::invalid(format!(
                "entry {bad} is outside Z_q for q = {modulus}"
            )));
        }
        Ok(RingVector { entries, modulus })
    }

    pub fn random<R: Rng + ?Sized>(len: usize, modulus: Modulus, rng: &mut R) -> Self {
        RingVector {
            entries: (0..len).map(|_| modulus.sample(rng)).collect(),
            modulus,
        }
    }

    pub fn entries(&self) -> &[i64] {
        &self.entries
    }

    pub fn modulus(&self) -> Modulus {
        self.modulus
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|&v| v == 0)
    }

    fn check_compatible(&self, other: &RingVector) -> Result<()> {
        if self.modulus != other.modulus {
            return Err(Error::invalid(format!(
                "modulus mismatch: {} vs {}",
                self.modulus, other.modulus
            )));
        }
        if self.len() != other.len() {
            return Err(Error::invalid(format!(
                "length mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &RingVector) -> Result<RingVector> {
        self.check_compatible(other)?;
        Ok(self.zip_with(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &RingVector) -> Result<RingVector> {
        self.check_compatible(other)?;
        Ok(self.zip_with(other, |a, b| a - b))
    }

    pub fn neg(&self) -> RingVector {
        let q = self.modulus;
        RingVector {
            entries: self.entries.iter().map(|&v| q.reduce(-(v as i128))).collect(),
            modulus: q,
        }
    }

    /// `c * self mod q`.
    pub fn scale(&self, c: i64) -> RingVector {
        let q = self.modulus;
        RingVector {
            entries: self
                .entries
                .iter()
                .map(|&v| q.reduce(c as i128 * v as i128))
                .collect(),
            modulus: q,
        }
    }

    fn zip_with(&self, other: &RingVector, f: impl Fn(i128, i128) -> i128) -> RingVector {
        let q = self.modulus;
        RingVector {
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(&a, &b)| q.reduce(f(a as i128, b as i128)))
                .collect(),
            modulus: q,
        }
    }
}

/// Componentwise sum of ring vectors reduced mod q.
pub fn ring_sum<'a, I>(len: usize, modulus: Modulus, items: I) -> Result<RingVector>
where
    I: IntoIterator<Item = &'a RingVector>,
{
    let mut acc = vec![0i128; len];
    for v in items {
        if v.modulus != modulus || v.len() != len {
            return Err(Error::invalid(format!(
                "cannot sum vector (len {}, q {}) into (len {len}, q {modulus})",
                v.len(),
                v.modulus
            )));
        }
        for (a, &x) in acc.iter_mut().zip(&v.entries) {
            *a += x as i128;
        }
    }
    Ok(reduce_mod(&acc, modulus))
}

/// Additive shares `s_1, ..., s_n` of a message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareBundle {
    shares: Vec<RingVector>,
}

impl ShareBundle {
    pub fn from_shares(shares: Vec<RingVector>) -> Result<Self> {
        if shares.is_empty() {
            return Err(Error::invalid("a share bundle needs at least one share"));
        }
        Ok(ShareBundle { shares })
    }

    pub fn shares(&self) -> &[RingVector] {
        &self.shares
    }

    pub fn into_shares(self) -> Vec<RingVector> {
        self.shares
    }

    pub fn len(&self) -> usize {
        self.shares.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shares.is_empty()
    }
}

/// Splits `message` into `n` shares: the first `n-1` uniform on `Z_q^p`, the
/// last chosen so that all shares sum to the message.
pub fn share<R: Rng + ?Sized>(message: &RingVector, n: usize, rng: &mut R) -> Result<ShareBundle> {
    if n == 0 {
        return Err(Error::invalid("cannot split a message into zero shares"));
    }
    let q = message.modulus();
    let p = message.len();
    let mut shares = Vec::with_capacity(n);
    let mut acc: Vec<i128> = message.entries().iter().map(|&v| v as i128).collect();
    for _ in 0..n - 1 {
        let s = RingVector::random(p, q, rng);
        for (a, &x) in acc.iter_mut().zip(s.entries()) {
            *a -= x as i128;
        }
        shares.push(s);
    }
    shares.push(reduce_mod(&acc, q));
    Ok(ShareBundle { shares })
}

pub fn reconstruct(bundle: &ShareBundle) -> Result<RingVector> {
    let first = &bundle.shares[0];
    ring_sum(first.len(), first.modulus(), &bundle.shares)
}
