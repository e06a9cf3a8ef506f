//! Polynomial threshold sharing over the prime field p = 2^256 - 189.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use num_bigint::{BigUint, RandBigInt};
use rand::RngCore;
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::protection::KeyId;

/// Bytes of secret per field element. 31 bytes always fit below p.
pub const CHUNK_BYTES: usize = 31;

pub fn modulus() -> &'static BigUint {
    static P: OnceLock<BigUint> = OnceLock::new();
    P.get_or_init(|| (BigUint::from(1u8) << 256u32) - BigUint::from(189u8))
}

pub(crate) fn add(a: &BigUint, b: &BigUint) -> BigUint {
    (a + b) % modulus()
}

pub(crate) fn sub(a: &BigUint, b: &BigUint) -> BigUint {
    let p = modulus();
    ((a % p) + p - (b % p)) % p
}

pub(crate) fn mul(a: &BigUint, b: &BigUint) -> BigUint {
    (a * b) % modulus()
}

pub(crate) fn inv(a: &BigUint) -> BigUint {
    let p = modulus();
    a.modpow(&(p - BigUint::from(2u8)), p)
}

pub(crate) fn random_element<R: RngCore>(rng: &mut R) -> BigUint {
    rng.gen_biguint_below(modulus())
}

/// Horner evaluation of `coeffs` (constant term first) at `x`.
pub(crate) fn eval(coeffs: &[BigUint], x: u32) -> BigUint {
    let x = BigUint::from(x);
    coeffs.iter().rev().fold(BigUint::ZERO, |acc, c| add(&mul(&acc, &x), c))
}

/// Lagrange basis coefficient for `xi` within `xs`, evaluated at zero.
pub fn lagrange_at_zero(xi: u32, xs: &[u32]) -> BigUint {
    let mut num = BigUint::from(1u8);
    let mut den = BigUint::from(1u8);
    let xi_f = BigUint::from(xi);
    for &xj in xs.iter().filter(|&&xj| xj != xi) {
        let xj = BigUint::from(xj);
        num = mul(&num, &xj);
        den = mul(&den, &sub(&xj, &xi_f));
    }
    mul(&num, &inv(&den))
}

pub fn chunk_secret(secret: &[u8]) -> Vec<BigUint> {
    secret.chunks(CHUNK_BYTES).map(BigUint::from_bytes_be).collect()
}

pub fn unchunk_secret(chunks: &[BigUint], secret_len: usize) -> Option<Vec<u8>> {
    if chunks.len() != secret_len.div_ceil(CHUNK_BYTES) {
        return None;
    }
    let mut out = Vec::with_capacity(secret_len);
    for (i, c) in chunks.iter().enumerate() {
        let width = CHUNK_BYTES.min(secret_len - i * CHUNK_BYTES);
        let bytes = c.to_bytes_be();
        if bytes.len() > width {
            return None;
        }
        out.extend(std::iter::repeat_n(0u8, width - bytes.len()));
        out.extend_from_slice(&bytes);
    }
    Some(out)
}

/// Splits each chunk with an independent random polynomial of degree t-1.
/// Returns one value vector per share index 1..=n.
pub fn split<R: RngCore>(chunks: &[BigUint], t: usize, n: usize, rng: &mut R) -> Vec<Vec<BigUint>> {
    let polys: Vec<Vec<BigUint>> = chunks
        .iter()
        .map(|c| {
            let mut coeffs = Vec::with_capacity(t);
            coeffs.push(c % modulus());
            coeffs.extend((1..t).map(|_| random_element(rng)));
            coeffs
        })
        .collect();
    (1..=n as u32).map(|x| polys.iter().map(|p| eval(p, x)).collect()).collect()
}

/// One member's piece of one secret in one committee epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Share {
    pub secret_id: KeyId,
    pub member_id: String,
    pub epoch: u64,
    pub index: u32,
    pub values: Vec<BigUint>,
    pub secret_len: usize,
}

impl Share {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(&self.secret_id.0)
            .str(&self.member_id)
            .varint(self.epoch)
            .varint(self.index.into())
            .varint(self.secret_len as u64)
            .varint(self.values.len() as u64);
        for v in &self.values {
            w.bytes(&v.to_bytes_be());
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let secret_id = KeyId(r.array()?);
        let member_id = r.str()?.to_owned();
        let epoch = r.varint()?;
        let index = u32::try_from(r.varint()?).map_err(|_| DecodeError::Invalid("share index".into()))?;
        let secret_len = r.varint()? as usize;
        let count = r.varint()? as usize;
        if count > 64 {
            return Err(DecodeError::Invalid(format!("{count} share values")));
        }
        let values = (0..count).map(|_| r.bytes().map(BigUint::from_bytes_be)).collect::<Result<Vec<_>, _>>()?;
        r.finish()?;
        Ok(Self { secret_id, member_id, epoch, index, values, secret_len })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CombineError {
    #[error("{have} shares, threshold is {need}")]
    BelowThreshold { have: usize, need: usize },
    #[error("shares from epochs {0} and {1}")]
    MixedEpoch(u64, u64),
    #[error("shares of different secrets")]
    MixedSecret,
    #[error("duplicate share index {0}")]
    DuplicateIndex(u32),
    #[error("shares disagree on the secret layout")]
    Malformed,
}

/// Reconstructs a secret from at least `t` shares of one (secret, epoch).
pub fn combine(shares: &[Share], t: usize) -> Result<Vec<u8>, CombineError> {
    if shares.len() < t || t == 0 {
        return Err(CombineError::BelowThreshold { have: shares.len(), need: t });
    }
    let first = &shares[0];
    let mut seen = BTreeSet::new();
    for s in shares {
        if s.secret_id != first.secret_id {
            return Err(CombineError::MixedSecret);
        }
        if s.epoch != first.epoch {
            return Err(CombineError::MixedEpoch(first.epoch, s.epoch));
        }
        if s.index == 0 || !seen.insert(s.index) {
            return Err(CombineError::DuplicateIndex(s.index));
        }
        if s.secret_len != first.secret_len || s.values.len() != first.values.len() {
            return Err(CombineError::Malformed);
        }
    }
    let used = &shares[..t];
    let xs: Vec<u32> = used.iter().map(|s| s.index).collect();
    let lambdas: Vec<BigUint> = xs.iter().map(|&x| lagrange_at_zero(x, &xs)).collect();
    let chunks: Vec<BigUint> = (0..first.values.len())
        .map(|c| used.iter().zip(&lambdas).fold(BigUint::ZERO, |acc, (s, l)| add(&acc, &mul(l, &s.values[c]))))
        .collect();
    unchunk_secret(&chunks, first.secret_len).ok_or(CombineError::Malformed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigUint;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shares_of(secret: &[u8], t: usize, n: usize, seed: u64) -> Vec<Share> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        split(&chunk_secret(secret), t, n, &mut rng)
            .into_iter()
            .enumerate()
            .map(|(i, values)| Share {
                secret_id: KeyId([7; 16]),
                member_id: format!("m{i}"),
                epoch: 0,
                index: i as u32 + 1,
                values,
                secret_len: secret.len(),
            })
            .collect()
    }

    /// Interpolation oracle: solve the Vandermonde system by Gaussian
    /// elimination over the field rather than the Lagrange formula.
    fn vandermonde_constant(points: &[(u32, BigUint)]) -> BigUint {
        let k = points.len();
        let mut m: Vec<Vec<BigUint>> = points
            .iter()
            .map(|(x, y)| {
                let mut row: Vec<BigUint> = (0..k).map(|j| BigUint::from(*x).modpow(&BigUint::from(j), modulus())).collect();
                row.push(y.clone());
                row
            })
            .collect();
        for col in 0..k {
            let pivot = (col..k).find(|&r| m[r][col] != BigUint::ZERO).unwrap();
            m.swap(col, pivot);
            let iv = inv(&m[col][col]);
            for j in col..=k {
                m[col][j] = mul(&m[col][j], &iv);
            }
            for r in 0..k {
                if r != col && m[r][col] != BigUint::ZERO {
                    let f = m[r][col].clone();
                    for j in col..=k {
                        let d = mul(&f, &m[col][j]);
                        m[r][j] = sub(&m[r][j], &d);
                    }
                }
            }
        }
        m[0][k].clone()
    }

    #[test]
    fn modulus_is_below_two_to_256() {
        assert_eq!(modulus().bits(), 256);
        assert_eq!(modulus() + BigUint::from(189u8), BigUint::from(1u8) << 256u32);
    }

    #[test]
    fn every_three_subset_of_five_reconstructs() {
        let secret: Vec<u8> = (0..32).collect();
        let shares = shares_of(&secret, 3, 5, 1);
        let mut count = 0;
        for a in 0..5 {
            for b in a + 1..5 {
                for c in b + 1..5 {
                    let subset = [shares[a].clone(), shares[b].clone(), shares[c].clone()];
                    assert_eq!(combine(&subset, 3).unwrap(), secret);
                    for chunk in 0..subset[0].values.len() {
                        let pts: Vec<_> = subset.iter().map(|s| (s.index, s.values[chunk].clone())).collect();
                        assert_eq!(vandermonde_constant(&pts), chunk_secret(&secret)[chunk]);
                    }
                    count += 1;
                }
            }
        }
        assert_eq!(count, 10);
    }

    #[test]
    fn full_threshold_needs_both() {
        let secret = [0xabu8; 32];
        let shares = shares_of(&secret, 2, 2, 3);
        assert_eq!(combine(&shares, 2).unwrap(), secret);
        assert_eq!(combine(&shares[..1], 2), Err(CombineError::BelowThreshold { have: 1, need: 2 }));
    }

    #[test]
    fn combiner_guards() {
        let secret = [1u8; 32];
        let shares = shares_of(&secret, 3, 5, 4);
        let dup = [shares[0].clone(), shares[0].clone(), shares[1].clone()];
        assert_eq!(combine(&dup, 3), Err(CombineError::DuplicateIndex(1)));
        let mut mixed = shares[..3].to_vec();
        mixed[2].epoch = 1;
        assert_eq!(combine(&mixed, 3), Err(CombineError::MixedEpoch(0, 1)));
        let mut other = shares[..3].to_vec();
        other[1].secret_id = KeyId([8; 16]);
        assert_eq!(combine(&other, 3), Err(CombineError::MixedSecret));
    }

    #[test]
    fn sub_threshold_subsets_refused_exhaustively() {
        for n in 2..=6usize {
            for t in 2..=n {
                let shares = shares_of(&[9u8; 32], t, n, (n * 10 + t) as u64);
                for mask in 0u32..(1 << n) {
                    let subset: Vec<Share> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| shares[i].clone()).collect();
                    let result = combine(&subset, t);
                    if subset.len() < t {
                        assert!(matches!(result, Err(CombineError::BelowThreshold { .. })));
                    } else {
                        assert_eq!(result.unwrap(), vec![9u8; 32]);
                    }
                }
            }
        }
    }

    #[test]
    fn sub_threshold_shares_look_uniform() {
        // Top nibble of the two share values held by members 1 and 2 under a
        // 3-of-5 sharing, across random secrets and with a fixed secret.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for fixed in [false, true] {
            let mut buckets = [[0u32; 16]; 2];
            let trials = 8000;
            for _ in 0..trials {
                let mut secret = [0u8; 31];
                if !fixed {
                    rand::RngCore::fill_bytes(&mut rng, &mut secret);
                }
                let shares = split(&chunk_secret(&secret), 3, 5, &mut rng);
                for (b, s) in buckets.iter_mut().zip(&shares[..2]) {
                    let top = (&s[0] >> 252u32).to_u32_digits().first().copied().unwrap_or(0);
                    b[top as usize] += 1;
                }
            }
            for b in buckets {
                let expected = trials as f64 / 16.0;
                let chi2: f64 = b.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
                // 15 degrees of freedom, p = 0.001 critical value
                assert!(chi2 < 37.7, "chi2 {chi2} for {b:?}");
            }
        }
    }

    #[test]
    fn share_encoding_round_trips() {
        let s = &shares_of(&[3u8; 32], 3, 5, 5)[2];
        assert_eq!(&Share::decode(&s.encode()).unwrap(), s);
        assert!(Share::decode(&s.encode()[..10]).is_err());
    }

    proptest! {
        #[test]
        fn random_secrets_reconstruct(secret in proptest::collection::vec(any::<u8>(), 1..80), seed: u64, t in 2usize..5, extra in 0usize..3) {
            let n = t + extra;
            let shares = shares_of(&secret, t, n, seed);
            prop_assert_eq!(combine(&shares[extra..], t).unwrap(), secret.clone());
            prop_assert_eq!(combine(&shares, t).unwrap(), secret);
        }
    }
}
