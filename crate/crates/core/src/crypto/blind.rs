//! Blind signatures over RSA with a full-domain hash.
//!
//! The issuance protocol is the classic multiplicative-blinding one:
//!
//! 1. the author hashes the message into the signer's modulus and blinds
//!    it with a random factor, `b = H(m) * r^e mod n`;
//! 2. the signer raises the blinded value to its private exponent,
//!    `s' = b^d mod n`, learning nothing about `H(m)`;
//! 3. the author strips the factor, `s = s' * r^{-1} mod n`, leaving an
//!    ordinary RSA-FDH signature on `m` that verifies as `s^e == H(m)`.
//!
//! Because `r` is uniform over the units of `Z_n`, the value the signer
//! sees is uniform and independent of the message, which is what makes
//! issued credentials unlinkable to their issuance transcripts. Unblinded
//! signatures are byte-identical to directly issued ones, so a verifier
//! cannot tell the two issuance paths apart either.

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BlindError {
    #[error("blinded value out of range for this modulus")]
    ValueOutOfRange,
    #[error("signature has wrong length: expected {expected}, found {found}")]
    BadSignatureLength { expected: usize, found: usize },
}

/// Signer-side key: modulus, public exponent and private exponent.
pub struct BlindSigningKey {
    n: BigUint,
    e: BigUint,
    d: BigUint,
}

/// Public half, sufficient to blind, unblind and verify.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BlindVerifyKey {
    n: BigUint,
    e: BigUint,
}

/// A message blinded for issuance. `value` is what travels to the signer;
/// the blinding factor stays with the author and never crosses the wire.
pub struct BlindedMessage {
    pub value: Vec<u8>,
    blinding: BigUint,
}

/// An RSA-FDH signature, big-endian and padded to the modulus length.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct RsaSignature(pub Vec<u8>);

impl BlindSigningKey {
    /// Generates a fresh key with a modulus of `bits` bits. `bits` must be
    /// a multiple of 16 and at least 128 (tests use small short-lived keys;
    /// anything deployed should be 1024 bits or more).
    pub fn generate(bits: u64, rng: &mut (impl RngCore + CryptoRng)) -> Self {
        assert!(bits >= 128 && bits % 16 == 0, "modulus size must be a multiple of 16, >= 128");
        let e = BigUint::from(65_537u32);
        loop {
            let p = gen_prime(bits / 2, &e, rng);
            let q = gen_prime(bits / 2, &e, rng);
            if p == q {
                continue;
            }
            let n = &p * &q;
            if n.bits() != bits {
                continue;
            }
            let lambda = (&p - 1u32).lcm(&(&q - 1u32));
            let Some(d) = e.modinv(&lambda) else { continue };
            return Self { n, e, d };
        }
    }

    pub fn verify_key(&self) -> BlindVerifyKey {
        BlindVerifyKey { n: self.n.clone(), e: self.e.clone() }
    }

    /// Signs a blinded value. Deterministic in its input: the signer's
    /// entire transcript for an issuance is the pair (value, result).
    pub fn sign_blinded(&self, blinded_value: &[u8]) -> Result<Vec<u8>, BlindError> {
        let b = BigUint::from_bytes_be(blinded_value);
        if b >= self.n {
            return Err(BlindError::ValueOutOfRange);
        }
        Ok(to_modulus_bytes(&b.modpow(&self.d, &self.n), &self.n))
    }

    /// Signs a message directly, without blinding. Produces bytes identical
    /// to what blind issuance of the same message would produce.
    pub fn sign(&self, message: &[u8]) -> RsaSignature {
        let h = full_domain_hash(message, &self.n);
        RsaSignature(to_modulus_bytes(&h.modpow(&self.d, &self.n), &self.n))
    }
}

impl std::fmt::Debug for BlindSigningKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BlindSigningKey(n={} bits)", self.n.bits())
    }
}

impl BlindVerifyKey {
    /// Byte length of the modulus; signatures have exactly this length.
    pub fn modulus_len(&self) -> usize {
        ((self.n.bits() + 7) / 8) as usize
    }

    /// Blinds `message` for issuance under this key.
    pub fn blind(&self, message: &[u8], rng: &mut (impl RngCore + CryptoRng)) -> BlindedMessage {
        let h = full_domain_hash(message, &self.n);
        let r = loop {
            // A non-invertible draw would reveal a factor of n; it cannot
            // occur in practice, but the loop keeps the contract total.
            let candidate = rng.gen_biguint_below(&self.n);
            if !candidate.is_zero() && candidate.gcd(&self.n).is_one() {
                break candidate;
            }
        };
        let value = (&h * r.modpow(&self.e, &self.n)) % &self.n;
        BlindedMessage { value: to_modulus_bytes(&value, &self.n), blinding: r }
    }

    /// Removes the blinding factor from the signer's response, yielding the
    /// bare signature on the original message.
    pub fn unblind(
        &self,
        blinded_signature: &[u8],
        blinded: &BlindedMessage,
    ) -> Result<RsaSignature, BlindError> {
        let s = BigUint::from_bytes_be(blinded_signature);
        if s >= self.n {
            return Err(BlindError::ValueOutOfRange);
        }
        let r_inv = blinded
            .blinding
            .modinv(&self.n)
            .expect("blinding factor was chosen coprime to the modulus");
        Ok(RsaSignature(to_modulus_bytes(&((s * r_inv) % &self.n), &self.n)))
    }

    /// True iff `signature` is a valid FDH signature on `message`.
    pub fn verify(&self, message: &[u8], signature: &RsaSignature) -> bool {
        if signature.0.len() != self.modulus_len() {
            return false;
        }
        let s = BigUint::from_bytes_be(&signature.0);
        if s >= self.n {
            return false;
        }
        s.modpow(&self.e, &self.n) == full_domain_hash(message, &self.n)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        crate::framing::concat(&[&self.n.to_bytes_be(), &self.e.to_bytes_be()])
    }
}

/// Hashes a message into the integers below `n` by expanding SHA-256 with a
/// counter to the modulus length and clearing the top byte, which keeps the
/// result strictly below any modulus whose top bit is set.
fn full_domain_hash(message: &[u8], n: &BigUint) -> BigUint {
    let len = ((n.bits() + 7) / 8) as usize;
    let mut out = Vec::with_capacity(len + 32);
    let mut counter = 0u32;
    while out.len() < len {
        let mut hasher = Sha256::new();
        hasher.update(counter.to_be_bytes());
        hasher.update((message.len() as u64).to_be_bytes());
        hasher.update(message);
        out.extend_from_slice(&hasher.finalize());
        counter += 1;
    }
    out.truncate(len);
    out[0] = 0;
    BigUint::from_bytes_be(&out)
}

/// Big-endian encoding padded on the left to the modulus length, so that
/// signature bytes are a fixed-width field.
fn to_modulus_bytes(value: &BigUint, n: &BigUint) -> Vec<u8> {
    let len = ((n.bits() + 7) / 8) as usize;
    let raw = value.to_bytes_be();
    let mut out = vec![0u8; len - raw.len()];
    out.extend_from_slice(&raw);
    out
}

/// Generates a prime of exactly `bits` bits with its top two bits set
/// (so products of two such primes have full width) and with `p - 1`
/// coprime to the public exponent.
fn gen_prime(bits: u64, e: &BigUint, rng: &mut (impl RngCore + CryptoRng)) -> BigUint {
    loop {
        let mut candidate = rng.gen_biguint(bits);
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        if !(&candidate - 1u32).gcd(e).is_one() {
            continue;
        }
        if is_probable_prime(&candidate, 40, rng) {
            return candidate;
        }
    }
}

/// Trial division by small primes followed by Miller-Rabin with random bases.
fn is_probable_prime(n: &BigUint, rounds: u32, rng: &mut (impl RngCore + CryptoRng)) -> bool {
    const SMALL_PRIMES: [u32; 20] =
        [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71];
    for p in SMALL_PRIMES {
        let p = BigUint::from(p);
        if *n == p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    // Write n - 1 as d * 2^s with d odd.
    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().expect("n - 1 is nonzero");
    let d = &n_minus_1 >> s;
    let two = BigUint::from(2u32);
    'rounds: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n_minus_1);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 0..s - 1 {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'rounds;
            }
        }
        return false;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    /// Small keys keep the unit suite fast; the widths exercised here are
    /// far below anything a deployment would use.
    const TEST_BITS: u64 = 256;

    fn key(seed: u64) -> BlindSigningKey {
        BlindSigningKey::generate(TEST_BITS, &mut ChaCha20Rng::seed_from_u64(seed))
    }

    #[test]
    fn blind_sign_unblind_verifies() {
        let sk = key(1);
        let pk = sk.verify_key();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let blinded = pk.blind(b"attribute: doctor", &mut rng);
        let response = sk.sign_blinded(&blinded.value).unwrap();
        let sig = pk.unblind(&response, &blinded).unwrap();
        assert!(pk.verify(b"attribute: doctor", &sig));
        assert!(!pk.verify(b"attribute: nurse", &sig));
    }

    #[test]
    fn unblinded_matches_direct_signature_bytes() {
        let sk = key(3);
        let pk = sk.verify_key();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for msg in [b"m1".as_slice(), b"".as_slice(), &[0xff; 100]] {
            let blinded = pk.blind(msg, &mut rng);
            let response = sk.sign_blinded(&blinded.value).unwrap();
            let via_blind = pk.unblind(&response, &blinded).unwrap();
            let direct = sk.sign(msg);
            assert_eq!(via_blind, direct, "issuance paths diverged for {msg:?}");
        }
    }

    #[test]
    fn forged_and_cross_key_signatures_rejected() {
        let sk_a = key(5);
        let sk_b = key(6);
        let pk_a = sk_a.verify_key();
        let sig_b = sk_b.sign(b"msg");
        // Signature under a different key.
        let padded = {
            let mut v = vec![0u8; pk_a.modulus_len().saturating_sub(sig_b.0.len())];
            v.extend_from_slice(&sig_b.0);
            RsaSignature(v)
        };
        assert!(!pk_a.verify(b"msg", &padded));
        // Bit-flip on a genuine signature.
        let mut sig = sk_a.sign(b"msg");
        let last = sig.0.len() - 1;
        sig.0[last] ^= 1;
        assert!(!pk_a.verify(b"msg", &sig));
        // Wrong length outright.
        assert!(!pk_a.verify(b"msg", &RsaSignature(vec![1, 2, 3])));
    }

    #[test]
    fn signer_response_is_deterministic_in_blinded_value() {
        let sk = key(7);
        let pk = sk.verify_key();
        let blinded = pk.blind(b"once", &mut ChaCha20Rng::seed_from_u64(8));
        let r1 = sk.sign_blinded(&blinded.value).unwrap();
        let r2 = sk.sign_blinded(&blinded.value).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn out_of_range_inputs_rejected() {
        let sk = key(9);
        let pk = sk.verify_key();
        let too_big = vec![0xffu8; pk.modulus_len() + 1];
        assert_eq!(sk.sign_blinded(&too_big).unwrap_err(), BlindError::ValueOutOfRange);
        let blinded = pk.blind(b"x", &mut ChaCha20Rng::seed_from_u64(10));
        assert_eq!(pk.unblind(&too_big, &blinded).unwrap_err(), BlindError::ValueOutOfRange);
    }

    #[test]
    fn fdh_stays_below_modulus_and_spreads() {
        let sk = key(11);
        let pk = sk.verify_key();
        let mut distinct = std::collections::BTreeSet::new();
        for i in 0u32..500 {
            let h = full_domain_hash(&i.to_be_bytes(), &pk.n);
            assert!(h < pk.n);
            distinct.insert(h);
        }
        assert_eq!(distinct.len(), 500);
    }

    /// Chi-square uniformity check on the second byte of blinded values for
    /// a fixed message: over random factors the blinded value is uniform in
    /// the group, so any interior byte should look uniform. (The top byte is
    /// skewed by the modulus bound, so we sample below it.)
    #[test]
    fn blinded_values_look_uniform_over_blinding_factors() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let sk = key(12);
        let pk = sk.verify_key();
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        const SAMPLES: usize = 1000;
        const BINS: usize = 256;
        let mut counts = [0u64; BINS];
        for _ in 0..SAMPLES {
            let blinded = pk.blind(b"the same message every time", &mut rng);
            counts[blinded.value[2] as usize] += 1;
        }
        let expected = SAMPLES as f64 / BINS as f64;
        let stat: f64 =
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((BINS - 1) as f64).unwrap().cdf(stat);
        assert!(p > 0.001, "uniformity rejected: chi2={stat:.1}, p={p:.5}");
    }

    #[test]
    fn generated_keys_have_requested_width() {
        let sk = key(14);
        assert_eq!(sk.n.bits(), TEST_BITS);
        assert_eq!(sk.verify_key().modulus_len(), (TEST_BITS / 8) as usize);
    }
}
