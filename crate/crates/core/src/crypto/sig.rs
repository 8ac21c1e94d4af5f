//! Ed25519 signatures for parties, devices and platform attestation.
//!
//! Blind issuance lives in [`crate::crypto::blind`]; this module covers the
//! ordinary "one key, one signer" case. Verification returns `false` for a
//! well-formed signature that does not check out, and an error only when
//! the key or signature bytes themselves are malformed — callers that
//! tolerate bad signatures must still surface garbage input.

use ed25519_dalek::{Signer, Verifier};
use rand::{CryptoRng, RngCore};
use thiserror::Error;

pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SigError {
    #[error("malformed public key bytes")]
    MalformedKey,
    #[error("malformed signature bytes: expected {SIGNATURE_LEN}, found {0}")]
    MalformedSignature(usize),
}

/// A signing keypair.
pub struct KeyPair {
    signing: ed25519_dalek::SigningKey,
}

impl KeyPair {
    pub fn generate(rng: &mut (impl RngCore + CryptoRng)) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(seed)
    }

    /// Deterministic construction from a 32-byte seed, used for per-vid
    /// keys derived from an agent's master secret.
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self { signing: ed25519_dalek::SigningKey::from_bytes(&seed) }
    }

    pub fn public(&self) -> VerifyKey {
        VerifyKey(self.signing.verifying_key())
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature(self.signing.sign(message))
    }
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "KeyPair(pk={})", hex::encode(&self.public().to_bytes()[..6]))
    }
}

/// A verification (public) key.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct VerifyKey(ed25519_dalek::VerifyingKey);

impl VerifyKey {
    pub fn to_bytes(&self) -> [u8; PUBLIC_KEY_LEN] {
        self.0.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SigError> {
        let arr: [u8; PUBLIC_KEY_LEN] = bytes.try_into().map_err(|_| SigError::MalformedKey)?;
        ed25519_dalek::VerifyingKey::from_bytes(&arr)
            .map(VerifyKey)
            .map_err(|_| SigError::MalformedKey)
    }

    /// True iff `signature` is a valid signature on `message` under this key.
    pub fn verify(&self, message: &[u8], signature: &Signature) -> bool {
        self.0.verify(message, &signature.0).is_ok()
    }
}

impl std::fmt::Debug for VerifyKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "VerifyKey({})", hex::encode(&self.to_bytes()[..6]))
    }
}

impl PartialOrd for VerifyKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for VerifyKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.to_bytes().cmp(&other.to_bytes())
    }
}

/// A detached signature.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Signature(ed25519_dalek::Signature);

impl Signature {
    pub fn to_bytes(&self) -> [u8; SIGNATURE_LEN] {
        self.0.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SigError> {
        let arr: [u8; SIGNATURE_LEN] =
            bytes.try_into().map_err(|_| SigError::MalformedSignature(bytes.len()))?;
        Ok(Signature(ed25519_dalek::Signature::from_bytes(&arr)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(7)
    }

    #[test]
    fn sign_verify_round_trip() {
        let kp = KeyPair::generate(&mut rng());
        let sig = kp.sign(b"hello");
        assert!(kp.public().verify(b"hello", &sig));
        assert!(!kp.public().verify(b"hellO", &sig));
    }

    #[test]
    fn wrong_key_rejects() {
        let mut r = rng();
        let a = KeyPair::generate(&mut r);
        let b = KeyPair::generate(&mut r);
        let sig = a.sign(b"msg");
        assert!(!b.public().verify(b"msg", &sig));
    }

    #[test]
    fn tampered_signature_rejects() {
        let kp = KeyPair::generate(&mut rng());
        let mut bytes = kp.sign(b"msg").to_bytes();
        bytes[0] ^= 1;
        let tampered = Signature::from_bytes(&bytes).unwrap();
        assert!(!kp.public().verify(b"msg", &tampered));
    }

    #[test]
    fn malformed_key_is_an_error_not_false() {
        assert_eq!(VerifyKey::from_bytes(&[0u8; 5]).unwrap_err(), SigError::MalformedKey);
        // Roughly half of all 32-byte strings fail point decompression;
        // scan the first byte to find one and check it errors (rather than
        // silently verifying everything as false).
        let mut bad = [0x5au8; 32];
        let rejected = (0u8..=255).any(|b| {
            bad[0] = b;
            VerifyKey::from_bytes(&bad).is_err()
        });
        assert!(rejected, "no invalid curve point found in a 256-value scan");
        assert_eq!(Signature::from_bytes(&[1u8; 10]).unwrap_err(), SigError::MalformedSignature(10));
    }

    #[test]
    fn key_round_trips_through_bytes() {
        let kp = KeyPair::generate(&mut rng());
        let pk = VerifyKey::from_bytes(&kp.public().to_bytes()).unwrap();
        assert!(pk.verify(b"x", &kp.sign(b"x")));
    }

    #[test]
    fn deterministic_from_seed() {
        let a = KeyPair::from_seed([9u8; 32]);
        let b = KeyPair::from_seed([9u8; 32]);
        assert_eq!(a.public(), b.public());
        assert_eq!(a.sign(b"m").to_bytes(), b.sign(b"m").to_bytes());
    }
}
