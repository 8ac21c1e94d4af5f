//! Key wrapping to a public key (ECIES over X25519).
//!
//! Used wherever a small secret must reach exactly one holder of a private
//! key: data keys wrapped to a regulator inside an envelope, payload keys
//! wrapped to an attested session key, and identifiers encrypted to the
//! identity authority. Each wrap uses a fresh ephemeral keypair, so two
//! wraps of the same plaintext are unrelated byte strings.
//!
//! Wire layout: `ephemeral_pk (32) || aead_ciphertext`. The AEAD key is
//! HKDF-SHA-256 of the Diffie-Hellman shared secret, bound to both public
//! keys; the nonce is fixed because every key is used exactly once.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::Sha256;
use thiserror::Error;

pub const PUBLIC_KEY_LEN: usize = 32;
const WRAP_INFO: &[u8] = b"pbd.kem.wrap.v1";
const WRAP_AAD: &[u8] = b"pbd.kem.aad.v1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KemError {
    #[error("wrapped blob too short: {0} bytes")]
    TooShort(usize),
    #[error("malformed public key bytes")]
    MalformedKey,
    #[error("unwrap failed: wrong key or corrupted blob")]
    UnwrapFailed,
}

/// A decapsulation keypair (held by a regulator, a TE session, or the
/// identity authority).
pub struct WrapKeyPair {
    secret: x25519_dalek::StaticSecret,
    public: x25519_dalek::PublicKey,
}

/// The public half, safe to embed in manifests, reports and envelopes.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct WrapPublicKey(x25519_dalek::PublicKey);

impl WrapKeyPair {
    pub fn generate(rng: &mut (impl RngCore + CryptoRng)) -> Self {
        let secret = x25519_dalek::StaticSecret::random_from_rng(rng);
        let public = x25519_dalek::PublicKey::from(&secret);
        Self { secret, public }
    }

    /// Reconstructs a keypair from exported secret bytes. Only used when a
    /// key escrow provisions an attested instance with an existing key.
    pub fn from_secret_bytes(bytes: [u8; 32]) -> Self {
        let secret = x25519_dalek::StaticSecret::from(bytes);
        let public = x25519_dalek::PublicKey::from(&secret);
        Self { secret, public }
    }

    /// Exports the secret for escrow. Handle with the care the name implies.
    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes()
    }

    pub fn public(&self) -> WrapPublicKey {
        WrapPublicKey(self.public)
    }

    /// Opens a blob produced by [`WrapPublicKey::wrap`] for our public key.
    pub fn unwrap(&self, wrapped: &[u8]) -> Result<Vec<u8>, KemError> {
        if wrapped.len() < PUBLIC_KEY_LEN + 16 {
            return Err(KemError::TooShort(wrapped.len()));
        }
        let eph_bytes: [u8; PUBLIC_KEY_LEN] =
            wrapped[..PUBLIC_KEY_LEN].try_into().expect("length checked");
        let ephemeral = x25519_dalek::PublicKey::from(eph_bytes);
        let shared = self.secret.diffie_hellman(&ephemeral);
        let key = derive_key(shared.as_bytes(), &eph_bytes, &self.public.to_bytes());
        ChaCha20Poly1305::new(Key::from_slice(&key))
            .decrypt(
                Nonce::from_slice(&[0u8; 12]),
                Payload { msg: &wrapped[PUBLIC_KEY_LEN..], aad: WRAP_AAD },
            )
            .map_err(|_| KemError::UnwrapFailed)
    }
}

impl std::fmt::Debug for WrapKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "WrapKeyPair(pk={})", hex::encode(&self.public.to_bytes()[..6]))
    }
}

impl WrapPublicKey {
    pub fn to_bytes(&self) -> [u8; PUBLIC_KEY_LEN] {
        self.0.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, KemError> {
        let arr: [u8; PUBLIC_KEY_LEN] = bytes.try_into().map_err(|_| KemError::MalformedKey)?;
        Ok(WrapPublicKey(x25519_dalek::PublicKey::from(arr)))
    }

    /// Encrypts `plaintext` so only the matching [`WrapKeyPair`] can read it.
    pub fn wrap(&self, plaintext: &[u8], rng: &mut (impl RngCore + CryptoRng)) -> Vec<u8> {
        let eph_secret = x25519_dalek::StaticSecret::random_from_rng(rng);
        let eph_public = x25519_dalek::PublicKey::from(&eph_secret);
        let shared = eph_secret.diffie_hellman(&self.0);
        let key = derive_key(shared.as_bytes(), &eph_public.to_bytes(), &self.0.to_bytes());
        let ct = ChaCha20Poly1305::new(Key::from_slice(&key))
            .encrypt(Nonce::from_slice(&[0u8; 12]), Payload { msg: plaintext, aad: WRAP_AAD })
            .expect("encryption is infallible for in-memory buffers");
        let mut out = Vec::with_capacity(PUBLIC_KEY_LEN + ct.len());
        out.extend_from_slice(&eph_public.to_bytes());
        out.extend_from_slice(&ct);
        out
    }
}

fn derive_key(shared: &[u8], ephemeral_pk: &[u8], recipient_pk: &[u8]) -> [u8; 32] {
    let hk = Hkdf::<Sha256>::new(None, shared);
    let mut okm = [0u8; 32];
    let info = crate::framing::concat(&[WRAP_INFO, ephemeral_pk, recipient_pk]);
    hk.expand(&info, &mut okm).expect("32 bytes is a valid HKDF output length");
    okm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn wrap_unwrap_round_trip() {
        let mut r = rng(1);
        let kp = WrapKeyPair::generate(&mut r);
        let wrapped = kp.public().wrap(b"a 32-byte data key goes here....", &mut r);
        assert_eq!(kp.unwrap(&wrapped).unwrap(), b"a 32-byte data key goes here....");
    }

    #[test]
    fn wrong_recipient_cannot_unwrap() {
        let mut r = rng(2);
        let alice = WrapKeyPair::generate(&mut r);
        let mallory = WrapKeyPair::generate(&mut r);
        let wrapped = alice.public().wrap(b"secret", &mut r);
        assert_eq!(mallory.unwrap(&wrapped).unwrap_err(), KemError::UnwrapFailed);
    }

    #[test]
    fn tampering_detected() {
        let mut r = rng(3);
        let kp = WrapKeyPair::generate(&mut r);
        let wrapped = kp.public().wrap(b"secret", &mut r);
        for i in 0..wrapped.len() {
            let mut bad = wrapped.clone();
            bad[i] ^= 0x80;
            assert!(kp.unwrap(&bad).is_err(), "flip at byte {i} accepted");
        }
    }

    #[test]
    fn wraps_are_randomised() {
        let mut r = rng(4);
        let kp = WrapKeyPair::generate(&mut r);
        let a = kp.public().wrap(b"same plaintext", &mut r);
        let b = kp.public().wrap(b"same plaintext", &mut r);
        assert_ne!(a, b);
        assert_eq!(kp.unwrap(&a).unwrap(), kp.unwrap(&b).unwrap());
    }

    #[test]
    fn short_blob_rejected() {
        let kp = WrapKeyPair::generate(&mut rng(5));
        assert_eq!(kp.unwrap(&[0u8; 10]).unwrap_err(), KemError::TooShort(10));
    }

    #[test]
    fn secret_export_reconstructs_the_same_keypair() {
        let mut r = rng(7);
        let kp = WrapKeyPair::generate(&mut r);
        let again = WrapKeyPair::from_secret_bytes(kp.secret_bytes());
        assert_eq!(again.public(), kp.public());
        let wrapped = kp.public().wrap(b"escrowed", &mut r);
        assert_eq!(again.unwrap(&wrapped).unwrap(), b"escrowed");
    }

    #[test]
    fn public_key_round_trips() {
        let kp = WrapKeyPair::generate(&mut rng(6));
        let pk = WrapPublicKey::from_bytes(&kp.public().to_bytes()).unwrap();
        assert_eq!(pk, kp.public());
        assert!(WrapPublicKey::from_bytes(&[1u8; 7]).is_err());
    }
}
