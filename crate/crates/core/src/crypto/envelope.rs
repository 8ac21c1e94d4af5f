//! Type-bound envelopes: the only at-rest representation of personal data.
//!
//! An envelope carries a payload encrypted under a fresh data key, with the
//! data key wrapped to a regulator's public key. Nobody who holds the
//! envelope — including whoever produced it, once the data key is dropped —
//! can read the payload without the regulator releasing a key.
//!
//! The release is *type-bound*: the regulator never hands out the data key
//! itself, but a payload key derived from it together with the data type
//! and subject the requester claimed. The payload AEAD key is derived the
//! same way at sealing time, so a requester that lied about the type or
//! subject receives a key that fails to decrypt. The claimed type is
//! thereby authenticated without any extra round trip, in the way
//! identity-based encryption binds a recipient string.
//!
//! Tampering with the visible fields (type, subject, producer) is caught
//! twice: they are signed by the producer and bound into the AEAD
//! associated data.

use super::{hash, kem, sig};
use crate::framing::{self, FrameError};
use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::Sha256;
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub const ENVELOPE_MAGIC: [u8; 4] = *b"PBD1";
const PAYLOAD_KEY_MAGIC: [u8; 4] = *b"PKY1";
const PAYLOAD_SALT: &[u8] = b"pbd.payload.v1";
const SIG_DOMAIN: &[u8] = b"pbd.envelope.sig.v1";
pub const VID_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;

/// The subject of a record: a virtual identity, or none for data that is
/// not about any single person (aggregates, settlement totals).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum Subject {
    None,
    Vid([u8; VID_LEN]),
}

impl Subject {
    pub fn bytes(&self) -> &[u8] {
        match self {
            Subject::None => &[],
            Subject::Vid(v) => v,
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Subject, EnvelopeError> {
        match bytes.len() {
            0 => Ok(Subject::None),
            VID_LEN => Ok(Subject::Vid(bytes.try_into().expect("length checked"))),
            n => Err(EnvelopeError::BadSubjectLength(n)),
        }
    }

    pub fn vid(&self) -> Option<[u8; VID_LEN]> {
        match self {
            Subject::None => None,
            Subject::Vid(v) => Some(*v),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TypeIdError {
    #[error("type name is empty")]
    Empty,
    #[error("type name contains forbidden character {0:?}")]
    BadChar(char),
    #[error("subject parameter is not 64 hex characters")]
    BadSubjectParam,
}

/// A data type identifier such as `DT4/DiagnosisReport`, optionally bound
/// to the subject it is about: `DT4/DiagnosisReport@<vid hex>`.
///
/// Names are Unicode-normalised (NFC) on construction so that visually
/// identical spellings compare equal; equality and hashing act on the
/// canonical form.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct TypeId {
    name: String,
    subject_param: Option<[u8; VID_LEN]>,
}

impl TypeId {
    /// A type with no subject parameter.
    pub fn bare(name: &str) -> Result<TypeId, TypeIdError> {
        let name: String = name.nfc().collect();
        if name.is_empty() {
            return Err(TypeIdError::Empty);
        }
        for c in name.chars() {
            if c.is_control() || c.is_whitespace() || c == '@' || c == ',' {
                return Err(TypeIdError::BadChar(c));
            }
        }
        Ok(TypeId { name, subject_param: None })
    }

    /// A type parameterised by the given subject; `Subject::None` yields an
    /// unparameterised type.
    pub fn for_subject(name: &str, subject: &Subject) -> Result<TypeId, TypeIdError> {
        let mut t = TypeId::bare(name)?;
        t.subject_param = subject.vid();
        Ok(t)
    }

    /// Parses the canonical text form `name` or `name@<64 hex digits>`.
    pub fn parse(text: &str) -> Result<TypeId, TypeIdError> {
        match text.split_once('@') {
            None => TypeId::bare(text),
            Some((name, param)) => {
                let mut t = TypeId::bare(name)?;
                let bytes = hex::decode(param).map_err(|_| TypeIdError::BadSubjectParam)?;
                let arr: [u8; VID_LEN] =
                    bytes.try_into().map_err(|_| TypeIdError::BadSubjectParam)?;
                t.subject_param = Some(arr);
                Ok(t)
            }
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn subject_param(&self) -> Option<[u8; VID_LEN]> {
        self.subject_param
    }

    /// Canonical text: NFC name, lowercase hex parameter.
    pub fn canonical_text(&self) -> String {
        match &self.subject_param {
            None => self.name.clone(),
            Some(vid) => format!("{}@{}", self.name, hex::encode(vid)),
        }
    }
}

impl std::fmt::Display for TypeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.canonical_text())
    }
}

/// A decryption key released by a regulator for one (type, subject) claim.
/// Holding a payload key for the wrong claim is useless: it will not
/// decrypt, and `open` reports which binding was violated.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PayloadKey {
    key: [u8; 32],
    pub type_id: TypeId,
    pub subject: Subject,
}

impl PayloadKey {
    pub fn to_bytes(&self) -> Vec<u8> {
        framing::encode(
            PAYLOAD_KEY_MAGIC,
            &[&self.key, self.type_id.name().as_bytes(), self.subject.bytes()],
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<PayloadKey, EnvelopeError> {
        let fields = framing::decode_exact(PAYLOAD_KEY_MAGIC, bytes, 3)?;
        let key = framing::fixed::<32>(0, &fields[0])?;
        let name = std::str::from_utf8(&fields[1]).map_err(|_| EnvelopeError::BadTypeText)?;
        let subject = Subject::from_bytes(&fields[2])?;
        let type_id = TypeId::for_subject(name, &subject).map_err(EnvelopeError::BadTypeId)?;
        Ok(PayloadKey { key, type_id, subject })
    }
}

/// Derives the payload key for a (type, subject) claim from a data key.
/// Sealing and release use this same derivation; it is the mechanism that
/// makes a false claim produce a non-working key.
pub fn derive_payload_key(data_key: &[u8; 32], type_id: &TypeId, subject: &Subject) -> PayloadKey {
    let hk = Hkdf::<Sha256>::new(Some(PAYLOAD_SALT), data_key);
    let info = framing::concat(&[type_id.canonical_text().as_bytes(), subject.bytes()]);
    let mut key = [0u8; 32];
    hk.expand(&info, &mut key).expect("32 bytes is a valid HKDF output length");
    PayloadKey { key, type_id: type_id.clone(), subject: *subject }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OpenError {
    /// The producer signature over the envelope does not verify.
    #[error("producer signature invalid")]
    SignatureInvalid,
    /// The key was released for a different (type, subject) claim than the
    /// envelope carries.
    #[error("payload key bound to {key_claim}, envelope is {envelope_type}")]
    TypeMismatch { key_claim: String, envelope_type: String },
    /// Bindings agree but decryption failed: wrong data key, or a tampered
    /// ciphertext/associated field.
    #[error("payload did not decrypt under the released key")]
    KeyMismatch,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("subject field has invalid length {0}")]
    BadSubjectLength(usize),
    #[error("type field is not valid UTF-8")]
    BadTypeText,
    #[error("invalid type identifier: {0}")]
    BadTypeId(TypeIdError),
    #[error("nonce field has wrong length")]
    BadNonce,
    #[error("signature field malformed")]
    BadSignature,
}

/// A sealed record. Visible fields are authenticated but not secret; the
/// payload is secret.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Envelope {
    pub type_id: TypeId,
    pub subject: Subject,
    pub wrapped_key: Vec<u8>,
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub producer_sig: sig::Signature,
}

impl Envelope {
    /// Seals `payload` as a record of `type_name` about `subject`, readable
    /// only via the regulator whose public key is given.
    pub fn seal(
        type_name: &str,
        subject: Subject,
        payload: &[u8],
        regulator: &kem::WrapPublicKey,
        producer: &sig::KeyPair,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Result<Envelope, TypeIdError> {
        let type_id = TypeId::for_subject(type_name, &subject)?;
        let mut data_key = [0u8; 32];
        rng.fill_bytes(&mut data_key);
        let payload_key = derive_payload_key(&data_key, &type_id, &subject);
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let aad = associated_data(&type_id, &subject, &producer.public());
        let ciphertext = ChaCha20Poly1305::new(Key::from_slice(&payload_key.key))
            .encrypt(Nonce::from_slice(&nonce), Payload { msg: payload, aad: &aad })
            .expect("encryption is infallible for in-memory buffers");
        let wrapped_key = regulator.wrap(&data_key, rng);
        let producer_sig =
            producer.sign(&signing_input(&type_id, &subject, &wrapped_key, &nonce, &ciphertext));
        Ok(Envelope { type_id, subject, wrapped_key, nonce, ciphertext, producer_sig })
    }

    /// Opens the envelope with a released payload key, authenticating the
    /// producer. Failures are distinguished so callers can tell a forged
    /// record from a mis-claimed key from a corrupted payload.
    pub fn open(&self, key: &PayloadKey, producer: &sig::VerifyKey) -> Result<Vec<u8>, OpenError> {
        let msg = signing_input(
            &self.type_id,
            &self.subject,
            &self.wrapped_key,
            &self.nonce,
            &self.ciphertext,
        );
        if !producer.verify(&msg, &self.producer_sig) {
            return Err(OpenError::SignatureInvalid);
        }
        if key.type_id != self.type_id || key.subject != self.subject {
            return Err(OpenError::TypeMismatch {
                key_claim: key.type_id.canonical_text(),
                envelope_type: self.type_id.canonical_text(),
            });
        }
        let aad = associated_data(&self.type_id, &self.subject, producer);
        ChaCha20Poly1305::new(Key::from_slice(&key.key))
            .decrypt(Nonce::from_slice(&self.nonce), Payload { msg: &self.ciphertext, aad: &aad })
            .map_err(|_| OpenError::KeyMismatch)
    }

    /// Recovers the data key on the regulator side and derives the payload
    /// key for a claimed (type, subject). The claim is *not* checked here —
    /// a false claim simply yields a key that will not open anything.
    pub fn release_payload_key(
        wrapped_key: &[u8],
        regulator: &kem::WrapKeyPair,
        claimed_type: &TypeId,
        claimed_subject: &Subject,
    ) -> Result<PayloadKey, kem::KemError> {
        let data_key_bytes = regulator.unwrap(wrapped_key)?;
        let data_key: [u8; 32] =
            data_key_bytes.as_slice().try_into().map_err(|_| kem::KemError::UnwrapFailed)?;
        Ok(derive_payload_key(&data_key, claimed_type, claimed_subject))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        framing::encode(
            ENVELOPE_MAGIC,
            &[
                self.type_id.name().as_bytes(),
                self.subject.bytes(),
                &self.wrapped_key,
                &self.nonce,
                &self.ciphertext,
                &self.producer_sig.to_bytes(),
            ],
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Envelope, EnvelopeError> {
        let fields = framing::decode_exact(ENVELOPE_MAGIC, bytes, 6)?;
        let name = std::str::from_utf8(&fields[0]).map_err(|_| EnvelopeError::BadTypeText)?;
        let subject = Subject::from_bytes(&fields[1])?;
        let type_id = TypeId::for_subject(name, &subject).map_err(EnvelopeError::BadTypeId)?;
        let nonce: [u8; NONCE_LEN] =
            fields[3].as_slice().try_into().map_err(|_| EnvelopeError::BadNonce)?;
        let producer_sig =
            sig::Signature::from_bytes(&fields[5]).map_err(|_| EnvelopeError::BadSignature)?;
        Ok(Envelope {
            type_id,
            subject,
            wrapped_key: fields[2].clone(),
            nonce,
            ciphertext: fields[4].clone(),
            producer_sig,
        })
    }

    /// Digest of the wire form, used as the envelope's handle in audit
    /// entries and logs.
    pub fn digest(&self) -> hash::Digest {
        hash::hash(&self.to_bytes())
    }
}

fn associated_data(type_id: &TypeId, subject: &Subject, producer: &sig::VerifyKey) -> Vec<u8> {
    framing::concat(&[
        type_id.canonical_text().as_bytes(),
        subject.bytes(),
        &producer.to_bytes(),
    ])
}

fn signing_input(
    type_id: &TypeId,
    subject: &Subject,
    wrapped_key: &[u8],
    nonce: &[u8; NONCE_LEN],
    ciphertext: &[u8],
) -> Vec<u8> {
    framing::concat(&[
        SIG_DOMAIN,
        type_id.canonical_text().as_bytes(),
        subject.bytes(),
        wrapped_key,
        nonce,
        ciphertext,
    ])
}
