//! At-rest storage for sealed envelopes.
//!
//! The store is deliberately dumb: it can neither read what it holds (the
//! envelopes are sealed to the regulator) nor even see *whose* data it
//! holds. Each record is filed under a blind index token — a keyed PRF of
//! the (type name, subject) pair — and the envelope bytes are encrypted
//! again under a store key before they touch disk, so a copy of the file
//! leaks no subject identifiers, no type parameters, and no ciphertext
//! structure. Equal queries map to equal tokens, which is exactly the
//! lookup capability a custodian needs and nothing more.
//!
//! File format (`STO1`): one frame whose fields are the records, each
//! record being `token (32) || aead_nonce (12) || ciphertext`. The AEAD is
//! bound to the token and the record's position, so records cannot be
//! reordered, duplicated or transplanted between tokens without detection.

use crate::crypto::envelope::{Envelope, EnvelopeError, Subject};
use crate::crypto::hash::{self, Digest};
use crate::framing::{self, FrameError};
use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::{CryptoRng, RngCore};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

pub const STORE_MAGIC: [u8; 4] = *b"STO1";
const TOKEN_DOMAIN: &[u8] = b"pbd.store.index.v1";
const RECORD_DOMAIN: &[u8] = b"pbd.store.record.v1";
const NONCE_LEN: usize = 12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("store file malformed: {0}")]
    Frame(#[from] FrameError),
    #[error("record {0} too short to hold token and nonce")]
    RecordShape(usize),
    #[error("record {0} failed authentication (wrong key or tampered file)")]
    Tampered(usize),
    #[error("record {0} decrypted but did not parse as an envelope: {1}")]
    BadEnvelope(usize, EnvelopeError),
    #[error("i/o: {0}")]
    Io(String),
}

/// The custodian's key material: one key for index tokens, one for the
/// at-rest layer. Neither can open an envelope.
#[derive(Clone)]
pub struct StoreKeys {
    pub index_key: [u8; 32],
    pub at_rest_key: [u8; 32],
}

impl StoreKeys {
    pub fn generate(rng: &mut (impl RngCore + CryptoRng)) -> Self {
        let mut index_key = [0u8; 32];
        let mut at_rest_key = [0u8; 32];
        rng.fill_bytes(&mut index_key);
        rng.fill_bytes(&mut at_rest_key);
        Self { index_key, at_rest_key }
    }
}

struct Record {
    token: Digest,
    nonce: [u8; NONCE_LEN],
    ciphertext: Vec<u8>,
}

pub struct EnvelopeStore {
    keys: StoreKeys,
    records: Vec<Record>,
    index: BTreeMap<Digest, Vec<usize>>,
}

impl EnvelopeStore {
    pub fn new(keys: StoreKeys) -> Self {
        Self { keys, records: Vec::new(), index: BTreeMap::new() }
    }

    /// The blind index token for a (type name, subject) pair. One-way in
    /// both arguments for anyone without the index key.
    pub fn index_token(&self, type_name: &str, subject: &Subject) -> Digest {
        let input = framing::concat(&[TOKEN_DOMAIN, type_name.as_bytes(), subject.bytes()]);
        Digest(hash::prf(&self.keys.index_key, &input))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Files an envelope under its own (type, subject); returns the token
    /// it can be fetched by.
    pub fn put(&mut self, envelope: &Envelope, rng: &mut (impl RngCore + CryptoRng)) -> Digest {
        let token = self.index_token(envelope.type_id.name(), &envelope.subject);
        let position = self.records.len();
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let aad = record_aad(&token, position);
        let ciphertext = ChaCha20Poly1305::new(Key::from_slice(&self.keys.at_rest_key))
            .encrypt(
                Nonce::from_slice(&nonce),
                Payload { msg: &envelope.to_bytes(), aad: &aad },
            )
            .expect("encryption is infallible for in-memory buffers");
        self.records.push(Record { token, nonce, ciphertext });
        self.index.entry(token).or_default().push(position);
        token
    }

    /// All envelopes filed under a token, oldest first.
    pub fn fetch_by_token(&self, token: &Digest) -> Result<Vec<Envelope>, StoreError> {
        let Some(positions) = self.index.get(token) else {
            return Ok(Vec::new());
        };
        positions.iter().map(|&p| self.open_record(p)).collect()
    }

    /// Convenience: token computation and fetch in one step.
    pub fn fetch(&self, type_name: &str, subject: &Subject) -> Result<Vec<Envelope>, StoreError> {
        self.fetch_by_token(&self.index_token(type_name, subject))
    }

    fn open_record(&self, position: usize) -> Result<Envelope, StoreError> {
        let record = &self.records[position];
        let aad = record_aad(&record.token, position);
        let plain = ChaCha20Poly1305::new(Key::from_slice(&self.keys.at_rest_key))
            .decrypt(
                Nonce::from_slice(&record.nonce),
                Payload { msg: &record.ciphertext, aad: &aad },
            )
            .map_err(|_| StoreError::Tampered(position))?;
        Envelope::from_bytes(&plain).map_err(|e| StoreError::BadEnvelope(position, e))
    }

    /// Serialises every record. The output contains only tokens, nonces
    /// and ciphertext.
    pub fn to_bytes(&self) -> Vec<u8> {
        let records: Vec<Vec<u8>> = self
            .records
            .iter()
            .map(|r| {
                let mut out = Vec::with_capacity(32 + NONCE_LEN + r.ciphertext.len());
                out.extend_from_slice(r.token.as_bytes());
                out.extend_from_slice(&r.nonce);
                out.extend_from_slice(&r.ciphertext);
                out
            })
            .collect();
        let fields: Vec<&[u8]> = records.iter().map(|r| r.as_slice()).collect();
        framing::encode(STORE_MAGIC, &fields)
    }

    /// Loads a store file, authenticating every record and rebuilding the
    /// index by scan. Any flipped byte anywhere fails the load.
    pub fn from_bytes(keys: StoreKeys, bytes: &[u8]) -> Result<Self, StoreError> {
        let fields = framing::decode(STORE_MAGIC, bytes)?;
        let mut store = Self::new(keys);
        for (position, field) in fields.iter().enumerate() {
            if field.len() < 32 + NONCE_LEN {
                return Err(StoreError::RecordShape(position));
            }
            let token = Digest(field[..32].try_into().expect("length checked"));
            let nonce: [u8; NONCE_LEN] =
                field[32..32 + NONCE_LEN].try_into().expect("length checked");
            store.records.push(Record {
                token,
                nonce,
                ciphertext: field[32 + NONCE_LEN..].to_vec(),
            });
            store.open_record(position)?;
            store.index.entry(token).or_default().push(position);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| StoreError::Io(e.to_string()))
    }

    pub fn open(keys: StoreKeys, path: &Path) -> Result<Self, StoreError> {
        let bytes = std::fs::read(path).map_err(|e| StoreError::Io(e.to_string()))?;
        Self::from_bytes(keys, &bytes)
    }
}

fn record_aad(token: &Digest, position: usize) -> Vec<u8> {
    framing::concat(&[RECORD_DOMAIN, token.as_bytes(), &(position as u64).to_be_bytes()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{kem, sig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::collections::HashMap;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    struct Fixture {
        regulator_pk: kem::WrapPublicKey,
        producer: sig::KeyPair,
    }

    impl Fixture {
        fn new(r: &mut ChaCha20Rng) -> Self {
            Self {
                regulator_pk: kem::WrapKeyPair::generate(r).public(),
                producer: sig::KeyPair::generate(r),
            }
        }

        fn envelope(&self, type_name: &str, vid: [u8; 32], payload: &[u8], r: &mut ChaCha20Rng) -> Envelope {
            Envelope::seal(type_name, Subject::Vid(vid), payload, &self.regulator_pk, &self.producer, r)
                .unwrap()
        }
    }

    fn contains_subsequence(haystack: &[u8], needle: &[u8]) -> bool {
        !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
    }

    #[test]
    fn put_fetch_round_trip() {
        let mut r = rng(1);
        let fx = Fixture::new(&mut r);
        let mut store = EnvelopeStore::new(StoreKeys::generate(&mut r));

        let a1 = fx.envelope("DT2/MRIScan", [1u8; 32], b"scan one", &mut r);
        let a2 = fx.envelope("DT2/MRIScan", [1u8; 32], b"scan two", &mut r);
        let b = fx.envelope("DT2/MRIScan", [2u8; 32], b"other person", &mut r);
        let c = fx.envelope("DT4/DiagnosisReport", [1u8; 32], b"same person, other type", &mut r);
        for e in [&a1, &a2, &b, &c] {
            store.put(e, &mut r);
        }

        let got = store.fetch("DT2/MRIScan", &Subject::Vid([1u8; 32])).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].to_bytes(), a1.to_bytes());
        assert_eq!(got[1].to_bytes(), a2.to_bytes());
        assert_eq!(store.fetch("DT2/MRIScan", &Subject::Vid([2u8; 32])).unwrap().len(), 1);
        assert_eq!(store.fetch("DT4/DiagnosisReport", &Subject::Vid([1u8; 32])).unwrap().len(), 1);
        assert!(store.fetch("DT4/DiagnosisReport", &Subject::Vid([2u8; 32])).unwrap().is_empty());
    }

    #[test]
    fn file_round_trip_rebuilds_the_index() {
        let mut r = rng(2);
        let fx = Fixture::new(&mut r);
        let keys = StoreKeys::generate(&mut r);
        let mut store = EnvelopeStore::new(keys.clone());
        let e = fx.envelope("DT2/MRIScan", [3u8; 32], b"payload", &mut r);
        store.put(&e, &mut r);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.sto");
        store.save(&path).unwrap();
        let reloaded = EnvelopeStore::open(keys, &path).unwrap();
        assert_eq!(reloaded.len(), 1);
        let got = reloaded.fetch("DT2/MRIScan", &Subject::Vid([3u8; 32])).unwrap();
        assert_eq!(got[0].to_bytes(), e.to_bytes());
    }

    #[test]
    fn file_leaks_neither_subjects_nor_payloads_nor_envelope_bytes() {
        let mut r = rng(3);
        let fx = Fixture::new(&mut r);
        let mut store = EnvelopeStore::new(StoreKeys::generate(&mut r));
        let vid = [0xabu8; 32];
        let payload = b"a distinctly recognisable plaintext payload";
        let e = fx.envelope("DT2/MRIScan", vid, payload, &mut r);
        store.put(&e, &mut r);
        let file = store.to_bytes();

        assert!(!contains_subsequence(&file, &vid));
        assert!(!contains_subsequence(&file, payload));
        // Even the sealed envelope (already ciphertext) is hidden by the
        // at-rest layer, so files from two stores are uncorrelatable.
        assert!(!contains_subsequence(&file, &e.to_bytes()));
        assert!(!contains_subsequence(&file, b"MRIScan"));
    }

    #[test]
    fn wrong_index_key_finds_nothing() {
        let mut r = rng(4);
        let fx = Fixture::new(&mut r);
        let keys = StoreKeys::generate(&mut r);
        let mut store = EnvelopeStore::new(keys.clone());
        let e = fx.envelope("DT2/MRIScan", [5u8; 32], b"x", &mut r);
        store.put(&e, &mut r);

        let mut other = keys;
        other.index_key[0] ^= 1;
        let stranger = EnvelopeStore::from_bytes(other, &store.to_bytes());
        // The at-rest key still matches, so the file loads; but without the
        // index key the stranger cannot form the right token.
        let stranger = stranger.unwrap();
        assert!(stranger.fetch("DT2/MRIScan", &Subject::Vid([5u8; 32])).unwrap().is_empty());
    }

    #[test]
    fn every_flipped_byte_fails_the_load() {
        let mut r = rng(5);
        let fx = Fixture::new(&mut r);
        let keys = StoreKeys::generate(&mut r);
        let mut store = EnvelopeStore::new(keys.clone());
        store.put(&fx.envelope("DT2/MRIScan", [6u8; 32], b"short", &mut r), &mut r);
        let file = store.to_bytes();
        for i in 0..file.len() {
            let mut bad = file.clone();
            bad[i] ^= 0x40;
            assert!(
                EnvelopeStore::from_bytes(keys.clone(), &bad).is_err(),
                "flip at byte {i} loaded cleanly"
            );
        }
    }

    #[test]
    fn records_cannot_be_reordered() {
        let mut r = rng(6);
        let fx = Fixture::new(&mut r);
        let keys = StoreKeys::generate(&mut r);
        let mut store = EnvelopeStore::new(keys.clone());
        store.put(&fx.envelope("DT2/MRIScan", [7u8; 32], b"first", &mut r), &mut r);
        store.put(&fx.envelope("DT2/MRIScan", [7u8; 32], b"second", &mut r), &mut r);
        let mut fields = framing::decode(STORE_MAGIC, &store.to_bytes()).unwrap();
        fields.swap(0, 1);
        let refs: Vec<&[u8]> = fields.iter().map(|f| f.as_slice()).collect();
        let swapped = framing::encode(STORE_MAGIC, &refs);
        match EnvelopeStore::from_bytes(keys, &swapped) {
            Err(StoreError::Tampered(0)) => {}
            other => panic!("expected Tampered(0), got {:?}", other.err()),
        }
    }

    proptest! {
        /// The store behaves exactly like a map from (type, subject) to a
        /// list of envelope bytes, including across a save/load cycle.
        #[test]
        fn matches_reference_model(ops in proptest::collection::vec((0u8..3, 0u8..4, 0u8..3), 1..40), seed in 0u64..1000) {
            let mut r = rng(seed);
            let fx = Fixture::new(&mut r);
            let keys = StoreKeys::generate(&mut r);
            let mut store = EnvelopeStore::new(keys.clone());
            let mut model: HashMap<(String, [u8; 32]), Vec<Vec<u8>>> = HashMap::new();
            let types = ["DT1/A", "DT2/B", "DT4/C"];

            for (i, (type_i, vid_i, action)) in ops.iter().enumerate() {
                let type_name = types[*type_i as usize];
                let vid = [*vid_i; 32];
                match action {
                    0 | 1 => {
                        let payload = format!("payload {i}");
                        let e = fx.envelope(type_name, vid, payload.as_bytes(), &mut r);
                        store.put(&e, &mut r);
                        model.entry((type_name.into(), vid)).or_default().push(e.to_bytes());
                    }
                    _ => {
                        let got: Vec<Vec<u8>> = store
                            .fetch(type_name, &Subject::Vid(vid))
                            .unwrap()
                            .iter()
                            .map(|e| e.to_bytes())
                            .collect();
                        let want = model.get(&(type_name.into(), vid)).cloned().unwrap_or_default();
                        prop_assert_eq!(got, want);
                    }
                }
            }

            // Reload from bytes and check the whole model agrees.
            let reloaded = EnvelopeStore::from_bytes(keys, &store.to_bytes()).unwrap();
            for ((type_name, vid), want) in &model {
                let got: Vec<Vec<u8>> = reloaded
                    .fetch(type_name, &Subject::Vid(*vid))
                    .unwrap()
                    .iter()
                    .map(|e| e.to_bytes())
                    .collect();
                prop_assert_eq!(&got, want);
            }
        }
    }
}
