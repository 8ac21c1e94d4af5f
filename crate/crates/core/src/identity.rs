//! Virtual identities and anonymous credentials.
//!
//! Every individual holds one master secret and presents a different
//! *virtual identity* (vid) to every organisation, derived as
//! `PRF(master_secret, org_tag || counter)`. Two organisations comparing
//! their user lists see unrelated 32-byte values; only the issuing
//! authority — and a regulator-approved linking request — can connect them.
//!
//! Attributes certified by one organisation are carried to another as
//! credentials signed blind: the destination vid never appears in the
//! issuer's transcript, so even full collusion between issuer and verifier
//! cannot join their records (see [`crate::crypto::blind`]).

use crate::crypto::blind::{BlindError, BlindSigningKey, BlindVerifyKey, BlindedMessage, RsaSignature};
use crate::crypto::envelope::{Subject, VID_LEN};
use crate::crypto::hash::{self, Digest};
use crate::crypto::{kem, prf, sig};
use crate::framing::{self, FrameError};
use rand::{CryptoRng, RngCore};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

pub const CREDENTIAL_MAGIC: [u8; 4] = *b"CRD1";
const CREDENTIAL_DOMAIN: &[u8] = b"pbd.credential.v1";
const ISSUANCE_DOMAIN: &[u8] = b"pbd.issuance.v1";
const SIGNING_SUBKEY_DOMAIN: &[u8] = b"pbd.vid.signing.v1";
const KEY_ATTR_PREFIX: &str = "key:";

pub type VidValue = [u8; VID_LEN];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdentityError {
    #[error("individual already enrolled under this dedup key")]
    DuplicateEnrollment,
    #[error("master identity unknown to the authority")]
    UnknownMaster,
    #[error("claimed vid does not derive from the master identity")]
    DerivationMismatch,
    #[error("proof-of-possession signature invalid")]
    BadPossessionProof,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IssueError {
    #[error("evidence rejected: {0}")]
    EvidenceRejected(&'static str),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LinkError {
    #[error("linking denied by regulator")]
    AccessDenied,
    #[error("an encrypted identifier failed to decrypt")]
    DecryptFail,
    #[error("decrypted identifier is not an enrolled master identity")]
    UnknownMaster,
}

/// The secret an individual's agent holds. The authority retains a copy of
/// the secret at enrollment (it derives vids on request and answers
/// derivation checks); the `master_id` digest is the shareable handle.
pub struct MasterIdentity {
    master_secret: [u8; 32],
    pub master_id: Digest,
}

impl MasterIdentity {
    fn from_secret(master_secret: [u8; 32]) -> Self {
        let master_id = hash::hash(&master_secret);
        Self { master_secret, master_id }
    }

    /// Derives the vid this individual presents to `org_tag`, at the given
    /// rotation counter. Deterministic: the same inputs always produce the
    /// same vid, so an agent needs no state beyond the master secret.
    pub fn derive_vid(&self, org_tag: &str, counter: u64) -> VirtualIdentity {
        let mut input = Vec::with_capacity(org_tag.len() + 8);
        input.extend_from_slice(org_tag.as_bytes());
        input.extend_from_slice(&counter.to_be_bytes());
        VirtualIdentity {
            value: prf(&self.master_secret, &input),
            org_tag: org_tag.to_string(),
            counter,
        }
    }

    /// The signing keypair the agent uses when acting *as* a given vid.
    /// Derived under a separate PRF key so vid values and signing seeds
    /// can never collide.
    pub fn vid_signing_key(&self, vid: &VirtualIdentity) -> sig::KeyPair {
        let subkey = prf(&self.master_secret, SIGNING_SUBKEY_DOMAIN);
        sig::KeyPair::from_seed(prf(&subkey, &vid.value))
    }

    /// Randomised encryption of this individual's master handle to the
    /// authority, attached to transactions that may later need regulated
    /// linking. Two encryptions of the same identity are unrelated bytes.
    pub fn enc_uid(
        &self,
        authority: &kem::WrapPublicKey,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Vec<u8> {
        authority.wrap(self.master_id.as_bytes(), rng)
    }
}

impl std::fmt::Debug for MasterIdentity {
    /// The secret never prints; only the public handle does.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "MasterIdentity({})", self.master_id.short())
    }
}

/// A per-organisation identity.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct VirtualIdentity {
    pub value: VidValue,
    pub org_tag: String,
    pub counter: u64,
}

impl VirtualIdentity {
    pub fn subject(&self) -> Subject {
        Subject::Vid(self.value)
    }

    pub fn hex(&self) -> String {
        hex::encode(self.value)
    }
}

/// An attribute about a vid, certified by an issuer's RSA-FDH signature.
/// Whether it was issued directly or blind is invisible in the bytes.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Credential {
    pub subject_vid: VidValue,
    pub attribute: String,
    pub issuer: String,
    pub signature: RsaSignature,
}

impl Credential {
    pub fn message_bytes(subject_vid: &VidValue, attribute: &str, issuer: &str) -> Vec<u8> {
        framing::concat(&[CREDENTIAL_DOMAIN, subject_vid, attribute.as_bytes(), issuer.as_bytes()])
    }

    pub fn verify(&self, issuer_key: &BlindVerifyKey) -> bool {
        issuer_key.verify(
            &Self::message_bytes(&self.subject_vid, &self.attribute, &self.issuer),
            &self.signature,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        framing::encode(
            CREDENTIAL_MAGIC,
            &[&self.subject_vid, self.attribute.as_bytes(), self.issuer.as_bytes(), &self.signature.0],
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Credential, FrameError> {
        let fields = framing::decode_exact(CREDENTIAL_MAGIC, bytes, 4)?;
        let subject_vid = framing::fixed::<VID_LEN>(0, &fields[0])?;
        let attribute = String::from_utf8(fields[1].clone())
            .map_err(|_| FrameError::BadField { index: 1, reason: "not UTF-8".into() })?;
        let issuer = String::from_utf8(fields[2].clone())
            .map_err(|_| FrameError::BadField { index: 2, reason: "not UTF-8".into() })?;
        Ok(Credential { subject_vid, attribute, issuer, signature: RsaSignature(fields[3].clone()) })
    }
}

/// Encodes a verification key as a credential attribute, used by the
/// authority's vid-key certificates.
pub fn key_attribute(pk: &sig::VerifyKey) -> String {
    format!("{KEY_ATTR_PREFIX}{}", hex::encode(pk.to_bytes()))
}

/// Recovers the verification key from a key certificate's attribute.
pub fn key_from_attribute(attribute: &str) -> Option<sig::VerifyKey> {
    let hex_part = attribute.strip_prefix(KEY_ATTR_PREFIX)?;
    let bytes = hex::decode(hex_part).ok()?;
    sig::VerifyKey::from_bytes(&bytes).ok()
}

// ---------------------------------------------------------------------------
// Blind issuance, author side
// ---------------------------------------------------------------------------

/// The author's half-finished credential: the blinded message that went to
/// the issuer, plus everything needed to assemble the credential once the
/// issuer's response arrives.
pub struct PendingCredential {
    blinded: BlindedMessage,
    subject_vid: VidValue,
    attribute: String,
    issuer: String,
}

impl PendingCredential {
    /// What travels to the issuer. Uniformly distributed regardless of the
    /// destination vid, which is the unlinkability property.
    pub fn blinded_value(&self) -> &[u8] {
        &self.blinded.value
    }

    pub fn finish(
        self,
        issuer_key: &BlindVerifyKey,
        response: &[u8],
    ) -> Result<Credential, BlindError> {
        let signature = issuer_key.unblind(response, &self.blinded)?;
        Ok(Credential {
            subject_vid: self.subject_vid,
            attribute: self.attribute,
            issuer: self.issuer,
            signature,
        })
    }
}

/// Starts blind issuance of `attribute` onto `dest_vid` (the vid the
/// author uses at the verifying organisation — the issuer never sees it).
pub fn begin_blind_issuance(
    issuer: &str,
    issuer_key: &BlindVerifyKey,
    dest_vid: &VidValue,
    attribute: &str,
    rng: &mut (impl RngCore + CryptoRng),
) -> PendingCredential {
    let message = Credential::message_bytes(dest_vid, attribute, issuer);
    PendingCredential {
        blinded: issuer_key.blind(&message, rng),
        subject_vid: *dest_vid,
        attribute: attribute.to_string(),
        issuer: issuer.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Issuers
// ---------------------------------------------------------------------------

/// What an author presents to convince an issuer to sign: the vid under
/// which the issuer already knows them, and a signature over the issuance
/// payload by that vid's certified key.
pub struct Evidence {
    pub presented_vid: VidValue,
    pub signature: sig::Signature,
}

pub fn issuance_signing_input(issuer: &str, attribute: &str, payload: &[u8]) -> Vec<u8> {
    framing::concat(&[ISSUANCE_DOMAIN, issuer.as_bytes(), attribute.as_bytes(), payload])
}

/// One row of the issuer's view of a blind issuance: everything the issuer
/// could ever write down. Collusion tests join these against verifier-side
/// presentation transcripts.
#[derive(Clone, Debug)]
pub struct IssuanceRecord {
    pub presented_vid: VidValue,
    pub attribute: String,
    pub blinded_value: Vec<u8>,
    pub response: Vec<u8>,
}

/// An attribute-certifying organisation (an accreditation body, an
/// approver of scheme beneficiaries, a bank's KYC desk).
pub struct Issuer {
    pub name: String,
    key: BlindSigningKey,
    /// Subjects this issuer knows, by their vid at this issuer, with the
    /// key they sign as and the attributes the issuer will certify.
    records: BTreeMap<VidValue, (sig::VerifyKey, BTreeSet<String>)>,
    transcript: Vec<IssuanceRecord>,
}

impl Issuer {
    pub fn new(name: &str, modulus_bits: u64, rng: &mut (impl RngCore + CryptoRng)) -> Self {
        Self {
            name: name.to_string(),
            key: BlindSigningKey::generate(modulus_bits, rng),
            records: BTreeMap::new(),
            transcript: Vec::new(),
        }
    }

    pub fn public_key(&self) -> BlindVerifyKey {
        self.key.verify_key()
    }

    /// Registers a subject the issuer knows first-hand and the attributes
    /// it is willing to certify about them.
    pub fn register_subject(&mut self, vid: VidValue, key: sig::VerifyKey, attributes: &[&str]) {
        let set = attributes.iter().map(|a| a.to_string()).collect();
        self.records.insert(vid, (key, set));
    }

    /// Blind issuance: checks the evidence, signs the blinded value, and
    /// records the transcript row. The destination vid is not an input.
    pub fn issue_blind(
        &mut self,
        blinded_value: &[u8],
        attribute: &str,
        evidence: &Evidence,
    ) -> Result<Vec<u8>, IssueError> {
        self.check_evidence(attribute, blinded_value, evidence)?;
        let response = self
            .key
            .sign_blinded(blinded_value)
            .map_err(|_| IssueError::EvidenceRejected("malformed blinded value"))?;
        self.transcript.push(IssuanceRecord {
            presented_vid: evidence.presented_vid,
            attribute: attribute.to_string(),
            blinded_value: blinded_value.to_vec(),
            response: response.clone(),
        });
        Ok(response)
    }

    /// Direct issuance onto the vid the issuer already knows. Yields bytes
    /// indistinguishable from blind issuance of the same message.
    pub fn issue_direct(
        &mut self,
        subject_vid: &VidValue,
        attribute: &str,
        evidence: &Evidence,
    ) -> Result<Credential, IssueError> {
        if evidence.presented_vid != *subject_vid {
            return Err(IssueError::EvidenceRejected("direct issuance must target the presented vid"));
        }
        self.check_evidence(attribute, subject_vid, evidence)?;
        let signature = self.key.sign(&Credential::message_bytes(subject_vid, attribute, &self.name));
        Ok(Credential {
            subject_vid: *subject_vid,
            attribute: attribute.to_string(),
            issuer: self.name.clone(),
            signature,
        })
    }

    fn check_evidence(
        &self,
        attribute: &str,
        payload: &[u8],
        evidence: &Evidence,
    ) -> Result<(), IssueError> {
        let Some((key, attributes)) = self.records.get(&evidence.presented_vid) else {
            return Err(IssueError::EvidenceRejected("presenter unknown to issuer"));
        };
        if !attributes.contains(attribute) {
            return Err(IssueError::EvidenceRejected("attribute not certifiable for presenter"));
        }
        let msg = issuance_signing_input(&self.name, attribute, payload);
        if !key.verify(&msg, &evidence.signature) {
            return Err(IssueError::EvidenceRejected("presenter signature invalid"));
        }
        Ok(())
    }

    /// Everything this issuer could hand to a colluding verifier.
    pub fn transcript(&self) -> &[IssuanceRecord] {
        &self.transcript
    }
}

// ---------------------------------------------------------------------------
// The identity authority
// ---------------------------------------------------------------------------

/// A regulator's verdict on one linking request. Produced outside this
/// module; linking proceeds only on `Grant` with a matching purpose.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum LinkDecision {
    Grant { purpose: String },
    Deny,
}

/// A request to connect two vids, citing the encrypted identifiers that
/// were attached to their transactions.
pub struct LinkRequest {
    pub requesting_authority: String,
    pub vid_a: VidValue,
    pub enc_uid_a: Vec<u8>,
    pub vid_b: VidValue,
    pub enc_uid_b: Vec<u8>,
    pub purpose: String,
}

/// The auditable outcome of a successful link.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct LinkRecord {
    pub requesting_authority: String,
    pub vid_a: VidValue,
    pub vid_b: VidValue,
    pub purpose: String,
    pub timestamp: u64,
}

/// One derivation check, logged without the vid itself.
#[derive(Clone, Debug)]
pub struct CheckRecord {
    pub master_id: Digest,
    pub org_tag: String,
    pub counter: u64,
    pub outcome: bool,
}

/// The enrolling authority: sole issuer of master identities, verifier of
/// vid derivations, certifier of vid signing keys, and the only party able
/// to decrypt attached identifiers for regulated linking.
pub struct IdentityAuthority {
    pub name: String,
    link_kem: kem::WrapKeyPair,
    cert_key: BlindSigningKey,
    enrolled: BTreeMap<[u8; 32], [u8; 32]>,
    dedup: BTreeSet<String>,
    check_log: Vec<CheckRecord>,
    links: Vec<LinkRecord>,
}

impl IdentityAuthority {
    pub fn new(name: &str, modulus_bits: u64, rng: &mut (impl RngCore + CryptoRng)) -> Self {
        Self {
            name: name.to_string(),
            link_kem: kem::WrapKeyPair::generate(rng),
            cert_key: BlindSigningKey::generate(modulus_bits, rng),
            enrolled: BTreeMap::new(),
            dedup: BTreeSet::new(),
            check_log: Vec::new(),
            links: Vec::new(),
        }
    }

    /// Key under which agents encrypt attached identifiers.
    pub fn link_public_key(&self) -> kem::WrapPublicKey {
        self.link_kem.public()
    }

    /// Key under which vid-key certificates verify.
    pub fn cert_public_key(&self) -> BlindVerifyKey {
        self.cert_key.verify_key()
    }

    /// Enrolls one individual. `dedup_key` stands in for the out-of-band
    /// uniqueness check (biometric, registry lookup) that prevents one
    /// person from acquiring two master identities.
    pub fn enroll(
        &mut self,
        dedup_key: &str,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Result<MasterIdentity, IdentityError> {
        if !self.dedup.insert(dedup_key.to_string()) {
            return Err(IdentityError::DuplicateEnrollment);
        }
        let mut master_secret = [0u8; 32];
        rng.fill_bytes(&mut master_secret);
        let identity = MasterIdentity::from_secret(master_secret);
        self.enrolled.insert(*identity.master_id.as_bytes(), master_secret);
        Ok(MasterIdentity::from_secret(master_secret))
    }

    /// Confirms (or refutes) that `vid` is the derivation of the given
    /// master identity for `(org_tag, counter)`. The check is logged; the
    /// vid itself is not retained.
    pub fn check_derivation(
        &mut self,
        vid: &VidValue,
        master_id: &Digest,
        org_tag: &str,
        counter: u64,
    ) -> Result<bool, IdentityError> {
        let secret = self.enrolled.get(master_id.as_bytes()).ok_or(IdentityError::UnknownMaster)?;
        let expected = MasterIdentity::from_secret(*secret).derive_vid(org_tag, counter);
        let outcome = expected.value == *vid;
        self.check_log.push(CheckRecord {
            master_id: *master_id,
            org_tag: org_tag.to_string(),
            counter,
            outcome,
        });
        Ok(outcome)
    }

    /// Certifies that `pk` is the signing key of `vid`, after verifying the
    /// derivation and a proof of possession (a self-signature over the
    /// certificate message). The certificate is an ordinary credential with
    /// a `key:`-prefixed attribute.
    pub fn certify_vid_key(
        &mut self,
        master_id: &Digest,
        org_tag: &str,
        counter: u64,
        vid: &VidValue,
        pk: &sig::VerifyKey,
        proof: &sig::Signature,
    ) -> Result<Credential, IdentityError> {
        if !self.check_derivation(vid, master_id, org_tag, counter)? {
            return Err(IdentityError::DerivationMismatch);
        }
        let attribute = key_attribute(pk);
        let message = Credential::message_bytes(vid, &attribute, &self.name);
        if !pk.verify(&message, proof) {
            return Err(IdentityError::BadPossessionProof);
        }
        Ok(Credential {
            subject_vid: *vid,
            attribute,
            issuer: self.name.clone(),
            signature: self.cert_key.sign(&message),
        })
    }

    /// Connects two vids iff both attached identifiers decrypt to the same
    /// enrolled master identity *and* a regulator granted the purpose.
    /// Returns `Ok(None)` when the identifiers belong to different people —
    /// that is an answer, not an error.
    pub fn link_identities(
        &mut self,
        request: &LinkRequest,
        decision: &LinkDecision,
        now_s: u64,
    ) -> Result<Option<LinkRecord>, LinkError> {
        match decision {
            LinkDecision::Grant { purpose } if *purpose == request.purpose => {}
            _ => return Err(LinkError::AccessDenied),
        }
        let uid_a = self.link_kem.unwrap(&request.enc_uid_a).map_err(|_| LinkError::DecryptFail)?;
        let uid_b = self.link_kem.unwrap(&request.enc_uid_b).map_err(|_| LinkError::DecryptFail)?;
        let known = |uid: &[u8]| {
            <[u8; 32]>::try_from(uid).ok().filter(|arr| self.enrolled.contains_key(arr))
        };
        let (Some(a), Some(b)) = (known(&uid_a), known(&uid_b)) else {
            return Err(LinkError::UnknownMaster);
        };
        if a != b {
            return Ok(None);
        }
        let record = LinkRecord {
            requesting_authority: request.requesting_authority.clone(),
            vid_a: request.vid_a,
            vid_b: request.vid_b,
            purpose: request.purpose.clone(),
            timestamp: now_s,
        };
        self.links.push(record.clone());
        Ok(Some(record))
    }

    pub fn link_records(&self) -> &[LinkRecord] {
        &self.links
    }

    pub fn check_records(&self) -> &[CheckRecord] {
        &self.check_log
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const TEST_BITS: u64 = 256;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn authority(seed: u64) -> (IdentityAuthority, ChaCha20Rng) {
        let mut r = rng(seed);
        let a = IdentityAuthority::new("identity-authority", TEST_BITS, &mut r);
        (a, r)
    }

    #[test]
    fn vid_derivation_is_deterministic_and_separated() {
        let (mut auth, mut r) = authority(1);
        let person = auth.enroll("person-1", &mut r).unwrap();
        let a1 = person.derive_vid("HospitalA", 0);
        let a2 = person.derive_vid("HospitalA", 0);
        assert_eq!(a1, a2);
        assert_ne!(a1.value, person.derive_vid("HospitalB", 0).value);
        assert_ne!(a1.value, person.derive_vid("HospitalA", 1).value);
    }

    #[test]
    fn vids_pairwise_distinct_across_population() {
        let (mut auth, mut r) = authority(2);
        let mut seen = BTreeSet::new();
        for i in 0..200 {
            let person = auth.enroll(&format!("p{i}"), &mut r).unwrap();
            for org in ["OrgA", "OrgB", "OrgC"] {
                assert!(seen.insert(person.derive_vid(org, 0).value), "vid collision");
            }
        }
    }

    #[test]
    fn enrollment_dedup() {
        let (mut auth, mut r) = authority(3);
        auth.enroll("same-person", &mut r).unwrap();
        assert_eq!(
            auth.enroll("same-person", &mut r).unwrap_err(),
            IdentityError::DuplicateEnrollment
        );
    }

    #[test]
    fn derivation_check_answers() {
        let (mut auth, mut r) = authority(4);
        let person = auth.enroll("p", &mut r).unwrap();
        let vid = person.derive_vid("OrgA", 3);
        assert_eq!(auth.check_derivation(&vid.value, &person.master_id, "OrgA", 3), Ok(true));
        assert_eq!(auth.check_derivation(&vid.value, &person.master_id, "OrgA", 4), Ok(false));
        assert_eq!(auth.check_derivation(&vid.value, &person.master_id, "OrgB", 3), Ok(false));
        let unknown = hash::hash(b"never enrolled");
        assert_eq!(
            auth.check_derivation(&vid.value, &unknown, "OrgA", 3),
            Err(IdentityError::UnknownMaster)
        );
        // Checks are logged without the vid.
        assert_eq!(auth.check_records().len(), 3);
    }

    #[test]
    fn key_certificates() {
        let (mut auth, mut r) = authority(5);
        let person = auth.enroll("p", &mut r).unwrap();
        let vid = person.derive_vid("OrgA", 0);
        let kp = person.vid_signing_key(&vid);
        let attribute = key_attribute(&kp.public());
        let proof = kp.sign(&Credential::message_bytes(&vid.value, &attribute, "identity-authority"));
        let cert = auth
            .certify_vid_key(&person.master_id, "OrgA", 0, &vid.value, &kp.public(), &proof)
            .unwrap();
        assert!(cert.verify(&auth.cert_public_key()));
        assert_eq!(key_from_attribute(&cert.attribute).unwrap(), kp.public());

        // Wrong derivation claim.
        let err = auth
            .certify_vid_key(&person.master_id, "OrgA", 1, &vid.value, &kp.public(), &proof)
            .unwrap_err();
        assert_eq!(err, IdentityError::DerivationMismatch);

        // Key without possession of the secret half.
        let stranger = sig::KeyPair::generate(&mut r);
        let err = auth
            .certify_vid_key(&person.master_id, "OrgA", 0, &vid.value, &stranger.public(), &proof)
            .unwrap_err();
        assert_eq!(err, IdentityError::BadPossessionProof);
    }

    #[test]
    fn per_vid_signing_keys_are_distinct_and_stable() {
        let (mut auth, mut r) = authority(6);
        let person = auth.enroll("p", &mut r).unwrap();
        let va = person.derive_vid("OrgA", 0);
        let vb = person.derive_vid("OrgB", 0);
        assert_ne!(person.vid_signing_key(&va).public(), person.vid_signing_key(&vb).public());
        assert_eq!(person.vid_signing_key(&va).public(), person.vid_signing_key(&va).public());
        // Signing seeds live in a different PRF domain than vid values.
        assert_ne!(person.vid_signing_key(&va).public().to_bytes(), va.value);
    }

    fn issuer_with_subject(
        seed: u64,
    ) -> (Issuer, MasterIdentity, VirtualIdentity, sig::KeyPair, ChaCha20Rng) {
        let (mut auth, mut r) = authority(seed);
        let person = auth.enroll("p", &mut r).unwrap();
        let mut issuer = Issuer::new("medical-council", TEST_BITS, &mut r);
        let vid_at_issuer = person.derive_vid("medical-council", 0);
        let key = person.vid_signing_key(&vid_at_issuer);
        issuer.register_subject(vid_at_issuer.value, key.public(), &["role:doctor"]);
        (issuer, person, vid_at_issuer, key, r)
    }

    #[test]
    fn blind_issuance_round_trip_and_byte_equality() {
        let (mut issuer, person, vid_at_issuer, key, mut r) = issuer_with_subject(7);
        let dest_vid = person.derive_vid("HospitalA", 0);
        let pending = begin_blind_issuance(
            "medical-council",
            &issuer.public_key(),
            &dest_vid.value,
            "role:doctor",
            &mut r,
        );
        let evidence = Evidence {
            presented_vid: vid_at_issuer.value,
            signature: key.sign(&issuance_signing_input(
                "medical-council",
                "role:doctor",
                pending.blinded_value(),
            )),
        };
        let response = issuer.issue_blind(pending.blinded_value(), "role:doctor", &evidence).unwrap();
        let credential = pending.finish(&issuer.public_key(), &response).unwrap();
        assert!(credential.verify(&issuer.public_key()));
        assert_eq!(credential.subject_vid, dest_vid.value);

        // The issuer's transcript never saw the destination vid...
        for row in issuer.transcript() {
            assert_ne!(row.presented_vid, dest_vid.value);
            assert!(!row.blinded_value.windows(32).any(|w| w == dest_vid.value));
        }

        // ...and the credential is byte-identical to a direct issuance of
        // the same message, so the path taken is invisible downstream.
        let mut direct_issuer = issuer;
        let dest_key = person.vid_signing_key(&dest_vid);
        direct_issuer.register_subject(dest_vid.value, dest_key.public(), &["role:doctor"]);
        let direct_evidence = Evidence {
            presented_vid: dest_vid.value,
            signature: dest_key.sign(&issuance_signing_input(
                "medical-council",
                "role:doctor",
                &dest_vid.value,
            )),
        };
        let direct = direct_issuer.issue_direct(&dest_vid.value, "role:doctor", &direct_evidence).unwrap();
        assert_eq!(direct.signature, credential.signature);
    }

    #[test]
    fn issuance_evidence_rejections() {
        let (mut issuer, person, vid_at_issuer, key, mut r) = issuer_with_subject(8);
        let dest = person.derive_vid("HospitalA", 0);
        let pending = begin_blind_issuance(
            "medical-council",
            &issuer.public_key(),
            &dest.value,
            "role:doctor",
            &mut r,
        );
        let good_sig = key.sign(&issuance_signing_input(
            "medical-council",
            "role:doctor",
            pending.blinded_value(),
        ));

        // Unknown presenter.
        let unknown = Evidence { presented_vid: [9u8; 32], signature: good_sig };
        assert!(issuer.issue_blind(pending.blinded_value(), "role:doctor", &unknown).is_err());

        // Attribute the issuer will not certify for this subject.
        let evidence = Evidence { presented_vid: vid_at_issuer.value, signature: good_sig };
        assert!(issuer.issue_blind(pending.blinded_value(), "role:surgeon", &evidence).is_err());

        // Signature by the wrong key.
        let impostor = sig::KeyPair::generate(&mut r);
        let bad = Evidence {
            presented_vid: vid_at_issuer.value,
            signature: impostor.sign(&issuance_signing_input(
                "medical-council",
                "role:doctor",
                pending.blinded_value(),
            )),
        };
        assert!(issuer.issue_blind(pending.blinded_value(), "role:doctor", &bad).is_err());
    }

    #[test]
    fn credential_wire_round_trip_and_tamper() {
        let (mut issuer, person, vid_at_issuer, key, _r) = issuer_with_subject(9);
        let evidence = Evidence {
            presented_vid: vid_at_issuer.value,
            signature: key.sign(&issuance_signing_input(
                "medical-council",
                "role:doctor",
                &vid_at_issuer.value,
            )),
        };
        let cred = issuer.issue_direct(&vid_at_issuer.value, "role:doctor", &evidence).unwrap();
        let bytes = cred.to_bytes();
        assert_eq!(&bytes[..4], b"CRD1");
        let back = Credential::from_bytes(&bytes).unwrap();
        assert_eq!(back, cred);
        assert!(back.verify(&issuer.public_key()));

        // Re-targeting the credential to another vid breaks it.
        let mut stolen = back;
        stolen.subject_vid = person.derive_vid("Elsewhere", 0).value;
        assert!(!stolen.verify(&issuer.public_key()));
    }

    #[test]
    fn linking_same_master_with_grant() {
        let (mut auth, mut r) = authority(10);
        let person = auth.enroll("p", &mut r).unwrap();
        let vid_a = person.derive_vid("OrgA", 0);
        let vid_b = person.derive_vid("OrgB", 0);
        let request = LinkRequest {
            requesting_authority: "tax-office".into(),
            vid_a: vid_a.value,
            enc_uid_a: person.enc_uid(&auth.link_public_key(), &mut r),
            vid_b: vid_b.value,
            enc_uid_b: person.enc_uid(&auth.link_public_key(), &mut r),
            purpose: "fraud-investigation".into(),
        };
        let grant = LinkDecision::Grant { purpose: "fraud-investigation".into() };
        let record = auth.link_identities(&request, &grant, 1000).unwrap().unwrap();
        assert_eq!((record.vid_a, record.vid_b), (vid_a.value, vid_b.value));
        assert_eq!(auth.link_records().len(), 1);

        // Deny, and purpose mismatch, both refuse outright.
        assert_eq!(
            auth.link_identities(&request, &LinkDecision::Deny, 1000).unwrap_err(),
            LinkError::AccessDenied
        );
        let wrong = LinkDecision::Grant { purpose: "curiosity".into() };
        assert_eq!(auth.link_identities(&request, &wrong, 1000).unwrap_err(), LinkError::AccessDenied);
    }

    #[test]
    fn linking_different_masters_is_a_negative_answer() {
        let (mut auth, mut r) = authority(11);
        let p1 = auth.enroll("p1", &mut r).unwrap();
        let p2 = auth.enroll("p2", &mut r).unwrap();
        let request = LinkRequest {
            requesting_authority: "tax-office".into(),
            vid_a: p1.derive_vid("OrgA", 0).value,
            enc_uid_a: p1.enc_uid(&auth.link_public_key(), &mut r),
            vid_b: p2.derive_vid("OrgB", 0).value,
            enc_uid_b: p2.enc_uid(&auth.link_public_key(), &mut r),
            purpose: "fraud-investigation".into(),
        };
        let grant = LinkDecision::Grant { purpose: "fraud-investigation".into() };
        assert_eq!(auth.link_identities(&request, &grant, 0).unwrap(), None);
        assert!(auth.link_records().is_empty());
    }

    #[test]
    fn linking_garbage_fails_loudly() {
        let (mut auth, mut r) = authority(12);
        let person = auth.enroll("p", &mut r).unwrap();
        let mut bad = person.enc_uid(&auth.link_public_key(), &mut r);
        bad[40] ^= 1;
        let request = LinkRequest {
            requesting_authority: "x".into(),
            vid_a: [1u8; 32],
            enc_uid_a: bad,
            vid_b: [2u8; 32],
            enc_uid_b: person.enc_uid(&auth.link_public_key(), &mut r),
            purpose: "p".into(),
        };
        let grant = LinkDecision::Grant { purpose: "p".into() };
        assert_eq!(auth.link_identities(&request, &grant, 0).unwrap_err(), LinkError::DecryptFail);
    }

    #[test]
    fn enc_uid_is_randomised() {
        let (mut auth, mut r) = authority(13);
        let person = auth.enroll("p", &mut r).unwrap();
        let a = person.enc_uid(&auth.link_public_key(), &mut r);
        let b = person.enc_uid(&auth.link_public_key(), &mut r);
        assert_ne!(a, b, "two encryptions of the same identifier must differ");
    }
}
