//! The regulator: approval of TEs, custody of consent and approval facts,
//! and the online authorization gate that every data access passes through.
//!
//! A regulator holds the private half of the key that all envelopes in its
//! jurisdiction wrap their data keys to. It releases nothing except
//! through [`Regulator::authorize`], whose evaluation order is fixed:
//!
//! 1. attestation — the platform signature, the freshness of the nonce,
//!    and the measurement's presence in the approved registry;
//! 2. requester authentication, for sink TEs (a person is asking);
//! 3. rule selection — first structural match in (priority, id) order;
//! 4. predicate checks — consent and approval facts, under the variable
//!    bindings the patterns produced;
//! 5. key release — the payload key for the *claimed* type and subject,
//!    wrapped to the attested session key.
//!
//! Every decision, grant or deny, lands in the hash-chained audit log.
//! There is no other code path that emits key material.

pub mod audit;
pub mod rules;

use crate::crypto::envelope::{Envelope, Subject, TypeId};
use crate::crypto::hash::{self, Digest};
use crate::crypto::{blind::BlindVerifyKey, kem, sig};
use crate::framing::{self, FrameError};
use crate::identity::{key_from_attribute, Credential, LinkDecision, VidValue};
use crate::pattern::{glob_match, Binding, TypePattern};
use crate::te::{AttestationReport, Measurement, TeInstance, TeManifest, TePlatform};
use crate::trace::{subject_handle, type_handle, vid_handle, Event, EventLog};
use audit::AuditLog;
use rand::{CryptoRng, RngCore};
use rules::{AuthRule, PredicateTemplate, RuleError, TeSelector, Term};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

pub const ACCESS_REQUEST_MAGIC: [u8; 4] = *b"ARQ1";
const CONSENT_DOMAIN: &[u8] = b"pbd.consent.v1";
const REVOKE_DOMAIN: &[u8] = b"pbd.consent.revoke.v1";
const REQUESTER_DOMAIN: &[u8] = b"pbd.requester.v1";

// ---------------------------------------------------------------------------
// Decisions
// ---------------------------------------------------------------------------

/// Why an access request was refused. The reason is part of the decision:
/// callers, audits and tests all see the same vocabulary.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DenyReason {
    /// Attestation failed: bad platform signature or unapproved measurement.
    TeUnknown,
    /// The request nonce was never issued, or was already consumed.
    StaleNonce,
    /// A sink access without a (validly authenticated) human requester.
    RequesterUnauthenticated,
    /// No rule matches the request structurally.
    NoRule,
    /// The selected rule's predicates do not hold.
    PredicateMissing,
    /// A consent matching the predicate exists but its expiry has passed.
    ExpiredConsent,
    /// The envelope's wrapped key was not sealed to this regulator.
    KeyUnwrapFailed,
}

impl std::fmt::Display for DenyReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DenyReason::TeUnknown => "TE_UNKNOWN",
            DenyReason::StaleNonce => "STALE_NONCE",
            DenyReason::RequesterUnauthenticated => "REQUESTER_UNAUTHENTICATED",
            DenyReason::NoRule => "NO_RULE",
            DenyReason::PredicateMissing => "PREDICATE_MISSING",
            DenyReason::ExpiredConsent => "EXPIRED_CONSENT",
            DenyReason::KeyUnwrapFailed => "KEY_UNWRAP_FAILED",
        })
    }
}

/// The outcome of one access request.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum AccessDecision {
    Grant {
        decision_id: u64,
        /// The payload key for the claimed (type, subject), wrapped to the
        /// attested session key. Useless to anyone but that session.
        wrapped_payload_key: Vec<u8>,
    },
    Deny {
        reason: DenyReason,
    },
}

// ---------------------------------------------------------------------------
// Requests
// ---------------------------------------------------------------------------

/// Proof that a human stands behind a sink access: the requester's vid,
/// the authority's certificate binding a signing key to that vid, a role
/// credential, and a signature over the request nonce.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct RequesterAuth {
    pub vid: VidValue,
    pub key_cert: Credential,
    pub role_credential: Credential,
    pub nonce_sig: sig::Signature,
}

pub fn requester_signing_input(nonce: &[u8; 32]) -> Vec<u8> {
    framing::concat(&[REQUESTER_DOMAIN, nonce])
}

impl RequesterAuth {
    fn to_bytes(&self) -> Vec<u8> {
        framing::concat(&[
            &self.vid,
            &self.key_cert.to_bytes(),
            &self.role_credential.to_bytes(),
            &self.nonce_sig.to_bytes(),
        ])
    }

    fn from_bytes(bytes: &[u8]) -> Result<RequesterAuth, FrameError> {
        let fields = framing::split_concat(bytes, 4)?;
        Ok(RequesterAuth {
            vid: framing::fixed::<32>(0, &fields[0])?,
            key_cert: Credential::from_bytes(&fields[1])?,
            role_credential: Credential::from_bytes(&fields[2])?,
            nonce_sig: sig::Signature::from_bytes(&fields[3])
                .map_err(|_| FrameError::BadField { index: 3, reason: "bad signature".into() })?,
        })
    }
}

/// The requesting person's agent: holds the vid's signing key and the
/// credentials to present, and answers request nonces.
pub struct RequesterAgent {
    pub vid: VidValue,
    key: sig::KeyPair,
    pub key_cert: Credential,
    pub role_credential: Credential,
}

impl RequesterAgent {
    pub fn new(
        vid: VidValue,
        key: sig::KeyPair,
        key_cert: Credential,
        role_credential: Credential,
    ) -> Self {
        Self { vid, key, key_cert, role_credential }
    }

    pub fn answer(&self, nonce: &[u8; 32]) -> RequesterAuth {
        RequesterAuth {
            vid: self.vid,
            key_cert: self.key_cert.clone(),
            role_credential: self.role_credential.clone(),
            nonce_sig: self.key.sign(&requester_signing_input(nonce)),
        }
    }
}

/// One access request: the attestation report, the claim being made, the
/// envelope's wrapped key, and (for sinks) the requester.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct AccessRequest {
    pub report: AttestationReport,
    pub claimed_type: TypeId,
    pub subject: Subject,
    pub wrapped_key: Vec<u8>,
    pub requester: Option<RequesterAuth>,
}

impl AccessRequest {
    pub fn to_bytes(&self) -> Vec<u8> {
        let requester = self.requester.as_ref().map(|r| r.to_bytes()).unwrap_or_default();
        framing::encode(
            ACCESS_REQUEST_MAGIC,
            &[
                &self.report.to_bytes(),
                self.claimed_type.name().as_bytes(),
                self.subject.bytes(),
                &self.wrapped_key,
                &requester,
            ],
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<AccessRequest, FrameError> {
        let fields = framing::decode_exact(ACCESS_REQUEST_MAGIC, bytes, 5)?;
        let report = AttestationReport::from_bytes(&fields[0])
            .ok_or(FrameError::BadField { index: 0, reason: "bad attestation report".into() })?;
        let name = std::str::from_utf8(&fields[1])
            .map_err(|_| FrameError::BadField { index: 1, reason: "type not UTF-8".into() })?;
        let subject = Subject::from_bytes(&fields[2])
            .map_err(|e| FrameError::BadField { index: 2, reason: e.to_string() })?;
        let claimed_type = TypeId::for_subject(name, &subject)
            .map_err(|e| FrameError::BadField { index: 1, reason: e.to_string() })?;
        let requester = if fields[4].is_empty() {
            None
        } else {
            Some(RequesterAuth::from_bytes(&fields[4])?)
        };
        Ok(AccessRequest { report, claimed_type, subject, wrapped_key: fields[3].clone(), requester })
    }

    pub fn digest(&self) -> Digest {
        hash::hash(&self.to_bytes())
    }
}

// ---------------------------------------------------------------------------
// Consent and approval facts
// ---------------------------------------------------------------------------

/// Who a consent is granted towards: a specific person (by vid) or an
/// organisation.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum ConsentObject {
    Vid(VidValue),
    Org(String),
}

impl ConsentObject {
    fn bytes(&self) -> Vec<u8> {
        match self {
            ConsentObject::Vid(v) => {
                let mut out = vec![0x01];
                out.extend_from_slice(v);
                out
            }
            ConsentObject::Org(o) => {
                let mut out = vec![0x02];
                out.extend_from_slice(o.as_bytes());
                out
            }
        }
    }
}

/// A consent fact, signed by the subject's vid key: subject consents to
/// `verb` with respect to `object`, over the data types in `scope`, until
/// `expiry_s`. The nonce makes each consent submission single-use.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ConsentPredicate {
    pub subject_vid: VidValue,
    pub verb: String,
    pub object: ConsentObject,
    pub scope: Vec<TypePattern>,
    pub expiry_s: u64,
    pub nonce: [u8; 32],
}

impl ConsentPredicate {
    pub fn signing_input(&self) -> Vec<u8> {
        let scope: Vec<String> = self.scope.iter().map(|p| p.text()).collect();
        framing::concat(&[
            CONSENT_DOMAIN,
            &self.subject_vid,
            self.verb.as_bytes(),
            &self.object.bytes(),
            scope.join(",").as_bytes(),
            &self.expiry_s.to_be_bytes(),
            &self.nonce,
        ])
    }
}

/// A consent as submitted: predicate, subject signature, and the key
/// certificate that lets the regulator check the signature.
#[derive(Clone, Debug)]
pub struct SignedConsent {
    pub predicate: ConsentPredicate,
    pub signature: sig::Signature,
    pub key_cert: Credential,
}

/// A revocation, authenticated the same way as the consent it cancels.
#[derive(Clone, Debug)]
pub struct SignedRevocation {
    pub subject_vid: VidValue,
    pub verb: String,
    pub object: ConsentObject,
    pub signature: sig::Signature,
    pub key_cert: Credential,
}

impl SignedRevocation {
    pub fn signing_input(subject_vid: &VidValue, verb: &str, object: &ConsentObject) -> Vec<u8> {
        framing::concat(&[REVOKE_DOMAIN, subject_vid, verb.as_bytes(), &object.bytes()])
    }
}

#[derive(Clone, Debug)]
struct StoredConsent {
    predicate: ConsentPredicate,
    revoked: bool,
}

/// A recorded approval fact: `approver` certified `attribute` about
/// `subject_vid`. Always backed by a verified credential.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Approval {
    pub approver: String,
    pub subject_vid: VidValue,
    pub attribute: String,
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ApproveError {
    #[error("manifest rejected: {0}")]
    Manifest(#[from] crate::te::ManifestError),
    #[error("structural check failed: {0}")]
    Structural(&'static str),
}

/// The structural review [`Regulator::approve_te`] applies to a manifest,
/// available standalone so operators can lint a manifest before
/// submitting a build for approval.
pub fn review_manifest(manifest_text: &str) -> Result<TeManifest, ApproveError> {
    let manifest = TeManifest::parse(manifest_text)?;
    if !manifest.callback {
        return Err(ApproveError::Structural("manifest does not declare the regulator callback"));
    }
    if manifest.output_types.is_empty() {
        return Err(ApproveError::Structural("all output channels must be typed"));
    }
    if manifest.sink && manifest.minimisation.is_none() {
        return Err(ApproveError::Structural("sink TEs must declare a minimisation policy"));
    }
    Ok(manifest)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConsentError {
    #[error("no identity authority key configured")]
    NoAuthorityKey,
    #[error("key certificate invalid or not for this subject")]
    BadKeyCert,
    #[error("subject signature invalid")]
    BadSignature,
    #[error("consent already expired at submission")]
    Expired,
    #[error("consent nonce replayed")]
    Replay,
    #[error("no matching consent to revoke")]
    NothingToRevoke,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ApprovalError {
    #[error("approver {0:?} is not recognised by this regulator")]
    UnknownApprover(String),
    #[error("approval credential does not verify")]
    BadCredential,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProvisionError {
    #[error("attestation report invalid")]
    BadReport,
    #[error("measurement is not the expected regulator build")]
    WrongMeasurement,
    #[error("provisioning nonce reused")]
    NonceReuse,
}

// ---------------------------------------------------------------------------
// The regulator
// ---------------------------------------------------------------------------

/// An approved TE as the public registry shows it.
#[derive(Clone, Debug)]
pub struct ApprovedTe {
    pub manifest: TeManifest,
    pub manifest_text: String,
    pub risk_annotation: String,
}

pub struct Regulator {
    pub name: String,
    master: kem::WrapKeyPair,
    platform_keys: Vec<sig::VerifyKey>,
    approved: BTreeMap<Digest, ApprovedTe>,
    rules: Vec<AuthRule>,
    consents: Vec<StoredConsent>,
    consent_nonces: BTreeSet<[u8; 32]>,
    approvals: Vec<Approval>,
    outstanding_nonces: BTreeSet<[u8; 32]>,
    link_purposes: BTreeSet<String>,
    next_decision: u64,
    authority_cert_key: Option<BlindVerifyKey>,
    approver_keys: BTreeMap<String, BlindVerifyKey>,
    pub audit: AuditLog,
}

enum PredicateStatus {
    Holds,
    Expired,
    Missing,
}

impl std::fmt::Debug for Regulator {
    /// Master key material never prints.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Regulator")
            .field("name", &self.name)
            .field("approved", &self.approved.len())
            .field("rules", &self.rules.len())
            .field("consents", &self.consents.len())
            .field("audit_entries", &self.audit.to_text().lines().count())
            .finish_non_exhaustive()
    }
}

impl Regulator {
    pub fn new(name: &str, rng: &mut (impl RngCore + CryptoRng)) -> Self {
        Self::with_master(name, kem::WrapKeyPair::generate(rng))
    }

    fn with_master(name: &str, master: kem::WrapKeyPair) -> Self {
        Self {
            name: name.to_string(),
            master,
            platform_keys: Vec::new(),
            approved: BTreeMap::new(),
            rules: Vec::new(),
            consents: Vec::new(),
            consent_nonces: BTreeSet::new(),
            approvals: Vec::new(),
            outstanding_nonces: BTreeSet::new(),
            link_purposes: BTreeSet::new(),
            next_decision: 0,
            authority_cert_key: None,
            approver_keys: BTreeMap::new(),
            audit: AuditLog::new(),
        }
    }

    /// Boots a regulator whose master key is provisioned by a root of
    /// trust, rather than generated locally: the regulator itself runs as
    /// a measured TE and receives the key only after attesting as the
    /// approved build.
    pub fn bootstrap(
        name: &str,
        regulator_te: &TeInstance,
        platform: &TePlatform,
        root: &mut RootOfTrust,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Result<Regulator, ProvisionError> {
        let session = kem::WrapKeyPair::generate(rng);
        let mut nonce = [0u8; 32];
        rng.fill_bytes(&mut nonce);
        let report = platform.attest(regulator_te, &session.public(), nonce);
        let wrapped = root.provision(&report, rng)?;
        let secret = session.unwrap(&wrapped).map_err(|_| ProvisionError::BadReport)?;
        let secret: [u8; 32] = secret.try_into().map_err(|_| ProvisionError::BadReport)?;
        Ok(Self::with_master(name, kem::WrapKeyPair::from_secret_bytes(secret)))
    }

    /// The key producers seal envelopes to in this jurisdiction.
    pub fn public_key(&self) -> kem::WrapPublicKey {
        self.master.public()
    }

    pub fn trust_platform(&mut self, key: sig::VerifyKey) {
        self.platform_keys.push(key);
    }

    /// Key certificates presented by requesters and consenters verify
    /// against this identity-authority key.
    pub fn set_authority_key(&mut self, key: BlindVerifyKey) {
        self.authority_cert_key = Some(key);
    }

    /// Registers an issuer whose credentials count as approvals / roles.
    pub fn trust_issuer(&mut self, name: &str, key: BlindVerifyKey) {
        self.approver_keys.insert(name.to_string(), key);
    }

    pub fn allow_link_purpose(&mut self, purpose: &str) {
        self.link_purposes.insert(purpose.to_string());
    }

    /// Replaces the rule set. Rules arrive pre-sorted by (priority, id).
    pub fn load_rules(&mut self, text: &str) -> Result<usize, RuleError> {
        self.rules = rules::parse_rules(text)?;
        Ok(self.rules.len())
    }

    /// Reviews and registers a TE build. The checks are structural — the
    /// regulator cannot prove the code correct, but it can refuse builds
    /// that do not even declare the right shape; the `risk_annotation` is
    /// the human reviewer's mark and is required to be present.
    pub fn approve_te(
        &mut self,
        manifest_text: &str,
        code_image: &[u8],
        risk_annotation: &str,
        now_s: u64,
        events: &mut EventLog,
    ) -> Result<Measurement, ApproveError> {
        let manifest = review_manifest(manifest_text)?;
        if risk_annotation.trim().is_empty() {
            return Err(ApproveError::Structural("risk annotation must not be empty"));
        }
        let measurement = crate::te::measure(manifest_text, code_image);
        self.audit.append("te-approved", measurement.0.as_bytes(), now_s);
        events.push(Event::TeApproved {
            te: manifest.name.clone(),
            measurement: measurement.short(),
        });
        self.approved.insert(
            measurement.0,
            ApprovedTe {
                manifest,
                manifest_text: manifest_text.to_string(),
                risk_annotation: risk_annotation.to_string(),
            },
        );
        Ok(measurement)
    }

    /// The public registry of approved TEs.
    pub fn approved_tes(&self) -> impl Iterator<Item = (Measurement, &ApprovedTe)> {
        self.approved.iter().map(|(d, t)| (Measurement(*d), t))
    }

    pub fn approved_te(&self, measurement: &Measurement) -> Option<&ApprovedTe> {
        self.approved.get(&measurement.0)
    }

    /// Records a consent after verifying the chain: authority-certified
    /// key, subject signature, unexpired, fresh nonce.
    pub fn record_consent(
        &mut self,
        signed: &SignedConsent,
        now_s: u64,
        events: &mut EventLog,
    ) -> Result<(), ConsentError> {
        let authority = self.authority_cert_key.as_ref().ok_or(ConsentError::NoAuthorityKey)?;
        if !signed.key_cert.verify(authority)
            || signed.key_cert.subject_vid != signed.predicate.subject_vid
        {
            return Err(ConsentError::BadKeyCert);
        }
        let pk = key_from_attribute(&signed.key_cert.attribute).ok_or(ConsentError::BadKeyCert)?;
        if !pk.verify(&signed.predicate.signing_input(), &signed.signature) {
            return Err(ConsentError::BadSignature);
        }
        if signed.predicate.expiry_s <= now_s {
            return Err(ConsentError::Expired);
        }
        if !self.consent_nonces.insert(signed.predicate.nonce) {
            return Err(ConsentError::Replay);
        }
        self.audit.append("consent-recorded", &signed.predicate.signing_input(), now_s);
        events.push(Event::ConsentRecorded {
            subject: vid_handle(&signed.predicate.subject_vid),
            verb: signed.predicate.verb.clone(),
        });
        self.consents.push(StoredConsent { predicate: signed.predicate.clone(), revoked: false });
        Ok(())
    }

    /// Revokes all consents matching (subject, verb, object). Takes effect
    /// for every later authorization; already-granted keys are not clawed
    /// back (they live only in attested sessions).
    pub fn revoke_consent(
        &mut self,
        revocation: &SignedRevocation,
        now_s: u64,
        events: &mut EventLog,
    ) -> Result<usize, ConsentError> {
        let authority = self.authority_cert_key.as_ref().ok_or(ConsentError::NoAuthorityKey)?;
        if !revocation.key_cert.verify(authority)
            || revocation.key_cert.subject_vid != revocation.subject_vid
        {
            return Err(ConsentError::BadKeyCert);
        }
        let pk =
            key_from_attribute(&revocation.key_cert.attribute).ok_or(ConsentError::BadKeyCert)?;
        let input = SignedRevocation::signing_input(
            &revocation.subject_vid,
            &revocation.verb,
            &revocation.object,
        );
        if !pk.verify(&input, &revocation.signature) {
            return Err(ConsentError::BadSignature);
        }
        let mut count = 0;
        for stored in &mut self.consents {
            if !stored.revoked
                && stored.predicate.subject_vid == revocation.subject_vid
                && stored.predicate.verb == revocation.verb
                && stored.predicate.object == revocation.object
            {
                stored.revoked = true;
                count += 1;
            }
        }
        if count == 0 {
            return Err(ConsentError::NothingToRevoke);
        }
        self.audit.append("consent-revoked", &input, now_s);
        events.push(Event::ConsentRevoked {
            subject: vid_handle(&revocation.subject_vid),
            verb: revocation.verb.clone(),
        });
        Ok(count)
    }

    /// Records an approval fact from a credential issued by a recognised
    /// approver (the credential may have been issued blind; the regulator
    /// cannot tell, and does not need to).
    pub fn record_approval(
        &mut self,
        credential: &Credential,
        now_s: u64,
        events: &mut EventLog,
    ) -> Result<(), ApprovalError> {
        let key = self
            .approver_keys
            .get(&credential.issuer)
            .ok_or_else(|| ApprovalError::UnknownApprover(credential.issuer.clone()))?;
        if !credential.verify(key) {
            return Err(ApprovalError::BadCredential);
        }
        self.audit.append("approval-recorded", &credential.to_bytes(), now_s);
        events.push(Event::ApprovalRecorded {
            approver: credential.issuer.clone(),
            subject: vid_handle(&credential.subject_vid),
            attribute: credential.attribute.clone(),
        });
        self.approvals.push(Approval {
            approver: credential.issuer.clone(),
            subject_vid: credential.subject_vid,
            attribute: credential.attribute.clone(),
        });
        Ok(())
    }

    /// Issues a single-use nonce that must come back inside an attestation
    /// report. Nonces tie reports to requests: replaying a report, however
    /// valid its signature, is caught here.
    pub fn issue_nonce(
        &mut self,
        rng: &mut (impl RngCore + CryptoRng),
        events: &mut EventLog,
    ) -> [u8; 32] {
        let mut nonce = [0u8; 32];
        rng.fill_bytes(&mut nonce);
        self.outstanding_nonces.insert(nonce);
        events.push(Event::NonceIssued { nonce: hex::encode(&nonce[..6]) });
        nonce
    }

    /// Decides a linking request's purpose. Grants only configured
    /// purposes; both outcomes are audited.
    pub fn decide_link(&mut self, purpose: &str, now_s: u64, events: &mut EventLog) -> LinkDecision {
        if self.link_purposes.contains(purpose) {
            self.audit.append("link-grant", purpose.as_bytes(), now_s);
            events.push(Event::LinkRecorded { purpose: purpose.to_string() });
            LinkDecision::Grant { purpose: purpose.to_string() }
        } else {
            self.audit.append("link-deny", purpose.as_bytes(), now_s);
            LinkDecision::Deny
        }
    }

    /// The authorization gate. See the module documentation for the fixed
    /// evaluation order. Total: every request produces a decision, and
    /// every decision is audited.
    pub fn authorize(
        &mut self,
        request: &AccessRequest,
        now_s: u64,
        rng: &mut (impl RngCore + CryptoRng),
        events: &mut EventLog,
    ) -> AccessDecision {
        let digest = request.digest();
        let type_text = type_handle(&request.claimed_type);

        // 1. Attestation: platform signature, nonce freshness, registry.
        if !self.platform_keys.iter().any(|k| request.report.verify(k)) {
            return self.deny(DenyReason::TeUnknown, &digest, &type_text, now_s, events);
        }
        if !self.outstanding_nonces.remove(&request.report.nonce) {
            return self.deny(DenyReason::StaleNonce, &digest, &type_text, now_s, events);
        }
        let Some(approved) = self.approved.get(&request.report.measurement.0) else {
            return self.deny(DenyReason::TeUnknown, &digest, &type_text, now_s, events);
        };
        let te_name = approved.manifest.name.clone();
        let is_sink = approved.manifest.sink;
        events.push(Event::AttestationVerified { te: te_name.clone() });

        // 2. Requester authentication (sinks only).
        let mut requester: Option<(VidValue, String)> = None;
        if is_sink {
            let Some(auth) = &request.requester else {
                return self.deny(DenyReason::RequesterUnauthenticated, &digest, &type_text, now_s, events);
            };
            match self.authenticate_requester(auth, &request.report.nonce) {
                Some(role) => {
                    events.push(Event::RequesterAuthenticated { requester: vid_handle(&auth.vid) });
                    requester = Some((auth.vid, role));
                }
                None => {
                    return self.deny(
                        DenyReason::RequesterUnauthenticated,
                        &digest,
                        &type_text,
                        now_s,
                        events,
                    );
                }
            }
        }

        // 3. The claimed type is registered here; its truth is enforced by
        // the key derivation at release (a false claim cannot decrypt).
        events.push(Event::TypeAuthenticated { type_text: type_text.clone() });

        // 4. Rule selection: first structural match wins.
        let selected = self.select_rule(request, requester.as_ref(), now_s);
        let Some((rule, binding)) = selected else {
            return self.deny(DenyReason::NoRule, &digest, &type_text, now_s, events);
        };

        // 5. Predicates under the rule's bindings.
        for template in &rule.required {
            match self.predicate_status(template, &binding, request, now_s) {
                PredicateStatus::Holds => {}
                PredicateStatus::Expired => {
                    return self.deny(DenyReason::ExpiredConsent, &digest, &type_text, now_s, events);
                }
                PredicateStatus::Missing => {
                    return self.deny(DenyReason::PredicateMissing, &digest, &type_text, now_s, events);
                }
            }
        }
        events.push(Event::RuleInstantiated {
            rule_id: rule.rule_id.clone(),
            type_text: type_text.clone(),
        });

        // 6. Key release — the only point in the system that emits key
        // material, and only to the attested session.
        let payload_key = match Envelope::release_payload_key(
            &request.wrapped_key,
            &self.master,
            &request.claimed_type,
            &request.subject,
        ) {
            Ok(key) => key,
            Err(_) => {
                return self.deny(DenyReason::KeyUnwrapFailed, &digest, &type_text, now_s, events);
            }
        };
        let wrapped_payload_key = request.report.session_key.wrap(&payload_key.to_bytes(), rng);
        let decision_id = self.next_decision;
        self.next_decision += 1;
        self.audit.append("access-grant", digest.as_bytes(), now_s);
        events.push(Event::KeyProvisioned { type_text });
        AccessDecision::Grant { decision_id, wrapped_payload_key }
    }

    fn deny(
        &mut self,
        reason: DenyReason,
        digest: &Digest,
        type_text: &str,
        now_s: u64,
        events: &mut EventLog,
    ) -> AccessDecision {
        self.audit.append(&format!("access-deny:{reason}"), digest.as_bytes(), now_s);
        events.push(Event::AccessDenied {
            reason: reason.to_string(),
            type_text: type_text.to_string(),
        });
        AccessDecision::Deny { reason }
    }

    /// Verifies the requester chain; returns the role attribute on success.
    fn authenticate_requester(&self, auth: &RequesterAuth, nonce: &[u8; 32]) -> Option<String> {
        let authority = self.authority_cert_key.as_ref()?;
        if !auth.key_cert.verify(authority) || auth.key_cert.subject_vid != auth.vid {
            return None;
        }
        let pk = key_from_attribute(&auth.key_cert.attribute)?;
        let issuer_key = self.approver_keys.get(&auth.role_credential.issuer)?;
        if !auth.role_credential.verify(issuer_key) || auth.role_credential.subject_vid != auth.vid {
            return None;
        }
        if !pk.verify(&requester_signing_input(nonce), &auth.nonce_sig) {
            return None;
        }
        Some(auth.role_credential.attribute.clone())
    }

    fn select_rule(
        &self,
        request: &AccessRequest,
        requester: Option<&(VidValue, String)>,
        now_s: u64,
    ) -> Option<(AuthRule, Binding)> {
        self.rules.iter().find_map(|rule| {
            if let Some((from, to)) = rule.validity {
                if now_s < from || now_s > to {
                    return None;
                }
            }
            let te_name = self
                .approved
                .get(&request.report.measurement.0)
                .map(|t| t.manifest.name.as_str())
                .unwrap_or("");
            match &rule.te {
                TeSelector::Any => {}
                TeSelector::Name(pattern) => {
                    if !glob_match(pattern, te_name) {
                        return None;
                    }
                }
                TeSelector::Measurement(m) => {
                    if *m != request.report.measurement.0 {
                        return None;
                    }
                }
            }
            let mut binding = Binding::new();
            if !rule.data_type.unify(&request.claimed_type, &request.subject, &mut binding) {
                return None;
            }
            match (&rule.requester, requester) {
                (None, _) => {}
                (Some(pattern), Some((vid, role))) => {
                    if *role != format!("role:{}", pattern.role) {
                        return None;
                    }
                    match binding.get(&pattern.var) {
                        Some(bound) if bound != vid => return None,
                        Some(_) => {}
                        None => {
                            binding.insert(pattern.var.clone(), *vid);
                        }
                    }
                }
                (Some(_), None) => return None,
            }
            Some((rule.clone(), binding))
        })
    }

    fn predicate_status(
        &self,
        template: &PredicateTemplate,
        binding: &Binding,
        request: &AccessRequest,
        now_s: u64,
    ) -> PredicateStatus {
        let resolve_vid = |term: &Term| -> Option<VidValue> {
            match term {
                Term::Var(v) => binding.get(v).copied(),
                Term::Vid(v) => Some(*v),
                Term::Org(_) => None,
            }
        };
        match template {
            PredicateTemplate::Consent { subject, verb, object } => {
                let Some(subject_vid) = resolve_vid(subject) else {
                    return PredicateStatus::Missing;
                };
                let object = match object {
                    Term::Org(o) => ConsentObject::Org(o.clone()),
                    other => match resolve_vid(other) {
                        Some(v) => ConsentObject::Vid(v),
                        None => return PredicateStatus::Missing,
                    },
                };
                let mut saw_expired = false;
                for stored in &self.consents {
                    let p = &stored.predicate;
                    if stored.revoked
                        || p.subject_vid != subject_vid
                        || p.verb != *verb
                        || p.object != object
                    {
                        continue;
                    }
                    let in_scope = p
                        .scope
                        .iter()
                        .any(|pat| pat.matches(&request.claimed_type, &request.subject));
                    if !in_scope {
                        continue;
                    }
                    if p.expiry_s <= now_s {
                        saw_expired = true;
                        continue;
                    }
                    return PredicateStatus::Holds;
                }
                if saw_expired {
                    PredicateStatus::Expired
                } else {
                    PredicateStatus::Missing
                }
            }
            PredicateTemplate::Approval { approver, subject, attribute } => {
                let Some(subject_vid) = resolve_vid(subject) else {
                    return PredicateStatus::Missing;
                };
                let holds = self.approvals.iter().any(|a| {
                    a.approver == *approver
                        && a.subject_vid == subject_vid
                        && a.attribute == *attribute
                });
                if holds {
                    PredicateStatus::Holds
                } else {
                    PredicateStatus::Missing
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Root of trust (regulator-as-TE bootstrap)
// ---------------------------------------------------------------------------

/// Escrow for a regulator's master key: releases it only to an attested
/// instance of the expected regulator build. Solves "who runs the
/// regulator" by making the regulator a measured TE itself.
pub struct RootOfTrust {
    expected: Measurement,
    platform: sig::VerifyKey,
    master: kem::WrapKeyPair,
    used_nonces: BTreeSet<[u8; 32]>,
}

impl RootOfTrust {
    pub fn new(
        expected: Measurement,
        platform: sig::VerifyKey,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Self {
        Self { expected, platform, master: kem::WrapKeyPair::generate(rng), used_nonces: BTreeSet::new() }
    }

    /// Producers may seal to the regulator's key before any regulator
    /// instance has booted.
    pub fn master_public(&self) -> kem::WrapPublicKey {
        self.master.public()
    }

    /// Releases the master secret, wrapped to the report's session key,
    /// iff the report is a fresh attestation of the expected build.
    pub fn provision(
        &mut self,
        report: &AttestationReport,
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Result<Vec<u8>, ProvisionError> {
        if !report.verify(&self.platform) {
            return Err(ProvisionError::BadReport);
        }
        if report.measurement != self.expected {
            return Err(ProvisionError::WrongMeasurement);
        }
        if !self.used_nonces.insert(report.nonce) {
            return Err(ProvisionError::NonceReuse);
        }
        Ok(report.session_key.wrap(&self.master.secret_bytes(), rng))
    }
}

/// Convenience used across scenarios and tests: subject handle for events.
pub fn request_subject_handle(request: &AccessRequest) -> String {
    subject_handle(&request.subject)
}
