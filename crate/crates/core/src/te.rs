//! Trusted executables: measured code with typed channels.
//!
//! A TE is the only place plaintext personal data exists. Its manifest
//! declares every input and output type; its *measurement* is a digest of
//! the exact manifest text and code image, so a regulator that approved a
//! measurement has approved one specific behaviour. At run time the
//! platform attests the measurement together with a fresh session key and
//! a regulator-issued nonce; keys for the inputs are wrapped to that
//! session key and exist only inside the execution context.
//!
//! The runtime in [`run_te`] enforces the gate order — attest, then
//! request, then open — and the channel discipline: an execution either
//! produces exactly its declared outputs or aborts with nothing. Sink TEs
//! (the boundary where data reaches a human) additionally authenticate the
//! requesting person and pass their output through the manifest's
//! minimisation policy.

use crate::crypto::envelope::{Envelope, OpenError, PayloadKey, Subject, TypeId};
use crate::crypto::hash::{self, Digest};
use crate::crypto::{kem, sig};
use crate::framing;
use crate::pattern::TypePattern;
use crate::regulator::{AccessDecision, AccessRequest, DenyReason, Regulator, RequesterAgent};
use crate::trace::{type_handle, Event, EventLog};
use rand::{CryptoRng, RngCore};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

/// What a sink is allowed to show a human, and how.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct MinimisationPolicy {
    /// Fields that survive minimisation; everything else is dropped.
    pub allowed_fields: Vec<String>,
    /// If set, individual rows never leave the sink: only aggregate counts
    /// (and per-field integer sums) do.
    pub aggregate_only: bool,
    /// Optional human-facing rendering, `{field}` placeholders substituted
    /// from the minimised row.
    pub notification_template: Option<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ManifestError {
    #[error("line {0}: expected field {1:?}")]
    ExpectedField(usize, &'static str),
    #[error("line {0}: malformed {1} value: {2}")]
    BadValue(usize, &'static str, String),
    #[error("trailing content after the last manifest field")]
    TrailingContent,
}

/// A parsed TE manifest. The seven fields below, in this order, are the
/// entire interface a regulator reviews.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TeManifest {
    pub name: String,
    pub version: u32,
    pub input_types: Vec<TypePattern>,
    pub output_types: Vec<TypePattern>,
    pub sink: bool,
    pub minimisation: Option<MinimisationPolicy>,
    pub callback: bool,
}

impl TeManifest {
    /// Parses the manifest file format: one `field value` line per field,
    /// in canonical order. Blank lines and `#` comments are permitted and
    /// do not survive canonicalisation.
    pub fn parse(text: &str) -> Result<TeManifest, ManifestError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let mut next = |field: &'static str| -> Result<(usize, String), ManifestError> {
            let (no, line) = lines.next().ok_or(ManifestError::ExpectedField(0, field))?;
            let (key, value) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            if key != field {
                return Err(ManifestError::ExpectedField(no, field));
            }
            Ok((no, value.trim().to_string()))
        };

        let (_, name) = next("name")?;
        if name.is_empty() {
            return Err(ManifestError::BadValue(1, "name", name));
        }
        let (no, version_text) = next("version")?;
        let version = version_text
            .parse::<u32>()
            .map_err(|_| ManifestError::BadValue(no, "version", version_text.clone()))?;
        let (no, inputs_text) = next("input_types")?;
        let input_types = parse_patterns(no, "input_types", &inputs_text)?;
        let (no, outputs_text) = next("output_types")?;
        let output_types = parse_patterns(no, "output_types", &outputs_text)?;
        let (no, sink_text) = next("sink")?;
        let sink = parse_bool(no, "sink", &sink_text)?;
        let (no, min_text) = next("minimisation_policy")?;
        let minimisation = parse_minimisation(no, &min_text)?;
        let (no, cb_text) = next("callback")?;
        let callback = parse_bool(no, "callback", &cb_text)?;
        if lines.next().is_some() {
            return Err(ManifestError::TrailingContent);
        }
        Ok(TeManifest { name, version, input_types, output_types, sink, minimisation, callback })
    }

    /// The canonical text form; `parse(canonical_text())` reproduces the
    /// manifest exactly.
    pub fn canonical_text(&self) -> String {
        let patterns =
            |ps: &[TypePattern]| ps.iter().map(|p| p.text()).collect::<Vec<_>>().join(",");
        let minimisation = match &self.minimisation {
            None => "none".to_string(),
            Some(p) => {
                let mut s = format!(
                    "fields={} aggregate={}",
                    p.allowed_fields.join(","),
                    p.aggregate_only
                );
                if let Some(t) = &p.notification_template {
                    s.push_str(" template=");
                    s.push_str(t);
                }
                s
            }
        };
        format!(
            "name {}\nversion {}\ninput_types {}\noutput_types {}\nsink {}\nminimisation_policy {}\ncallback {}\n",
            self.name,
            self.version,
            patterns(&self.input_types),
            patterns(&self.output_types),
            self.sink,
            minimisation,
            self.callback,
        )
    }
}

fn parse_patterns(
    line: usize,
    field: &'static str,
    text: &str,
) -> Result<Vec<TypePattern>, ManifestError> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|p| TypePattern::parse(p).map_err(|e| ManifestError::BadValue(line, field, e.to_string())))
        .collect()
}

fn parse_bool(line: usize, field: &'static str, text: &str) -> Result<bool, ManifestError> {
    match text {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(ManifestError::BadValue(line, field, other.to_string())),
    }
}

fn parse_minimisation(line: usize, text: &str) -> Result<Option<MinimisationPolicy>, ManifestError> {
    if text == "none" {
        return Ok(None);
    }
    let (head, template) = match text.split_once(" template=") {
        Some((head, t)) => (head, Some(t.to_string())),
        None => (text, None),
    };
    let mut allowed_fields = None;
    let mut aggregate_only = None;
    for token in head.split_whitespace() {
        match token.split_once('=') {
            Some(("fields", v)) => {
                allowed_fields =
                    Some(v.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect())
            }
            Some(("aggregate", v)) => aggregate_only = Some(parse_bool(line, "aggregate", v)?),
            _ => return Err(ManifestError::BadValue(line, "minimisation_policy", token.into())),
        }
    }
    match (allowed_fields, aggregate_only) {
        (Some(allowed_fields), Some(aggregate_only)) => Ok(Some(MinimisationPolicy {
            allowed_fields,
            aggregate_only,
            notification_template: template,
        })),
        _ => Err(ManifestError::BadValue(line, "minimisation_policy", text.into())),
    }
}

// ---------------------------------------------------------------------------
// Measurement and attestation
// ---------------------------------------------------------------------------

/// The identity of a TE: a digest over the exact manifest bytes and code
/// image. Any single-bit change to either produces a different value.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct Measurement(pub Digest);

impl Measurement {
    pub fn short(&self) -> String {
        self.0.short()
    }
}

pub fn measure(manifest_text: &str, code_image: &[u8]) -> Measurement {
    Measurement(hash::hash_parts(&[manifest_text.as_bytes(), code_image]))
}

/// A loaded TE: manifest, code, and the keypair it signs its outputs with.
pub struct TeInstance {
    pub manifest: TeManifest,
    pub manifest_text: String,
    pub code_image: Vec<u8>,
    producer: sig::KeyPair,
}

impl TeInstance {
    pub fn load(
        manifest_text: &str,
        code_image: &[u8],
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Result<TeInstance, ManifestError> {
        Ok(TeInstance {
            manifest: TeManifest::parse(manifest_text)?,
            manifest_text: manifest_text.to_string(),
            code_image: code_image.to_vec(),
            producer: sig::KeyPair::generate(rng),
        })
    }

    pub fn measurement(&self) -> Measurement {
        measure(&self.manifest_text, &self.code_image)
    }

    /// The key this instance's sealed outputs verify under.
    pub fn producer_key(&self) -> sig::VerifyKey {
        self.producer.public()
    }
}

const ATTEST_DOMAIN: &[u8] = b"pbd.attestation.v1";

/// The hardware/hypervisor stand-in: the party whose signature over a
/// measurement the regulator trusts.
pub struct TePlatform {
    key: sig::KeyPair,
}

impl TePlatform {
    pub fn new(rng: &mut (impl RngCore + CryptoRng)) -> Self {
        Self { key: sig::KeyPair::generate(rng) }
    }

    pub fn verify_key(&self) -> sig::VerifyKey {
        self.key.public()
    }

    /// Produces a report binding what is running (the measurement), where
    /// keys should be wrapped (the session key) and for which request (the
    /// regulator's nonce).
    pub fn attest(
        &self,
        te: &TeInstance,
        session_key: &kem::WrapPublicKey,
        nonce: [u8; 32],
    ) -> AttestationReport {
        let measurement = te.measurement();
        let signature =
            self.key.sign(&attest_signing_input(&measurement, session_key, &nonce));
        AttestationReport { measurement, session_key: *session_key, nonce, signature }
    }
}

fn attest_signing_input(
    measurement: &Measurement,
    session_key: &kem::WrapPublicKey,
    nonce: &[u8; 32],
) -> Vec<u8> {
    framing::concat(&[ATTEST_DOMAIN, measurement.0.as_bytes(), &session_key.to_bytes(), nonce])
}

/// A signed attestation report.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct AttestationReport {
    pub measurement: Measurement,
    pub session_key: kem::WrapPublicKey,
    pub nonce: [u8; 32],
    pub signature: sig::Signature,
}

impl AttestationReport {
    pub fn verify(&self, platform: &sig::VerifyKey) -> bool {
        platform.verify(
            &attest_signing_input(&self.measurement, &self.session_key, &self.nonce),
            &self.signature,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        framing::concat(&[
            self.measurement.0.as_bytes(),
            &self.session_key.to_bytes(),
            &self.nonce,
            &self.signature.to_bytes(),
        ])
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<AttestationReport> {
        let fields = framing::split_concat(bytes, 4).ok()?;
        Some(AttestationReport {
            measurement: Measurement(Digest(fields[0].as_slice().try_into().ok()?)),
            session_key: kem::WrapPublicKey::from_bytes(&fields[1]).ok()?,
            nonce: fields[2].as_slice().try_into().ok()?,
            signature: sig::Signature::from_bytes(&fields[3]).ok()?,
        })
    }
}

// ---------------------------------------------------------------------------
// Logic
// ---------------------------------------------------------------------------

/// A decrypted input as the TE logic sees it. `envelope_digest` is the
/// digest of the sealed envelope the payload came from — public metadata,
/// which lets logic resolve references other parties made to the sealed
/// object (they could only ever see its ciphertext).
#[derive(Clone, Debug)]
pub struct PlainInput {
    pub type_id: TypeId,
    pub subject: Subject,
    pub payload: Vec<u8>,
    pub envelope_digest: Digest,
}

/// Field/value rows, the currency of sinks.
pub type FieldMap = BTreeMap<String, String>;

/// What logic may produce: typed data for the next stage, or rows bound
/// for a human through minimisation. Emitting the wrong kind for the TE's
/// manifest is a type violation that aborts the execution.
#[derive(Clone, Debug)]
pub enum LogicOutput {
    Data { type_name: String, subject: Subject, payload: Vec<u8> },
    Sink(FieldMap),
}

/// The pure function a measurement stands for. The first argument is the
/// execution context's private trace: the only place where in-flight
/// plaintext may be written down, destroyed with the context.
pub type LogicFn =
    Arc<dyn Fn(&mut Vec<String>, &[PlainInput]) -> Result<Vec<LogicOutput>, String> + Send + Sync>;

/// Maps approved measurements to their behaviour. Registration happens at
/// load time; looking up by measurement models "only the measured code
/// runs inside the enclave".
#[derive(Default, Clone)]
pub struct LogicRegistry {
    map: BTreeMap<Measurement, LogicFn>,
}

impl LogicRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, measurement: Measurement, logic: LogicFn) {
        self.map.insert(measurement, logic);
    }

    pub fn get(&self, measurement: &Measurement) -> Option<&LogicFn> {
        self.map.get(measurement)
    }
}

// ---------------------------------------------------------------------------
// The runtime
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TeError {
    #[error("input type {0} is not declared by the manifest")]
    InputNotDeclared(String),
    #[error("access denied ({reason}) for {type_text}")]
    AccessDenied { reason: DenyReason, type_text: String },
    #[error("released key did not parse")]
    KeyFormat,
    #[error("envelope failed to open: {0}")]
    OpenFailed(OpenError),
    #[error("no logic registered for this measurement")]
    UnknownLogic,
    #[error("logic failed: {0}")]
    LogicFailed(String),
    #[error("type violation: undeclared output {0}")]
    TypeViolation(String),
    #[error("sink produced typed data / processor produced sink rows")]
    ChannelShape,
}

/// Everything an execution legitimately produced. `context_log` is the
/// in-memory trace of the (now destroyed) execution context, surfaced so
/// tests can verify what never left the enclave.
#[derive(Debug)]
pub struct TeRun {
    pub outputs: Vec<Envelope>,
    pub sink_rows: Vec<FieldMap>,
    pub notifications: Vec<String>,
    pub context_log: Vec<String>,
}

/// Where a TE's outputs are sealed to. One pipeline may span several
/// jurisdictions: a stage's outputs are encrypted to whichever regulator
/// gates their *consumer*, selected by output type name. Types without an
/// explicit route seal to the default key (normally the gating
/// regulator's own).
#[derive(Clone)]
pub struct OutputRouting {
    default: kem::WrapPublicKey,
    routes: BTreeMap<String, kem::WrapPublicKey>,
}

impl OutputRouting {
    pub fn to(default: kem::WrapPublicKey) -> Self {
        Self { default, routes: BTreeMap::new() }
    }

    /// Routes outputs of `type_name` to `key`. Builder-style.
    pub fn route(mut self, type_name: &str, key: kem::WrapPublicKey) -> Self {
        self.routes.insert(type_name.to_string(), key);
        self
    }

    fn key_for(&self, type_name: &str) -> &kem::WrapPublicKey {
        self.routes.get(type_name).unwrap_or(&self.default)
    }
}

/// Executes a TE over sealed inputs, mediating every input through the
/// regulator. Inputs are pairs of (envelope, producer verify key).
/// Outputs seal to the gating regulator; pipelines that hand off across
/// jurisdictions use [`run_te_routed`].
///
/// Order per input: regulator nonce → attestation → access request →
/// unwrap to session → open. Any denial or failure aborts the whole
/// execution with no outputs — partial results never leave the context.
pub fn run_te(
    te: &TeInstance,
    platform: &TePlatform,
    inputs: &[(Envelope, sig::VerifyKey)],
    requester: Option<&RequesterAgent>,
    regulator: &mut Regulator,
    registry: &LogicRegistry,
    now_s: u64,
    rng: &mut (impl RngCore + CryptoRng),
    events: &mut EventLog,
) -> Result<TeRun, TeError> {
    let routing = OutputRouting::to(regulator.public_key());
    run_te_routed(te, platform, inputs, requester, regulator, registry, &routing, now_s, rng, events)
}

/// [`run_te`] with explicit output routing.
#[allow(clippy::too_many_arguments)]
pub fn run_te_routed(
    te: &TeInstance,
    platform: &TePlatform,
    inputs: &[(Envelope, sig::VerifyKey)],
    requester: Option<&RequesterAgent>,
    regulator: &mut Regulator,
    registry: &LogicRegistry,
    routing: &OutputRouting,
    now_s: u64,
    rng: &mut (impl RngCore + CryptoRng),
    events: &mut EventLog,
) -> Result<TeRun, TeError> {
    for (envelope, _) in inputs {
        let declared = te
            .manifest
            .input_types
            .iter()
            .any(|p| p.matches(&envelope.type_id, &envelope.subject));
        if !declared {
            return Err(TeError::InputNotDeclared(type_handle(&envelope.type_id)));
        }
    }

    // Fresh session keys for this execution; released payload keys are
    // wrapped to them and never touch storage.
    let session = kem::WrapKeyPair::generate(rng);
    let mut context_log: Vec<String> = Vec::new();
    let mut plain_inputs = Vec::with_capacity(inputs.len());

    for (envelope, producer) in inputs {
        let nonce = regulator.issue_nonce(rng, events);
        let report = platform.attest(te, &session.public(), nonce);
        let request = AccessRequest {
            report,
            claimed_type: envelope.type_id.clone(),
            subject: envelope.subject,
            wrapped_key: envelope.wrapped_key.clone(),
            requester: requester.map(|agent| agent.answer(&nonce)),
        };
        match regulator.authorize(&request, now_s, rng, events) {
            AccessDecision::Deny { reason } => {
                return Err(TeError::AccessDenied {
                    reason,
                    type_text: type_handle(&envelope.type_id),
                });
            }
            AccessDecision::Grant { wrapped_payload_key, .. } => {
                let key_bytes =
                    session.unwrap(&wrapped_payload_key).map_err(|_| TeError::KeyFormat)?;
                let key = PayloadKey::from_bytes(&key_bytes).map_err(|_| TeError::KeyFormat)?;
                let payload = envelope.open(&key, producer).map_err(TeError::OpenFailed)?;
                events.push(Event::EnvelopeOpened { type_text: type_handle(&envelope.type_id) });
                plain_inputs.push(PlainInput {
                    type_id: envelope.type_id.clone(),
                    subject: envelope.subject,
                    payload,
                    envelope_digest: envelope.digest(),
                });
            }
        }
    }

    let logic = registry.get(&te.measurement()).ok_or(TeError::UnknownLogic)?;
    let raw_outputs = logic(&mut context_log, &plain_inputs).map_err(TeError::LogicFailed)?;
    events.push(Event::LogicRun { te: te.manifest.name.clone() });

    let mut outputs = Vec::new();
    let mut rows = Vec::new();
    for output in raw_outputs {
        match output {
            LogicOutput::Data { type_name, subject, payload } => {
                if te.manifest.sink {
                    return Err(TeError::TypeViolation(format!(
                        "sink {} attempted typed output {}",
                        te.manifest.name, type_name
                    )));
                }
                let type_id = TypeId::for_subject(&type_name, &subject)
                    .map_err(|e| TeError::TypeViolation(e.to_string()))?;
                let declared =
                    te.manifest.output_types.iter().any(|p| p.matches(&type_id, &subject));
                if !declared {
                    return Err(TeError::TypeViolation(type_handle(&type_id)));
                }
                let envelope = Envelope::seal(
                    &type_name,
                    subject,
                    &payload,
                    routing.key_for(&type_name),
                    &te.producer,
                    rng,
                )
                .map_err(|e| TeError::TypeViolation(e.to_string()))?;
                events.push(Event::OutputSealed { type_text: type_handle(&type_id) });
                outputs.push(envelope);
            }
            LogicOutput::Sink(row) => {
                if !te.manifest.sink {
                    return Err(TeError::ChannelShape);
                }
                rows.push(row);
            }
        }
    }

    let (sink_rows, notifications) = if te.manifest.sink {
        let policy = te.manifest.minimisation.clone().unwrap_or(MinimisationPolicy {
            allowed_fields: Vec::new(),
            aggregate_only: false,
            notification_template: None,
        });
        let minimised = minimise_rows(&rows, &policy);
        let notifications = match &policy.notification_template {
            Some(template) => minimised.iter().map(|r| render_template(template, r)).collect(),
            None => Vec::new(),
        };
        events.push(Event::SinkEmitted { te: te.manifest.name.clone(), rows: minimised.len() });
        (minimised, notifications)
    } else {
        (Vec::new(), Vec::new())
    };

    Ok(TeRun { outputs, sink_rows, notifications, context_log })
}

// ---------------------------------------------------------------------------
// Minimisation
// ---------------------------------------------------------------------------

/// Applies a minimisation policy to sink rows. Projection keeps only the
/// allowed fields of each row; aggregate-only policies collapse all rows
/// to a single count (plus per-field integer sums where every value
/// parses), so no individual row survives.
pub fn minimise_rows(rows: &[FieldMap], policy: &MinimisationPolicy) -> Vec<FieldMap> {
    if policy.aggregate_only {
        let mut aggregate = FieldMap::new();
        aggregate.insert("count".to_string(), rows.len().to_string());
        for field in &policy.allowed_fields {
            let values: Option<Vec<i64>> =
                rows.iter().map(|r| r.get(field).and_then(|v| v.parse::<i64>().ok())).collect();
            if let Some(values) = values {
                aggregate.insert(format!("sum_{field}"), values.iter().sum::<i64>().to_string());
            }
        }
        return vec![aggregate];
    }
    rows.iter()
        .map(|row| {
            policy
                .allowed_fields
                .iter()
                .filter_map(|f| row.get(f).map(|v| (f.clone(), v.clone())))
                .collect()
        })
        .collect()
}

/// Substitutes `{field}` placeholders from `row`; unknown fields render as
/// an empty string rather than leaking the placeholder name's absence.
pub fn render_template(template: &str, row: &FieldMap) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        match rest[start..].find('}') {
            Some(end) => {
                let name = &rest[start + 1..start + end];
                if let Some(value) = row.get(name) {
                    out.push_str(value);
                }
                rest = &rest[start + end + 1..];
            }
            None => {
                out.push_str(&rest[start..]);
                return out;
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const MANIFEST: &str = "name doctor-terminal\n\
        version 1\n\
        input_types DT4/DiagnosisReport@?x\n\
        output_types DT5/DoctorView\n\
        sink true\n\
        minimisation_policy fields=diagnosis,advice aggregate=false template=Diagnosis: {diagnosis}. {advice}\n\
        callback true\n";

    const PROCESSOR: &str = "name mri-analyzer\n\
        version 3\n\
        input_types DT2/MRIScan@?x\n\
        output_types DT4/DiagnosisReport@?x\n\
        sink false\n\
        minimisation_policy none\n\
        callback true\n";

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn manifest_parse_canonical_round_trip() {
        for text in [MANIFEST, PROCESSOR] {
            let m = TeManifest::parse(text).unwrap();
            let canonical = m.canonical_text();
            assert_eq!(TeManifest::parse(&canonical).unwrap(), m);
            // Already-canonical text survives unchanged.
            assert_eq!(canonical, text);
        }
    }

    #[test]
    fn manifest_tolerates_comments_but_not_disorder() {
        let commented = format!("# reviewed 2024-06\n\n{PROCESSOR}");
        assert!(TeManifest::parse(&commented).is_ok());

        let disordered = PROCESSOR.replace("name mri-analyzer\nversion 3\n", "version 3\nname mri-analyzer\n");
        assert!(TeManifest::parse(&disordered).is_err());

        let trailing = format!("{PROCESSOR}extra junk\n");
        assert_eq!(TeManifest::parse(&trailing).unwrap_err(), ManifestError::TrailingContent);

        assert!(TeManifest::parse(&PROCESSOR.replace("sink false", "sink maybe")).is_err());
        assert!(TeManifest::parse(&PROCESSOR.replace("version 3", "version three")).is_err());
    }

    #[test]
    fn minimisation_field_forms() {
        let m = TeManifest::parse(MANIFEST).unwrap();
        let policy = m.minimisation.unwrap();
        assert_eq!(policy.allowed_fields, vec!["diagnosis", "advice"]);
        assert!(!policy.aggregate_only);
        assert_eq!(
            policy.notification_template.as_deref(),
            Some("Diagnosis: {diagnosis}. {advice}")
        );
        assert_eq!(TeManifest::parse(PROCESSOR).unwrap().minimisation, None);
    }

    #[test]
    fn measurement_changes_on_any_single_bit_flip() {
        let code = b"fn analyze(scan) -> report { ... } build 7731";
        let base = measure(PROCESSOR, code);
        assert_eq!(base, measure(PROCESSOR, code), "measurement must be deterministic");

        let mut text_bytes = PROCESSOR.as_bytes().to_vec();
        for i in (0..text_bytes.len()).step_by(3) {
            text_bytes[i] ^= 0x01;
            let mutated = String::from_utf8_lossy(&text_bytes).into_owned();
            assert_ne!(measure(&mutated, code), base, "manifest flip at byte {i} kept measurement");
            text_bytes[i] ^= 0x01;
        }
        let mut code_bytes = code.to_vec();
        for i in 0..code_bytes.len() {
            code_bytes[i] ^= 0x80;
            assert_ne!(
                measure(PROCESSOR, &code_bytes),
                base,
                "code flip at byte {i} kept measurement"
            );
            code_bytes[i] ^= 0x80;
        }
    }

    #[test]
    fn attestation_binds_all_three_claims() {
        let mut r = rng(1);
        let te = TeInstance::load(PROCESSOR, b"code", &mut r).unwrap();
        let platform = TePlatform::new(&mut r);
        let session = kem::WrapKeyPair::generate(&mut r);
        let nonce = [7u8; 32];
        let report = platform.attest(&te, &session.public(), nonce);
        assert!(report.verify(&platform.verify_key()));

        // Wrong platform key.
        let other = TePlatform::new(&mut r);
        assert!(!report.verify(&other.verify_key()));

        // Any substituted claim breaks the signature.
        let mut bad = report.clone();
        bad.nonce = [8u8; 32];
        assert!(!bad.verify(&platform.verify_key()));
        let mut bad = report.clone();
        bad.session_key = kem::WrapKeyPair::generate(&mut r).public();
        assert!(!bad.verify(&platform.verify_key()));
        let mut bad = report.clone();
        bad.measurement = measure(PROCESSOR, b"different code");
        assert!(!bad.verify(&platform.verify_key()));
    }

    #[test]
    fn attestation_report_wire_round_trip() {
        let mut r = rng(2);
        let te = TeInstance::load(PROCESSOR, b"code", &mut r).unwrap();
        let platform = TePlatform::new(&mut r);
        let session = kem::WrapKeyPair::generate(&mut r);
        let report = platform.attest(&te, &session.public(), [3u8; 32]);
        let back = AttestationReport::from_bytes(&report.to_bytes()).unwrap();
        assert_eq!(back, report);
        assert!(AttestationReport::from_bytes(&report.to_bytes()[..10]).is_none());
    }

    #[test]
    fn minimise_projection_drops_undeclared_fields() {
        let policy = MinimisationPolicy {
            allowed_fields: vec!["diagnosis".into(), "advice".into()],
            aggregate_only: false,
            notification_template: None,
        };
        let mut row = FieldMap::new();
        row.insert("diagnosis".into(), "all clear".into());
        row.insert("raw_scan_path".into(), "/vault/scan-7.img".into());
        row.insert("patient_notes".into(), "sensitive".into());
        let out = minimise_rows(&[row], &policy);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].get("diagnosis").unwrap(), "all clear");
        assert!(!out[0].contains_key("raw_scan_path"));
        assert!(!out[0].contains_key("patient_notes"));
        assert!(!out[0].contains_key("advice"), "absent fields stay absent");
    }

    #[test]
    fn minimise_aggregate_collapses_rows() {
        let policy = MinimisationPolicy {
            allowed_fields: vec!["amount".into()],
            aggregate_only: true,
            notification_template: None,
        };
        let rows: Vec<FieldMap> = (0..5)
            .map(|i| {
                let mut r = FieldMap::new();
                r.insert("amount".into(), (i * 10).to_string());
                r.insert("name".into(), format!("person-{i}"));
                r
            })
            .collect();
        let out = minimise_rows(&rows, &policy);
        assert_eq!(out.len(), 1, "aggregate-only must not emit individual rows");
        assert_eq!(out[0].get("count").unwrap(), "5");
        assert_eq!(out[0].get("sum_amount").unwrap(), "100");
        assert!(out[0].values().all(|v| !v.contains("person-")), "no row values may survive");
    }

    #[test]
    fn template_rendering() {
        let mut row = FieldMap::new();
        row.insert("diagnosis".into(), "stable".into());
        assert_eq!(
            render_template("Result: {diagnosis}. Missing: [{nope}]", &row),
            "Result: stable. Missing: []"
        );
        assert_eq!(render_template("no placeholders", &row), "no placeholders");
        assert_eq!(render_template("dangling {brace", &row), "dangling {brace");
    }
}
