//! The three end-to-end case studies, assembled from kernel pieces.
//!
//! Each scenario is a scripted multi-party run: a config names the cast
//! and a list of steps, a driver executes the steps against real
//! regulators, TEs, stores, and identities, and the result is a
//! [`ScenarioReport`] — step outcomes checked against scripted
//! expectations, decision tallies read back from the audit logs, and the
//! scenario's own invariant checks. Everything is deterministic in the
//! seed: two runs with the same config and seed produce byte-identical
//! report text.
//!
//! This module holds what the drivers share: the line-oriented config
//! format (the same `key value` family as manifests), the report
//! structure, outcome tokens, and [`ComponentLogs`] — the record of every
//! byte each party ever wrote down, kept so tests can prove isolation by
//! scanning rather than by trusting.

pub mod ct;
pub mod dbt;
pub mod ehr;

use crate::crypto::hash;
use crate::crypto::sig;
use crate::identity::{
    issuance_signing_input, key_attribute, Credential, Evidence, IdentityAuthority, Issuer,
    MasterIdentity, VirtualIdentity,
};
use crate::regulator::audit::AuditLog;
use crate::regulator::{
    ConsentObject, ConsentPredicate, RequesterAgent, SignedConsent, SignedRevocation,
};
use crate::te::{TeError, TeRun};
use crate::pattern::TypePattern;
use rand::{CryptoRng, RngCore};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

/// A parsed scenario config: the scenario name, free-form parameters, and
/// the scripted step list, in file order. The format is the manifest
/// family — one `key value` per line, `#` comments, blank lines ignored —
/// with two conventions: `scenario <name>` must appear before any step,
/// and `step <action> [k=v ...] [expect=...]` lines form the script.
#[derive(Clone, Debug)]
pub struct ScenarioConfig {
    pub scenario: String,
    params: Vec<(String, String)>,
    pub steps: Vec<Step>,
}

/// One scripted action. `expect` is the outcome the script demands;
/// a run whose observed outcome differs fails its expectations (without
/// aborting — later steps still run, so one report shows every mismatch).
#[derive(Clone, Debug)]
pub struct Step {
    pub action: String,
    pub args: BTreeMap<String, String>,
    pub expect: Outcome,
    pub line: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("config line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

fn config_error(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError { line, message: message.into() }
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<ScenarioConfig, ConfigError> {
        let mut scenario = None;
        let mut params = Vec::new();
        let mut steps = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let no = no + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let value = value.trim();
            match key {
                "scenario" => {
                    if scenario.is_some() {
                        return Err(config_error(no, "scenario named twice"));
                    }
                    if value.is_empty() {
                        return Err(config_error(no, "scenario needs a name"));
                    }
                    scenario = Some(value.to_string());
                }
                "step" => steps.push(Step::parse(no, value)?),
                _ => {
                    if value.is_empty() {
                        return Err(config_error(no, format!("{key} has no value")));
                    }
                    params.push((key.to_string(), value.to_string()));
                }
            }
        }
        let scenario =
            scenario.ok_or_else(|| config_error(0, "config never names a scenario"))?;
        Ok(ScenarioConfig { scenario, params, steps })
    }

    /// The last value given for `key` (configs may override earlier lines).
    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Every value given for `key`, in file order (for repeatable keys
    /// such as `trajectory`).
    pub fn params_all(&self, key: &str) -> Vec<&str> {
        self.params.iter().filter(|(k, _)| k == key).map(|(_, v)| v.as_str()).collect()
    }

    pub fn param_u64(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.param(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<u64>()
                .map_err(|_| config_error(0, format!("{key} must be an integer, got {v:?}"))),
        }
    }

    /// Rejects params outside the scenario's vocabulary — a misspelled
    /// knob should be a config error, not a silently ignored line.
    pub fn check_params(&self, known: &[&str]) -> Result<(), ConfigError> {
        for (key, _) in &self.params {
            if !known.contains(&key.as_str()) {
                return Err(config_error(0, format!("unknown parameter {key:?}")));
            }
        }
        Ok(())
    }
}

impl Step {
    fn parse(line: usize, text: &str) -> Result<Step, ConfigError> {
        let mut tokens = text.split_whitespace();
        let action = tokens
            .next()
            .ok_or_else(|| config_error(line, "step needs an action"))?
            .to_string();
        let mut args = BTreeMap::new();
        let mut expect = Outcome::Ok;
        for token in tokens {
            let Some((k, v)) = token.split_once('=') else {
                return Err(config_error(line, format!("step argument {token:?} is not k=v")));
            };
            if k == "expect" {
                expect = Outcome::parse(v).map_err(|e| config_error(line, e))?;
            } else {
                args.insert(k.to_string(), v.to_string());
            }
        }
        Ok(Step { action, args, expect, line })
    }

    pub fn arg(&self, key: &str) -> Option<&str> {
        self.args.get(key).map(String::as_str)
    }

    pub fn arg_usize(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.arg(key) {
            None => Ok(default),
            Some(v) => v.parse::<usize>().map_err(|_| {
                config_error(self.line, format!("{key} must be an integer, got {v:?}"))
            }),
        }
    }

    pub fn arg_u64(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.arg(key) {
            None => Ok(default),
            Some(v) => v.parse::<u64>().map_err(|_| {
                config_error(self.line, format!("{key} must be an integer, got {v:?}"))
            }),
        }
    }

    /// The step as rendered in reports: action plus sorted args.
    pub fn label(&self) -> String {
        let mut label = self.action.clone();
        for (k, v) in &self.args {
            label.push_str(&format!(" {k}={v}"));
        }
        label
    }
}

// ---------------------------------------------------------------------------
// Outcomes
// ---------------------------------------------------------------------------

/// What a step produced (or was expected to): success, a specific
/// regulator denial, or a specific runtime error. The token forms are
/// `ok`, `deny:<REASON>`, and `error:<KIND>`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Outcome {
    Ok,
    Deny(String),
    Error(String),
}

impl Outcome {
    pub fn parse(text: &str) -> Result<Outcome, String> {
        if text == "ok" {
            return Ok(Outcome::Ok);
        }
        if let Some(reason) = text.strip_prefix("deny:") {
            return Ok(Outcome::Deny(reason.to_string()));
        }
        if let Some(kind) = text.strip_prefix("error:") {
            return Ok(Outcome::Error(kind.to_string()));
        }
        Err(format!("expectation {text:?} is not ok, deny:<REASON>, or error:<KIND>"))
    }

    /// Maps a TE run result to its outcome token. Regulator denials keep
    /// their audit reason; runtime violations get stable kind names; logic
    /// failures surface the logic's own error token.
    pub fn of_run(result: &Result<TeRun, TeError>) -> Outcome {
        match result {
            Ok(_) => Outcome::Ok,
            Err(TeError::AccessDenied { reason, .. }) => Outcome::Deny(reason.to_string()),
            Err(TeError::TypeViolation(_)) => Outcome::Error("TYPE_VIOLATION".into()),
            Err(TeError::ChannelShape) => Outcome::Error("CHANNEL_SHAPE".into()),
            Err(TeError::OpenFailed(_)) => Outcome::Error("OPEN_FAILED".into()),
            Err(TeError::InputNotDeclared(_)) => Outcome::Error("INPUT_NOT_DECLARED".into()),
            Err(TeError::KeyFormat) => Outcome::Error("KEY_FORMAT".into()),
            Err(TeError::UnknownLogic) => Outcome::Error("UNKNOWN_LOGIC".into()),
            Err(TeError::LogicFailed(message)) => {
                Outcome::Error(message.split_whitespace().next().unwrap_or("LOGIC_FAILED").into())
            }
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Ok => f.write_str("ok"),
            Outcome::Deny(reason) => write!(f, "deny:{reason}"),
            Outcome::Error(kind) => write!(f, "error:{kind}"),
        }
    }
}

/// A config problem: the run cannot even start. Distinct from a run whose
/// expectations fail — callers map the two to different exit codes.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("{0}")]
    Config(ConfigError),
    #[error("config: {0}")]
    Setup(String),
}

impl From<ConfigError> for ScenarioError {
    fn from(e: ConfigError) -> Self {
        ScenarioError::Config(e)
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// One step's line in the report.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub label: String,
    pub expected: Outcome,
    pub observed: Outcome,
}

impl StepReport {
    pub fn passed(&self) -> bool {
        self.expected == self.observed
    }
}

/// One scenario invariant, checked by the driver after the script runs.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// The deliverable of a run: what was scripted, what happened, what the
/// regulators decided, and whether the scenario's invariants held.
/// [`ScenarioReport::to_text`] is the canonical rendering; it contains no
/// wall-clock time and no unseeded randomness.
#[derive(Clone, Debug, Default)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub steps: Vec<StepReport>,
    pub grants: usize,
    pub denies: BTreeMap<String, usize>,
    pub checks: Vec<CheckReport>,
    pub digests: Vec<(String, String)>,
    /// Serialized audit chains by authority name, for writing alongside
    /// the report and re-verifying offline. Not rendered by `to_text`;
    /// the digests above already commit to these bytes.
    pub audits: Vec<(String, String)>,
}

impl ScenarioReport {
    pub fn new(scenario: &str, seed: u64) -> Self {
        Self { scenario: scenario.to_string(), seed, ..Self::default() }
    }

    pub fn record_step(&mut self, step: &Step, observed: Outcome) {
        self.steps.push(StepReport { label: step.label(), expected: step.expect.clone(), observed });
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(CheckReport { name: name.to_string(), passed, detail: detail.into() });
    }

    /// Records a named artifact digest (first 16 hex of its hash).
    pub fn digest(&mut self, name: &str, bytes: &[u8]) {
        let hex = hash::hash(bytes).to_hex()[..16].to_string();
        self.digests.push((name.to_string(), hex));
    }

    /// Attaches one authority's serialized audit chain.
    pub fn attach_audit(&mut self, name: &str, text: String) {
        self.audits.push((name.to_string(), text));
    }

    /// Reads grant/deny tallies back from the audit logs — the decisions
    /// reported are the decisions recorded, not a driver-side count.
    pub fn tally<'a>(&mut self, audits: impl IntoIterator<Item = &'a AuditLog>) {
        for audit in audits {
            for entry in audit.entries() {
                if entry.event == "access-grant" {
                    self.grants += 1;
                } else if let Some(reason) = entry.event.strip_prefix("access-deny:") {
                    *self.denies.entry(reason.to_string()).or_insert(0) += 1;
                }
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.steps.iter().all(StepReport::passed) && self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("scenario {}\n", self.scenario));
        out.push_str(&format!("seed {}\n", self.seed));
        out.push_str(&format!("steps {}\n", self.steps.len()));
        for (i, step) in self.steps.iter().enumerate() {
            out.push_str(&format!(
                "step {} {} -> {} (expected {}) {}\n",
                i + 1,
                step.label,
                step.observed,
                step.expected,
                if step.passed() { "PASS" } else { "FAIL" }
            ));
        }
        out.push_str(&format!("grants {}\n", self.grants));
        out.push_str(&format!("denies {}\n", self.denies.values().sum::<usize>()));
        for (reason, count) in &self.denies {
            out.push_str(&format!("deny {reason} {count}\n"));
        }
        for check in &self.checks {
            out.push_str(&format!(
                "check {} {} {}\n",
                check.name,
                if check.passed { "PASS" } else { "FAIL" },
                check.detail
            ));
        }
        for (name, hex) in &self.digests {
            out.push_str(&format!("digest {name} {hex}\n"));
        }
        out.push_str(&format!("outcome {}\n", if self.passed() { "PASS" } else { "FAIL" }));
        out
    }
}

// ---------------------------------------------------------------------------
// Component logs
// ---------------------------------------------------------------------------

/// Everything each party of a run ever wrote somewhere durable: log
/// lines, ledgers, persisted files. Isolation claims ("these two values
/// never co-occur outside the enclave") are proven by scanning these
/// bytes, not by auditing the driver code.
#[derive(Default, Debug)]
pub struct ComponentLogs {
    blobs: BTreeMap<String, Vec<u8>>,
}

impl ComponentLogs {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a log line to a component's record.
    pub fn note(&mut self, component: &str, line: impl AsRef<str>) {
        let blob = self.blobs.entry(component.to_string()).or_default();
        blob.extend_from_slice(line.as_ref().as_bytes());
        blob.push(b'\n');
    }

    /// Appends raw bytes (a persisted file image) to a component's record.
    pub fn attach(&mut self, component: &str, bytes: &[u8]) {
        self.blobs.entry(component.to_string()).or_default().extend_from_slice(bytes);
    }

    pub fn components(&self) -> impl Iterator<Item = (&str, &[u8])> {
        self.blobs.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn get(&self, component: &str) -> &[u8] {
        self.blobs.get(component).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Components whose record contains `needle` — as raw bytes or as the
    /// lowercase hex spelling (logs are usually text).
    pub fn components_containing(&self, needle: &[u8]) -> Vec<&str> {
        let hex_form = hex::encode(needle).into_bytes();
        self.blobs
            .iter()
            .filter(|(_, blob)| {
                find_subsequence(blob, needle) || find_subsequence(blob, &hex_form)
            })
            .map(|(name, _)| name.as_str())
            .collect()
    }
}

/// Splits a `k=v;k=v` payload into sink fields — the scenarios' common
/// record format for text payloads.
pub fn parse_fields(payload: &[u8]) -> crate::te::FieldMap {
    String::from_utf8_lossy(payload)
        .split(';')
        .filter_map(|pair| pair.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Plain byte-substring search; the workhorse of every leak scan.
pub fn find_subsequence(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

// ---------------------------------------------------------------------------
// Cast-building helpers
// ---------------------------------------------------------------------------

/// Certifies that a vid's signing key belongs to that vid: the authority
/// checks the derivation and the possession proof, then signs.
pub fn certify_vid_key(
    authority: &mut IdentityAuthority,
    person: &MasterIdentity,
    vid: &VirtualIdentity,
    key: &sig::KeyPair,
) -> Credential {
    let attribute = key_attribute(&key.public());
    let proof = key.sign(&Credential::message_bytes(&vid.value, &attribute, &authority.name));
    authority
        .certify_vid_key(&person.master_id, &vid.org_tag, vid.counter, &vid.value, &key.public(), &proof)
        .expect("a freshly derived vid must certify")
}

/// Enrolls a person, derives their vid at `org`, certifies the vid key,
/// and equips them with a role credential from `issuer` — the full kit a
/// human requester needs to face a sink TE.
pub fn enroll_requester(
    authority: &mut IdentityAuthority,
    issuer: &mut Issuer,
    person_label: &str,
    org: &str,
    role: &str,
    rng: &mut (impl RngCore + CryptoRng),
) -> (MasterIdentity, VirtualIdentity, RequesterAgent) {
    let person = authority.enroll(person_label, rng).expect("fresh label");
    let vid = person.derive_vid(org, 0);
    let key = person.vid_signing_key(&vid);
    let cert = certify_vid_key(authority, &person, &vid, &key);
    let attribute = format!("role:{role}");
    issuer.register_subject(vid.value, key.public(), &[&attribute]);
    let role_credential = issuer
        .issue_direct(
            &vid.value,
            &attribute,
            &Evidence {
                presented_vid: vid.value,
                signature: key
                    .sign(&issuance_signing_input(&issuer.name, &attribute, &vid.value)),
            },
        )
        .expect("registered subject");
    let agent = RequesterAgent::new(vid.value, person.vid_signing_key(&vid), cert, role_credential);
    (person, vid, agent)
}

/// Builds and signs a consent predicate for a subject.
pub fn sign_consent(
    person: &MasterIdentity,
    vid: &VirtualIdentity,
    key_cert: &Credential,
    verb: &str,
    object: ConsentObject,
    scope: &[&str],
    expiry_s: u64,
    rng: &mut (impl RngCore + CryptoRng),
) -> SignedConsent {
    let mut nonce = [0u8; 32];
    rng.fill_bytes(&mut nonce);
    let predicate = ConsentPredicate {
        subject_vid: vid.value,
        verb: verb.to_string(),
        object,
        scope: scope
            .iter()
            .map(|s| TypePattern::parse(s).expect("scenario scopes are fixed strings"))
            .collect(),
        expiry_s,
        nonce,
    };
    let signature = person.vid_signing_key(vid).sign(&predicate.signing_input());
    SignedConsent { predicate, signature, key_cert: key_cert.clone() }
}

/// Builds and signs a revocation matching [`sign_consent`]'s predicate.
pub fn sign_revocation(
    person: &MasterIdentity,
    vid: &VirtualIdentity,
    key_cert: &Credential,
    verb: &str,
    object: ConsentObject,
) -> SignedRevocation {
    let signature = person
        .vid_signing_key(vid)
        .sign(&SignedRevocation::signing_input(&vid.value, verb, &object));
    SignedRevocation {
        subject_vid: vid.value,
        verb: verb.to_string(),
        object,
        signature,
        key_cert: key_cert.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_params_and_steps() {
        let text = "# fixture\n\
            scenario ehr\n\
            patients 2\n\
            trajectory 0 0 10 10\n\
            trajectory 1 0 12 10\n\
            step consent verb=treatment patient=0\n\
            step analyze patient=1 expect=deny:PREDICATE_MISSING\n";
        let config = ScenarioConfig::parse(text).unwrap();
        assert_eq!(config.scenario, "ehr");
        assert_eq!(config.param("patients"), Some("2"));
        assert_eq!(config.params_all("trajectory"), vec!["0 0 10 10", "1 0 12 10"]);
        assert_eq!(config.steps.len(), 2);
        assert_eq!(config.steps[0].action, "consent");
        assert_eq!(config.steps[0].arg("verb"), Some("treatment"));
        assert_eq!(config.steps[0].expect, Outcome::Ok);
        assert_eq!(config.steps[1].expect, Outcome::Deny("PREDICATE_MISSING".into()));
    }

    #[test]
    fn config_rejects_malformed_lines() {
        assert!(ScenarioConfig::parse("step consent\n").is_err(), "no scenario named");
        assert!(ScenarioConfig::parse("scenario ehr\nscenario dbt\n").is_err());
        assert!(ScenarioConfig::parse("scenario ehr\nstep\n").is_err());
        assert!(ScenarioConfig::parse("scenario ehr\nstep go bare-token\n").is_err());
        assert!(ScenarioConfig::parse("scenario ehr\nstep go expect=maybe\n").is_err());
        let config = ScenarioConfig::parse("scenario ehr\nagents 5\n").unwrap();
        assert!(config.check_params(&["agents"]).is_ok());
        assert!(config.check_params(&["patients"]).is_err());
    }

    #[test]
    fn outcome_tokens_round_trip() {
        for text in ["ok", "deny:NO_RULE", "error:TYPE_VIOLATION"] {
            assert_eq!(Outcome::parse(text).unwrap().to_string(), text);
        }
        assert!(Outcome::parse("denied").is_err());
    }

    #[test]
    fn report_text_is_deterministic_and_complete() {
        let mut report = ScenarioReport::new("ehr", 7);
        let step = Step {
            action: "analyze".into(),
            args: BTreeMap::from([("patient".to_string(), "0".to_string())]),
            expect: Outcome::Ok,
            line: 1,
        };
        report.record_step(&step, Outcome::Ok);
        report.check("conservation", true, "sum=0");
        report.digest("events", b"event text");
        let text = report.to_text();
        assert!(text.contains("scenario ehr"));
        assert!(text.contains("step 1 analyze patient=0 -> ok (expected ok) PASS"));
        assert!(text.contains("check conservation PASS sum=0"));
        assert!(text.ends_with("outcome PASS\n"));
        assert_eq!(text, report.clone().to_text(), "rendering is pure");

        report.record_step(&step, Outcome::Deny("NO_RULE".into()));
        assert!(!report.passed());
        assert!(report.to_text().ends_with("outcome FAIL\n"));
    }

    #[test]
    fn component_logs_scan_text_and_bytes() {
        let mut logs = ComponentLogs::new();
        let secret = [0xabu8; 4];
        logs.note("ledger", format!("credit {}", hex::encode(secret)));
        logs.attach("store", &[1, 2, 0xab, 0xab, 0xab, 0xab, 3]);
        logs.note("clean", "nothing here");
        assert_eq!(logs.components_containing(&secret), vec!["ledger", "store"]);
        assert!(find_subsequence(b"abcdef", b"cde"));
        assert!(!find_subsequence(b"abcdef", b"ace"));
        assert!(!find_subsequence(b"abc", b""), "empty needle matches nothing");
    }
}
