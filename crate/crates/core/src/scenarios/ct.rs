//! The contact-tracing case study: phones continuously contribute
//! location samples and proximity receipts to a health service, yet the
//! service can answer exactly one question — "who was near an infected
//! person?" — and nothing else.
//!
//! Every sample leaves the phone as a sealed `CTT/Token`; a phone that
//! hears another's broadcast uploads a `CTR/Receipt` naming the sealed
//! token it heard (by envelope digest — receivers never see inside).
//! An ingest TE verifies device signatures against the enrolment
//! registry, joins receipts to their tokens, and emits canonical
//! `CTC/ContactRecord`s. A tracer TE — the only party that ever sees
//! trajectories in the clear — indexes them on a space/time grid and
//! emits a bare list of contact vids. A notifier sink turns that list
//! into phone-number advisories for a ministry-approved health officer,
//! reading *every* registered phone so the access pattern itself reveals
//! nothing about who is on the list.
//!
//! The step vocabulary includes one attack per threat the design answers:
//! eavesdropping on tokens, an insider at the service, social-graph
//! exposure from stored data, forged proximity claims against a victim,
//! and under-reporting (a tampered app build, or silent withholding).

use super::{
    certify_vid_key, enroll_requester, find_subsequence, sign_consent, ComponentLogs,
    ConfigError, Outcome, ScenarioConfig, ScenarioError, ScenarioReport, Step,
};
use crate::clock::SimClock;
use crate::crypto::envelope::{derive_payload_key, Envelope, Subject};
use crate::crypto::hash::{self, Digest};
use crate::crypto::{kem, sig};
use crate::identity::{
    issuance_signing_input, Evidence, IdentityAuthority, Issuer, VidValue, VirtualIdentity,
};
use crate::regulator::{AccessDecision, AccessRequest, ConsentObject, Regulator, RequesterAgent};
use crate::store::{EnvelopeStore, StoreKeys};
use crate::te::{run_te, FieldMap, LogicOutput, LogicRegistry, TeInstance, TePlatform};
use crate::trace::{vid_handle, Event, EventLog};
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

const START_S: u64 = 1_700_000_000;
const CONSENT_TTL_S: u64 = 90 * 86_400;

const RECORD_DOMAIN: &[u8] = b"pbd.ct.record.v1";
const RECEIPT_DOMAIN: &[u8] = b"pbd.ct.receipt.v1";
const INFECTION_DOMAIN: &[u8] = b"pbd.ct.infection.v1";

// ---------------------------------------------------------------------------
// Records, parameters, and the trace itself
// ---------------------------------------------------------------------------

/// How a located sample came to exist: a device's own GPS fix, or a
/// proximity receipt placing the receiver at a heard token's coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum RecordOrigin {
    Gps,
    BleReceipt,
}

/// One located sample: a vid at integer-metre planar coordinates at a
/// second-resolution time. Integer geometry keeps every distance
/// comparison exact and every run reproducible.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ContactRecord {
    pub vid: VidValue,
    pub x: i64,
    pub y: i64,
    pub time_s: u64,
    pub origin: RecordOrigin,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RecordError {
    #[error("record must be {RECORD_LEN} bytes, got {0}")]
    BadLength(usize),
    #[error("unknown origin tag {0}")]
    BadOrigin(u8),
    #[error("signature malformed or wrong length")]
    BadSignature,
}

pub const RECORD_LEN: usize = 32 + 8 + 8 + 8 + 1;

impl ContactRecord {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.vid.to_vec();
        out.extend_from_slice(&self.x.to_be_bytes());
        out.extend_from_slice(&self.y.to_be_bytes());
        out.extend_from_slice(&self.time_s.to_be_bytes());
        out.push(match self.origin {
            RecordOrigin::Gps => 0,
            RecordOrigin::BleReceipt => 1,
        });
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ContactRecord, RecordError> {
        if bytes.len() != RECORD_LEN {
            return Err(RecordError::BadLength(bytes.len()));
        }
        let origin = match bytes[56] {
            0 => RecordOrigin::Gps,
            1 => RecordOrigin::BleReceipt,
            other => return Err(RecordError::BadOrigin(other)),
        };
        Ok(ContactRecord {
            vid: bytes[..32].try_into().expect("length checked"),
            x: i64::from_be_bytes(bytes[32..40].try_into().expect("length checked")),
            y: i64::from_be_bytes(bytes[40..48].try_into().expect("length checked")),
            time_s: u64::from_be_bytes(bytes[48..56].try_into().expect("length checked")),
            origin,
        })
    }

    /// The device-signed form a phone uploads: record bytes followed by an
    /// ed25519 signature over the domain-separated record.
    pub fn sign(&self, device: &sig::KeyPair) -> Vec<u8> {
        let body = self.to_bytes();
        let mut input = RECORD_DOMAIN.to_vec();
        input.extend_from_slice(&body);
        let mut out = body;
        out.extend_from_slice(&device.sign(&input).to_bytes());
        out
    }

    pub fn parse_signed(bytes: &[u8]) -> Result<(ContactRecord, sig::Signature), RecordError> {
        if bytes.len() != RECORD_LEN + 64 {
            return Err(RecordError::BadLength(bytes.len()));
        }
        let record = ContactRecord::from_bytes(&bytes[..RECORD_LEN])?;
        let signature = sig::Signature::from_bytes(&bytes[RECORD_LEN..])
            .map_err(|_| RecordError::BadSignature)?;
        Ok((record, signature))
    }

    pub fn verify(&self, signature: &sig::Signature, device: &sig::VerifyKey) -> bool {
        let mut input = RECORD_DOMAIN.to_vec();
        input.extend_from_slice(&self.to_bytes());
        device.verify(&input, signature)
    }
}

/// The tracing query: spatial tolerance ε (metres), temporal tolerance δ
/// (seconds), how far back to look, and the query instant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceParams {
    pub epsilon_m: i64,
    pub delta_s: u64,
    pub window_s: u64,
    pub time_now: u64,
}

impl TraceParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.epsilon_m.to_be_bytes().to_vec();
        out.extend_from_slice(&self.delta_s.to_be_bytes());
        out.extend_from_slice(&self.window_s.to_be_bytes());
        out.extend_from_slice(&self.time_now.to_be_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<TraceParams> {
        if bytes.len() != 32 {
            return None;
        }
        Some(TraceParams {
            epsilon_m: i64::from_be_bytes(bytes[..8].try_into().ok()?),
            delta_s: u64::from_be_bytes(bytes[8..16].try_into().ok()?),
            window_s: u64::from_be_bytes(bytes[16..24].try_into().ok()?),
            time_now: u64::from_be_bytes(bytes[24..].try_into().ok()?),
        })
    }

    pub fn valid(&self) -> bool {
        self.epsilon_m > 0 && self.delta_s > 0 && self.window_s > 0 && self.time_now > 0
    }
}

fn in_contact(a: &ContactRecord, b: &ContactRecord, params: &TraceParams) -> bool {
    let dx = a.x as i128 - b.x as i128;
    let dy = a.y as i128 - b.y as i128;
    let eps = params.epsilon_m as i128;
    dx * dx + dy * dy <= eps * eps && a.time_s.abs_diff(b.time_s) <= params.delta_s
}

fn eligible(record: &ContactRecord, infected: &VidValue, params: &TraceParams) -> bool {
    record.vid == *infected
        && record.time_s <= params.time_now
        && record.time_s >= params.time_now.saturating_sub(params.window_s)
}

/// The reference answer: every infected sample in the window against
/// every other record, quadratic and obviously correct.
pub fn brute_trace(
    records: &[ContactRecord],
    infected: &VidValue,
    params: &TraceParams,
) -> BTreeSet<VidValue> {
    let mut contacts = BTreeSet::new();
    for ra in records.iter().filter(|r| eligible(r, infected, params)) {
        for rv in records.iter().filter(|r| r.vid != *infected) {
            if in_contact(ra, rv, params) {
                contacts.insert(rv.vid);
            }
        }
    }
    contacts
}

/// A space/time bucket index with cell size exactly (ε, ε, δ): any two
/// records within ε metres and δ seconds of each other land in the same
/// bucket or an adjacent one, so a 3×3×3 probe around a sample is
/// complete — no tolerance, no misses.
pub struct GridIndex {
    cell_m: i64,
    bucket_s: i64,
    cells: BTreeMap<(i64, i64, i64), Vec<usize>>,
}

impl GridIndex {
    pub fn build(records: &[ContactRecord], epsilon_m: i64, delta_s: u64) -> GridIndex {
        assert!(epsilon_m > 0 && delta_s > 0, "grid cells must have positive extent");
        let bucket_s = delta_s as i64;
        let mut cells: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            cells.entry(Self::key(r, epsilon_m, bucket_s)).or_default().push(i);
        }
        GridIndex { cell_m: epsilon_m, bucket_s, cells }
    }

    fn key(r: &ContactRecord, cell_m: i64, bucket_s: i64) -> (i64, i64, i64) {
        (r.x.div_euclid(cell_m), r.y.div_euclid(cell_m), (r.time_s as i64).div_euclid(bucket_s))
    }

    /// Indices of records in the 27 buckets around `r`'s own.
    pub fn neighbourhood(&self, r: &ContactRecord) -> impl Iterator<Item = usize> + '_ {
        let (cx, cy, ct) = Self::key(r, self.cell_m, self.bucket_s);
        (-1..=1).flat_map(move |dx| {
            (-1..=1).flat_map(move |dy| {
                (-1..=1).flat_map(move |dt| {
                    self.cells
                        .get(&(cx + dx, cy + dy, ct + dt))
                        .map(|v| v.iter().copied())
                        .into_iter()
                        .flatten()
                })
            })
        })
    }
}

/// The production trace: identical answer to [`brute_trace`], near-linear
/// work. Candidate pairs come from the grid neighbourhood; the exact
/// predicate then decides.
pub fn grid_trace(
    records: &[ContactRecord],
    infected: &VidValue,
    params: &TraceParams,
) -> BTreeSet<VidValue> {
    let index = GridIndex::build(records, params.epsilon_m, params.delta_s);
    let mut contacts = BTreeSet::new();
    for ra in records.iter().filter(|r| eligible(r, infected, params)) {
        for i in index.neighbourhood(ra) {
            let rv = &records[i];
            if rv.vid != *infected && in_contact(ra, rv, params) {
                contacts.insert(rv.vid);
            }
        }
    }
    contacts
}

/// Bounded random walks on the integer grid: each agent starts uniformly
/// in `[0, area)²` and moves up to `step_m` per axis per tick, clamped to
/// the area. Returns `positions[tick][agent]`.
pub fn random_walks(
    rng: &mut (impl RngCore + CryptoRng),
    agents: usize,
    ticks: usize,
    area_m: i64,
    step_m: i64,
) -> Vec<Vec<(i64, i64)>> {
    assert!(area_m > 0 && step_m >= 0);
    let mut current: Vec<(i64, i64)> = (0..agents)
        .map(|_| {
            (
                (rng.next_u64() % area_m as u64) as i64,
                (rng.next_u64() % area_m as u64) as i64,
            )
        })
        .collect();
    let mut out = Vec::with_capacity(ticks);
    for tick in 0..ticks {
        if tick > 0 {
            for pos in &mut current {
                pos.0 = (pos.0 + step(rng, step_m)).clamp(0, area_m - 1);
                pos.1 = (pos.1 + step(rng, step_m)).clamp(0, area_m - 1);
            }
        }
        out.push(current.clone());
    }
    out
}

fn step(rng: &mut impl RngCore, step_m: i64) -> i64 {
    (rng.next_u64() % (2 * step_m + 1) as u64) as i64 - step_m
}

/// Pairs `(i, j)` with `i < j` within `range_m` of each other — who would
/// hear whose broadcast at one instant.
pub fn ble_pairs(positions: &[(i64, i64)], range_m: i64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..positions.len() {
        for j in i + 1..positions.len() {
            let dx = positions[i].0 as i128 - positions[j].0 as i128;
            let dy = positions[i].1 as i128 - positions[j].1 as i128;
            if dx * dx + dy * dy <= (range_m as i128) * (range_m as i128) {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// GPS-origin records for precomputed walks: `vids[i]` at
/// `walks[tick][i]`, timestamped `start_s + tick·period_s`.
pub fn walk_records(
    walks: &[Vec<(i64, i64)>],
    vids: &[VidValue],
    start_s: u64,
    period_s: u64,
) -> Vec<ContactRecord> {
    let mut records = Vec::new();
    for (tick, positions) in walks.iter().enumerate() {
        for (i, &(x, y)) in positions.iter().enumerate() {
            records.push(ContactRecord {
                vid: vids[i],
                x,
                y,
                time_s: start_s + tick as u64 * period_s,
                origin: RecordOrigin::Gps,
            });
        }
    }
    records
}

// ---------------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------------

/// The phone app itself is a measured TE: uploads are accepted only from
/// attested builds, which is what defeats "run a doctored app and upload
/// junk" (or nothing).
pub const APP_MANIFEST: &str = "name ct-app\n\
    version 1\n\
    input_types\n\
    output_types CTT/Token@*,CTR/Receipt@*\n\
    sink false\n\
    minimisation_policy none\n\
    callback true\n";
pub const APP_CODE: &[u8] = b"ct-app build 2024.1";

pub const INGEST_MANIFEST: &str = "name ct-ingest\n\
    version 1\n\
    input_types CTT/Token@?x,CTR/Receipt@?x\n\
    output_types CTC/ContactRecord@*\n\
    sink false\n\
    minimisation_policy none\n\
    callback true\n";

pub const TRACER_MANIFEST: &str = "name ct-tracer\n\
    version 1\n\
    input_types CTI/InfectionReport@?x,CTP/TraceParams@-,CTC/ContactRecord@?x\n\
    output_types CTL/ContactList@-\n\
    sink false\n\
    minimisation_policy none\n\
    callback true\n";
pub const TRACER_CODE: &[u8] = b"ct-tracer build 2024.1";

pub const NOTIFIER_MANIFEST: &str = "name ct-notifier\n\
    version 1\n\
    input_types CTL/ContactList@-,REG/Phone@?x\n\
    output_types CTN/Advisory\n\
    sink true\n\
    minimisation_policy fields=phone aggregate=false template=Health advisory for {phone}: you may have been in proximity of an infectious case. Please get tested.\n\
    callback true\n";
pub const NOTIFIER_CODE: &[u8] = b"ct-notifier build 2024.1";

pub const RULES: &str = "\
# collection: devices feed the ingest TE under participation consent
rule=ingest-token priority=10 te=name:ct-ingest type=CTT/Token@?x require=consent(?x,ct-participate,org:health-service)
rule=ingest-receipt priority=20 te=name:ct-ingest type=CTR/Receipt@?x require=consent(?x,ct-participate,org:health-service)
# tracing: the tracer may open reports and records, still under consent
rule=trace-report priority=30 te=name:ct-tracer type=CTI/InfectionReport@?x require=consent(?x,ct-participate,org:health-service)
rule=trace-params priority=40 te=name:ct-tracer type=CTP/TraceParams@-
rule=trace-records priority=50 te=name:ct-tracer type=CTC/ContactRecord@?x require=consent(?x,ct-participate,org:health-service)
# notification: a human boundary, gated on the ministry's duty approval
rule=notify-list priority=60 te=name:ct-notifier type=CTL/ContactList@- requester=role:health-officer:?y require=approval(health-ministry,?y,notify-duty)
rule=notify-phone priority=70 te=name:ct-notifier type=REG/Phone@?x requester=role:health-officer:?y require=approval(health-ministry,?y,notify-duty) require=consent(?x,ct-participate,org:health-service)
";

const CONSENT_SCOPE: [&str; 5] =
    ["CTT/Token", "CTR/Receipt", "CTC/ContactRecord", "CTI/InfectionReport", "REG/Phone"];

// ---------------------------------------------------------------------------
// The world
// ---------------------------------------------------------------------------

struct Agent {
    vid: VirtualIdentity,
    device: sig::KeyPair,
    phone: String,
    tampered: bool,
    withholding: bool,
}

struct CtWorld {
    rng: ChaCha20Rng,
    clock: SimClock,
    platform: TePlatform,
    regulator: Regulator,
    events: EventLog,
    registry: LogicRegistry,
    app: TeInstance,
    app_tampered: TeInstance,
    ingest: TeInstance,
    tracer: TeInstance,
    notifier: TeInstance,
    officer: RequesterAgent,
    doctor: sig::KeyPair,
    service_ops: sig::KeyPair,
    agents: Vec<Agent>,
    phone_envs: Vec<(Envelope, sig::VerifyKey)>,
    positions: Vec<(i64, i64)>,
    sample_index: u64,
    samples_per_collect: u64,
    sample_period_s: u64,
    ble_range: i64,
    area: i64,
    speed: i64,
    overrides: BTreeMap<(usize, u64), (i64, i64)>,
    store: EnvelopeStore,
    truth: Vec<ContactRecord>,
    ble_truth: Vec<(u64, usize, usize)>,
    pending_report: Option<(Envelope, sig::VerifyKey, VidValue)>,
    last_list: Option<(Envelope, sig::VerifyKey)>,
    last_oracle: Option<(VidValue, TraceParams, BTreeSet<VidValue>)>,
    trace_verdicts: Vec<(bool, String)>,
    forged_victims: Vec<VidValue>,
    notify_rows: Vec<FieldMap>,
    notify_lines: Vec<String>,
    notify_runs: usize,
    sample_token: Option<Envelope>,
    logs: ComponentLogs,
}

struct CtSettings {
    agents: usize,
    samples_per_collect: u64,
    sample_period_s: u64,
    ble_range: i64,
    area: i64,
    speed: i64,
    overrides: BTreeMap<(usize, u64), (i64, i64)>,
}

impl CtWorld {
    fn build(settings: CtSettings, seed: u64, rules: &str) -> Result<CtWorld, ScenarioError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let clock = SimClock::starting_at(START_S);
        let platform = TePlatform::new(&mut rng);
        let mut authority = IdentityAuthority::new("identity-authority", 256, &mut rng);
        let mut ministry = Issuer::new("health-ministry", 256, &mut rng);
        let mut events = EventLog::new();

        let mut regulator = Regulator::new("health-service-regulator", &mut rng);
        regulator.trust_platform(platform.verify_key());
        regulator.set_authority_key(authority.cert_public_key());
        regulator.trust_issuer("health-ministry", ministry.public_key());
        regulator
            .load_rules(rules)
            .map_err(|e| ScenarioError::Setup(format!("rules: {e}")))?;

        let doctor = sig::KeyPair::generate(&mut rng);
        let service_ops = sig::KeyPair::generate(&mut rng);

        // Enrol agents first: the ingest build is tied to the device-key
        // registry it verifies against, so the registry digest is part of
        // the measured code image.
        let now = clock.now();
        let mut agents = Vec::new();
        let mut phone_envs = Vec::new();
        let mut registry_image = Vec::new();
        for i in 0..settings.agents {
            let person = authority.enroll(&format!("agent-{i}"), &mut rng).expect("fresh label");
            let vid = person.derive_vid("health-service", 0);
            let device = person.vid_signing_key(&vid);
            let cert = certify_vid_key(&mut authority, &person, &vid, &device);
            let consent = sign_consent(
                &person,
                &vid,
                &cert,
                "ct-participate",
                ConsentObject::Org("health-service".into()),
                &CONSENT_SCOPE,
                now + CONSENT_TTL_S,
                &mut rng,
            );
            regulator.record_consent(&consent, now, &mut events).expect("fresh consent verifies");
            let phone = format!("+1-555-{i:04}");
            let envelope = Envelope::seal(
                "REG/Phone",
                vid.subject(),
                phone.as_bytes(),
                &regulator.public_key(),
                &device,
                &mut rng,
            )
            .expect("sealing with fresh keys cannot fail");
            phone_envs.push((envelope, device.public()));
            registry_image.extend_from_slice(&vid.value);
            registry_image.extend_from_slice(&device.public().to_bytes());
            agents.push(Agent { vid, device, phone, tampered: false, withholding: false });
        }
        let registry_digest = hash::hash(&registry_image);
        let ingest_code =
            format!("ct-ingest build 2024.1 registry={}", registry_digest.to_hex()).into_bytes();

        for (manifest, code, note) in [
            (APP_MANIFEST, APP_CODE, "reviewed: on-device collection app"),
            (INGEST_MANIFEST, ingest_code.as_slice(), "reviewed: signature checks, canonical records"),
            (TRACER_MANIFEST, TRACER_CODE, "reviewed: trajectories stay inside; list of vids out"),
            (NOTIFIER_MANIFEST, NOTIFIER_CODE, "reviewed: phone-only advisory sink, uniform reads"),
        ] {
            regulator
                .approve_te(manifest, code, note, now, &mut events)
                .expect("fixture TEs pass review");
        }

        let app = TeInstance::load(APP_MANIFEST, APP_CODE, &mut rng).unwrap();
        let mut doctored = APP_CODE.to_vec();
        doctored[0] ^= 0x01;
        let app_tampered = TeInstance::load(APP_MANIFEST, &doctored, &mut rng).unwrap();
        let ingest = TeInstance::load(INGEST_MANIFEST, &ingest_code, &mut rng).unwrap();
        let tracer = TeInstance::load(TRACER_MANIFEST, TRACER_CODE, &mut rng).unwrap();
        let notifier = TeInstance::load(NOTIFIER_MANIFEST, NOTIFIER_CODE, &mut rng).unwrap();

        let mut registry = LogicRegistry::new();
        let device_keys: BTreeMap<VidValue, sig::VerifyKey> =
            agents.iter().map(|a| (a.vid.value, a.device.public())).collect();
        registry.register(
            ingest.measurement(),
            Arc::new(move |ctx, inputs| {
                let mut outputs = Vec::new();
                let mut valid_tokens: BTreeMap<Digest, ContactRecord> = BTreeMap::new();
                for input in inputs.iter().filter(|i| i.type_id.name() == "CTT/Token") {
                    let Subject::Vid(subject) = input.subject else {
                        return Err("TOKEN_WITHOUT_SUBJECT".into());
                    };
                    let verdict = ContactRecord::parse_signed(&input.payload)
                        .map_err(|e| e.to_string())
                        .and_then(|(record, signature)| {
                            if record.vid != subject {
                                return Err("vid does not match upload subject".into());
                            }
                            let key = device_keys
                                .get(&record.vid)
                                .ok_or_else(|| "vid not enrolled".to_string())?;
                            if !record.verify(&signature, key) {
                                return Err("device signature invalid".into());
                            }
                            Ok(record)
                        });
                    match verdict {
                        Ok(record) => {
                            valid_tokens.insert(input.envelope_digest, record);
                            outputs.push(LogicOutput::Data {
                                type_name: "CTC/ContactRecord".into(),
                                subject: Subject::Vid(record.vid),
                                payload: record.to_bytes(),
                            });
                        }
                        Err(why) => {
                            ctx.push(format!(
                                "flag: dropped token claiming {}: {why}",
                                hex::encode(subject)
                            ));
                        }
                    }
                }
                for input in inputs.iter().filter(|i| i.type_id.name() == "CTR/Receipt") {
                    let Subject::Vid(receiver) = input.subject else {
                        return Err("RECEIPT_WITHOUT_SUBJECT".into());
                    };
                    if input.payload.len() != 128 {
                        ctx.push(format!(
                            "flag: malformed receipt from {}",
                            hex::encode(receiver)
                        ));
                        continue;
                    }
                    let claimed: VidValue = input.payload[..32].try_into().expect("len checked");
                    let token_digest =
                        Digest(input.payload[32..64].try_into().expect("len checked"));
                    let signature = sig::Signature::from_bytes(&input.payload[64..]);
                    let mut msg = RECEIPT_DOMAIN.to_vec();
                    msg.extend_from_slice(&input.payload[..64]);
                    let genuine = claimed == receiver
                        && signature
                            .as_ref()
                            .map(|s| {
                                device_keys
                                    .get(&receiver)
                                    .is_some_and(|k| k.verify(&msg, s))
                            })
                            .unwrap_or(false);
                    if !genuine {
                        ctx.push(format!(
                            "flag: receipt with bad signature from {}",
                            hex::encode(receiver)
                        ));
                        continue;
                    }
                    match valid_tokens.get(&token_digest) {
                        Some(token) => {
                            outputs.push(LogicOutput::Data {
                                type_name: "CTC/ContactRecord".into(),
                                subject: Subject::Vid(receiver),
                                payload: ContactRecord {
                                    vid: receiver,
                                    x: token.x,
                                    y: token.y,
                                    time_s: token.time_s,
                                    origin: RecordOrigin::BleReceipt,
                                }
                                .to_bytes(),
                            });
                        }
                        None => {
                            ctx.push(format!(
                                "flag: receipt from {} references unuploaded token {}",
                                hex::encode(receiver),
                                token_digest.short()
                            ));
                        }
                    }
                }
                Ok(outputs)
            }),
        );

        let doctor_pk = doctor.public();
        registry.register(
            tracer.measurement(),
            Arc::new(move |ctx, inputs| {
                let mut infected: Option<VidValue> = None;
                for input in inputs.iter().filter(|i| i.type_id.name() == "CTI/InfectionReport") {
                    let Subject::Vid(subject) = input.subject else {
                        return Err("REPORT_WITHOUT_SUBJECT".into());
                    };
                    if input.payload.len() != 96 || input.payload[..32] != subject {
                        return Err("BAD_REPORT malformed infection report".into());
                    }
                    let signature = sig::Signature::from_bytes(&input.payload[32..])
                        .map_err(|_| "BAD_REPORT signature malformed".to_string())?;
                    let mut msg = INFECTION_DOMAIN.to_vec();
                    msg.extend_from_slice(&subject);
                    msg.extend_from_slice(b"infected");
                    if !doctor_pk.verify(&msg, &signature) {
                        return Err("BAD_DOCTOR_SIGNATURE on infection report".into());
                    }
                    infected = Some(subject);
                }
                let infected = infected.ok_or("BAD_REPORT no infection report supplied")?;
                let params = inputs
                    .iter()
                    .filter(|i| i.type_id.name() == "CTP/TraceParams")
                    .last()
                    .and_then(|i| TraceParams::from_bytes(&i.payload))
                    .ok_or("BAD_PARAMS missing or malformed")?;
                if !params.valid() {
                    return Err("BAD_PARAMS tolerances must be positive".into());
                }
                let records = inputs
                    .iter()
                    .filter(|i| i.type_id.name() == "CTC/ContactRecord")
                    .map(|i| ContactRecord::from_bytes(&i.payload).map_err(|e| e.to_string()))
                    .collect::<Result<Vec<_>, _>>()?;
                let contacts = grid_trace(&records, &infected, &params);
                ctx.push(format!(
                    "traced {}: {} contacts from {} records",
                    hex::encode(infected),
                    contacts.len(),
                    records.len()
                ));
                let mut payload = Vec::with_capacity(contacts.len() * 32);
                for vid in &contacts {
                    payload.extend_from_slice(vid);
                }
                Ok(vec![LogicOutput::Data {
                    type_name: "CTL/ContactList".into(),
                    subject: Subject::None,
                    payload,
                }])
            }),
        );

        registry.register(
            notifier.measurement(),
            Arc::new(|_, inputs| {
                let mut listed: BTreeSet<VidValue> = BTreeSet::new();
                for input in inputs.iter().filter(|i| i.type_id.name() == "CTL/ContactList") {
                    if input.payload.len() % 32 != 0 {
                        return Err("BAD_LIST not a vid list".into());
                    }
                    for chunk in input.payload.chunks(32) {
                        listed.insert(chunk.try_into().expect("chunk size fixed"));
                    }
                }
                let mut rows = Vec::new();
                for input in inputs.iter().filter(|i| i.type_id.name() == "REG/Phone") {
                    let Subject::Vid(subject) = input.subject else {
                        return Err("PHONE_WITHOUT_SUBJECT".into());
                    };
                    if listed.contains(&subject) {
                        rows.push(LogicOutput::Sink(
                            [(
                                "phone".to_string(),
                                String::from_utf8_lossy(&input.payload).into_owned(),
                            )]
                            .into_iter()
                            .collect(),
                        ));
                    }
                }
                Ok(rows)
            }),
        );

        // The health officer's duty approval from the ministry.
        let (officer_person, officer_vid, officer) = enroll_requester(
            &mut authority,
            &mut ministry,
            "officer-1",
            "health-service",
            "health-officer",
            &mut rng,
        );
        let officer_key = officer_person.vid_signing_key(&officer_vid);
        ministry.register_subject(officer_vid.value, officer_key.public(), &["notify-duty"]);
        let approval = ministry
            .issue_direct(
                &officer_vid.value,
                "notify-duty",
                &Evidence {
                    presented_vid: officer_vid.value,
                    signature: officer_key.sign(&issuance_signing_input(
                        "health-ministry",
                        "notify-duty",
                        &officer_vid.value,
                    )),
                },
            )
            .expect("officer registered with the ministry");
        regulator.record_approval(&approval, now, &mut events).expect("trusted approver");

        // Starting positions, uniform in the area.
        let positions = (0..settings.agents)
            .map(|_| {
                (
                    (rng.next_u64() % settings.area as u64) as i64,
                    (rng.next_u64() % settings.area as u64) as i64,
                )
            })
            .collect();
        let store = EnvelopeStore::new(StoreKeys::generate(&mut rng));

        Ok(CtWorld {
            rng,
            clock,
            platform,
            regulator,
            events,
            registry,
            app,
            app_tampered,
            ingest,
            tracer,
            notifier,
            officer,
            doctor,
            service_ops,
            agents,
            phone_envs,
            positions,
            sample_index: 0,
            samples_per_collect: settings.samples_per_collect,
            sample_period_s: settings.sample_period_s,
            ble_range: settings.ble_range,
            area: settings.area,
            speed: settings.speed,
            overrides: settings.overrides,
            store,
            truth: Vec::new(),
            ble_truth: Vec::new(),
            pending_report: None,
            last_list: None,
            last_oracle: None,
            trace_verdicts: Vec::new(),
            forged_victims: Vec::new(),
            notify_rows: Vec::new(),
            notify_lines: Vec::new(),
            notify_runs: 0,
            sample_token: None,
            logs: ComponentLogs::new(),
        })
    }

    fn setup_err(&self, step: &Step, message: impl Into<String>) -> ScenarioError {
        ScenarioError::Config(ConfigError { line: step.line, message: message.into() })
    }

    fn agent_arg(&self, step: &Step, key: &str) -> Result<usize, ScenarioError> {
        let index = step.arg_usize(key, 0)?;
        if index >= self.agents.len() {
            return Err(self.setup_err(
                step,
                format!("{key}={index} but only {} agents", self.agents.len()),
            ));
        }
        Ok(index)
    }

    /// Whether the service accepts uploads from this agent right now: the
    /// app must attest as an approved build.
    fn upload_admitted(&mut self, agent: usize) -> bool {
        let app = if self.agents[agent].tampered { &self.app_tampered } else { &self.app };
        let session = kem::WrapKeyPair::generate(&mut self.rng);
        let mut nonce = [0u8; 32];
        self.rng.fill_bytes(&mut nonce);
        let report = self.platform.attest(app, &session.public(), nonce);
        report.verify(&self.platform.verify_key())
            && self.regulator.approved_te(&report.measurement).is_some()
    }
}

/// One collection period: every agent samples its position
/// `samples_per_collect` times, broadcasting tokens and recording
/// receipts; then each phone uploads its batch (attested builds only) and
/// the ingest TE turns the batch into canonical records.
fn collect_step(world: &mut CtWorld, _step: &Step) -> Result<Outcome, ScenarioError> {
    struct Pending {
        tokens: Vec<(Envelope, ContactRecord)>,
        receipts: Vec<(Envelope, Digest)>,
    }
    let mut queues: Vec<Pending> = (0..world.agents.len())
        .map(|_| Pending { tokens: Vec::new(), receipts: Vec::new() })
        .collect();
    let mut sampled_pairs: Vec<(u64, usize, usize)> = Vec::new();

    for _ in 0..world.samples_per_collect {
        let t = world.clock.now();
        // Move everyone (the rng stream advances uniformly; overrides
        // replace the result, so pinned trajectories don't perturb others).
        for i in 0..world.agents.len() {
            let dx = step(&mut world.rng, world.speed);
            let dy = step(&mut world.rng, world.speed);
            let pos = &mut world.positions[i];
            pos.0 = (pos.0 + dx).clamp(0, world.area - 1);
            pos.1 = (pos.1 + dy).clamp(0, world.area - 1);
            if let Some(&fixed) = world.overrides.get(&(i, world.sample_index)) {
                *pos = fixed;
            }
        }
        // Each device seals this sample as a broadcast token.
        for i in 0..world.agents.len() {
            let record = ContactRecord {
                vid: world.agents[i].vid.value,
                x: world.positions[i].0,
                y: world.positions[i].1,
                time_s: t,
                origin: RecordOrigin::Gps,
            };
            let signed = record.sign(&world.agents[i].device);
            let envelope = Envelope::seal(
                "CTT/Token",
                world.agents[i].vid.subject(),
                &signed,
                &world.regulator.public_key(),
                &world.agents[i].device,
                &mut world.rng,
            )
            .expect("sealing with fresh keys cannot fail");
            queues[i].tokens.push((envelope, record));
        }
        // Proximity: each side of a pair records a receipt naming the
        // sealed token it heard.
        for (i, j) in ble_pairs(&world.positions, world.ble_range) {
            sampled_pairs.push((t, i, j));
            for (hearer, speaker) in [(i, j), (j, i)] {
                let token_digest = queues[speaker]
                    .tokens
                    .last()
                    .expect("token just queued")
                    .0
                    .digest();
                let mut inner = world.agents[hearer].vid.value.to_vec();
                inner.extend_from_slice(token_digest.as_bytes());
                let mut msg = RECEIPT_DOMAIN.to_vec();
                msg.extend_from_slice(&inner);
                let mut payload = inner;
                payload
                    .extend_from_slice(&world.agents[hearer].device.sign(&msg).to_bytes());
                let envelope = Envelope::seal(
                    "CTR/Receipt",
                    world.agents[hearer].vid.subject(),
                    &payload,
                    &world.regulator.public_key(),
                    &world.agents[hearer].device,
                    &mut world.rng,
                )
                .expect("sealing with fresh keys cannot fail");
                queues[hearer].receipts.push((envelope, token_digest));
            }
        }
        world.sample_index += 1;
        world.clock.advance(world.sample_period_s);
    }

    // Upload gate: tampered builds fail attestation; withholding phones
    // simply stay silent. Either way the service notices the silence.
    let mut admitted = vec![false; world.agents.len()];
    for i in 0..world.agents.len() {
        if world.agents[i].withholding {
            world.logs.note(
                "collector",
                format!("flag: no uploads from {} this period", vid_handle(&world.agents[i].vid.value)),
            );
        } else if !world.upload_admitted(i) {
            world.logs.note(
                "collector",
                format!(
                    "flag: unattested app build from {}, uploads refused",
                    vid_handle(&world.agents[i].vid.value)
                ),
            );
        } else {
            admitted[i] = true;
        }
    }

    let mut inputs: Vec<(Envelope, sig::VerifyKey)> = Vec::new();
    let mut uploaded_digests: BTreeSet<Digest> = BTreeSet::new();
    let mut expected = 0usize;
    for i in 0..world.agents.len() {
        if !admitted[i] {
            continue;
        }
        let device = world.agents[i].device.public();
        for (envelope, record) in &queues[i].tokens {
            uploaded_digests.insert(envelope.digest());
            world.truth.push(*record);
            expected += 1;
            inputs.push((envelope.clone(), device));
        }
    }
    // Receipts go in a second pass so matching is independent of agent
    // order; an admitted hearer's receipt counts only if the speaker's
    // token actually arrived.
    for i in 0..world.agents.len() {
        if !admitted[i] {
            continue;
        }
        let device = world.agents[i].device.public();
        for (envelope, token_digest) in &queues[i].receipts {
            inputs.push((envelope.clone(), device));
            if uploaded_digests.contains(token_digest) {
                expected += 1;
            }
        }
    }
    world.ble_truth.extend(
        sampled_pairs.into_iter().filter(|&(_, i, j)| admitted[i] && admitted[j]),
    );
    world.sample_token = inputs.first().map(|(e, _)| e.clone());

    let result = run_te(
        &world.ingest,
        &world.platform,
        &inputs,
        None,
        &mut world.regulator,
        &world.registry,
        world.clock.now(),
        &mut world.rng,
        &mut world.events,
    );
    let run = match result {
        Err(_) => return Ok(Outcome::of_run(&result)),
        Ok(run) => run,
    };
    for line in run.context_log.iter().filter(|l| l.starts_with("flag:")) {
        world.logs.note("collector", line);
    }
    // Receipts derived from uploaded tokens become the receiver's records.
    for output in &run.outputs {
        world.store.put(output, &mut world.rng);
    }
    if run.outputs.len() != expected {
        return Ok(Outcome::Error("INGEST_MISMATCH".into()));
    }
    for (i, q) in queues.iter().enumerate() {
        if !admitted[i] {
            continue;
        }
        for (_, token_digest) in &q.receipts {
            if uploaded_digests.contains(token_digest) {
                // Reconstruct what ingest emitted for this receipt: the
                // heard token's place and time, owned by the hearer.
                let speaker = queues
                    .iter()
                    .flat_map(|p| p.tokens.iter())
                    .find(|(e, _)| e.digest() == *token_digest)
                    .map(|(_, r)| *r)
                    .expect("digest came from a queued token");
                world.truth.push(ContactRecord {
                    vid: world.agents[i].vid.value,
                    x: speaker.x,
                    y: speaker.y,
                    time_s: speaker.time_s,
                    origin: RecordOrigin::BleReceipt,
                });
            }
        }
    }
    Ok(Outcome::Ok)
}

fn trace_step(world: &mut CtWorld, step: &Step) -> Result<Outcome, ScenarioError> {
    let Some((report_env, report_key, infected)) = world.pending_report.clone() else {
        return Err(world.setup_err(step, "no infection report; script infect first"));
    };
    let params = TraceParams {
        epsilon_m: step.arg_u64("epsilon", world.ble_range.max(1) as u64)? as i64,
        delta_s: step.arg_u64("delta", world.sample_period_s)?,
        window_s: step.arg_u64("window", 14 * 86_400)?,
        time_now: world.clock.now(),
    };
    let mut inputs = vec![(report_env, report_key)];
    inputs.push(seal_params(world, &params));
    let ingest_key = world.ingest.producer_key();
    for agent in &world.agents {
        let stored = world
            .store
            .fetch("CTC/ContactRecord", &agent.vid.subject())
            .expect("the in-run store is never tampered");
        inputs.extend(stored.into_iter().map(|e| (e, ingest_key)));
    }
    let result = run_te(
        &world.tracer,
        &world.platform,
        &inputs,
        None,
        &mut world.regulator,
        &world.registry,
        world.clock.now(),
        &mut world.rng,
        &mut world.events,
    );
    let run = match result {
        Err(_) => return Ok(Outcome::of_run(&result)),
        Ok(run) => run,
    };
    let oracle = brute_trace(&world.truth, &infected, &params);
    let fast = grid_trace(&world.truth, &infected, &params);
    let te_count = run
        .context_log
        .iter()
        .find_map(|l| {
            let rest = l.split("traced ").nth(1)?;
            rest.split(": ").nth(1)?.split(' ').next()?.parse::<usize>().ok()
        })
        .unwrap_or(usize::MAX);
    world.trace_verdicts.push((
        fast == oracle && te_count == oracle.len(),
        format!(
            "grid {} vs oracle {} contacts, te reported {}",
            fast.len(),
            oracle.len(),
            if te_count == usize::MAX { "?".into() } else { te_count.to_string() }
        ),
    ));
    let list = run.outputs.into_iter().next().ok_or_else(|| {
        ScenarioError::Setup("tracer must emit exactly one contact list".into())
    })?;
    world.last_list = Some((list, world.tracer.producer_key()));
    world.last_oracle = Some((infected, params, oracle));
    Ok(Outcome::Ok)
}

fn seal_params(world: &mut CtWorld, params: &TraceParams) -> (Envelope, sig::VerifyKey) {
    let envelope = Envelope::seal(
        "CTP/TraceParams",
        Subject::None,
        &params.to_bytes(),
        &world.regulator.public_key(),
        &world.service_ops,
        &mut world.rng,
    )
    .expect("sealing with fresh keys cannot fail");
    (envelope, world.service_ops.public())
}

fn notify_step(world: &mut CtWorld, step: &Step) -> Result<Outcome, ScenarioError> {
    let Some(list) = world.last_list.clone() else {
        return Err(world.setup_err(step, "no contact list; script trace first"));
    };
    let mut inputs = vec![list];
    inputs.extend(world.phone_envs.iter().cloned());
    let result = run_te(
        &world.notifier,
        &world.platform,
        &inputs,
        Some(&world.officer),
        &mut world.regulator,
        &world.registry,
        world.clock.now(),
        &mut world.rng,
        &mut world.events,
    );
    let run = match result {
        Err(_) => return Ok(Outcome::of_run(&result)),
        Ok(run) => run,
    };
    world.notify_runs += 1;
    // End-to-end: the phones notified are exactly the oracle's contacts.
    let expected: BTreeSet<String> = world
        .last_oracle
        .as_ref()
        .map(|(_, _, contacts)| {
            world
                .agents
                .iter()
                .filter(|a| contacts.contains(&a.vid.value))
                .map(|a| a.phone.clone())
                .collect()
        })
        .unwrap_or_default();
    let actual: BTreeSet<String> =
        run.sink_rows.iter().filter_map(|row| row.get("phone").cloned()).collect();
    for line in &run.notifications {
        world.logs.note("officer-terminal", line);
    }
    world.notify_rows.extend(run.sink_rows);
    world.notify_lines.extend(run.notifications);
    if actual != expected {
        return Ok(Outcome::Error("NOTIFY_MISMATCH".into()));
    }
    Ok(Outcome::Ok)
}

/// Threat 1 — individuals learning who is infected or high-risk: a
/// bystander captures a broadcast token. The payload is sealed (a guessed
/// key opens nothing) and the regulator won't provision an unapproved
/// "TE" the bystander cobbled together.
fn attack1_step(world: &mut CtWorld, step: &Step) -> Result<Outcome, ScenarioError> {
    let Some(token) = world.sample_token.clone() else {
        return Err(world.setup_err(step, "no broadcast captured; script collect first"));
    };
    // A guessed key with the right (type, subject) claim but the wrong
    // material opens nothing.
    let guess = derive_payload_key(&[0x42u8; 32], &token.type_id, &token.subject);
    if token.open(&guess, &world.agents[0].device.public()).is_ok() {
        return Ok(Outcome::Error("EAVESDROPPER_READ".into()));
    }
    let rogue = TeInstance::load(
        "name exfiltrator\nversion 1\ninput_types CTT/Token@?x\noutput_types CTX/Loot@*\nsink false\nminimisation_policy none\ncallback true\n",
        b"exfiltrator build 0.1",
        &mut world.rng,
    )
    .expect("manifest parses");
    let session = kem::WrapKeyPair::generate(&mut world.rng);
    let nonce = world.regulator.issue_nonce(&mut world.rng, &mut world.events);
    let request = AccessRequest {
        report: world.platform.attest(&rogue, &session.public(), nonce),
        claimed_type: token.type_id.clone(),
        subject: token.subject,
        wrapped_key: token.wrapped_key.clone(),
        requester: None,
    };
    let decision =
        world.regulator.authorize(&request, world.clock.now(), &mut world.rng, &mut world.events);
    Ok(match decision {
        AccessDecision::Grant { .. } => Outcome::Error("ROGUE_TE_PROVISIONED".into()),
        AccessDecision::Deny { reason } => Outcome::Deny(reason.to_string()),
    })
}

/// Threat 2 — insiders at the central service: an operator stands up
/// their own "platform" and attests a bit-perfect copy of the ingest
/// build. The regulator only believes platforms it trusts, and the
/// at-rest pool is sealed, so the insider reads nothing.
fn attack2_step(world: &mut CtWorld, step: &Step) -> Result<Outcome, ScenarioError> {
    let Some(token) = world.sample_token.clone() else {
        return Err(world.setup_err(step, "nothing stored; script collect first"));
    };
    let own_platform = TePlatform::new(&mut world.rng);
    let session = kem::WrapKeyPair::generate(&mut world.rng);
    let nonce = world.regulator.issue_nonce(&mut world.rng, &mut world.events);
    let request = AccessRequest {
        report: own_platform.attest(&world.ingest, &session.public(), nonce),
        claimed_type: token.type_id.clone(),
        subject: token.subject,
        wrapped_key: token.wrapped_key.clone(),
        requester: None,
    };
    let decision =
        world.regulator.authorize(&request, world.clock.now(), &mut world.rng, &mut world.events);
    Ok(match decision {
        AccessDecision::Grant { .. } => Outcome::Error("INSIDER_PROVISIONED".into()),
        AccessDecision::Deny { reason } => Outcome::Deny(reason.to_string()),
    })
}

/// Threat 3 — social-graph exposure: scan everything the service persists
/// for any agent identifier in the clear.
fn attack3_step(world: &mut CtWorld, _step: &Step) -> Result<Outcome, ScenarioError> {
    let image = world.store.to_bytes();
    let audit = world.regulator.audit.to_text();
    let events = world.events.to_text();
    for agent in &world.agents {
        let vid = &agent.vid.value;
        let hex_vid = hex::encode(vid);
        if find_subsequence(&image, vid)
            || find_subsequence(&image, hex_vid.as_bytes())
            || audit.contains(&hex_vid)
            || events.contains(&hex_vid)
        {
            return Ok(Outcome::Error("GRAPH_LEAK".into()));
        }
        if find_subsequence(&image, agent.phone.as_bytes()) {
            return Ok(Outcome::Error("GRAPH_LEAK".into()));
        }
    }
    Ok(Outcome::Ok)
}

/// Threat 4 — forcing someone into quarantine with a forged claim: the
/// claimant uploads a token naming the victim at the claimant's own
/// coordinates. The victim's device key never signed it, so ingest drops
/// it on the floor (and flags the upload).
fn attack4_step(world: &mut CtWorld, step: &Step) -> Result<Outcome, ScenarioError> {
    let claimant = world.agent_arg(step, "claimant")?;
    let victim = world.agent_arg(step, "victim")?;
    if claimant == victim {
        return Err(world.setup_err(step, "claimant and victim must differ"));
    }
    let forged = ContactRecord {
        vid: world.agents[victim].vid.value,
        x: world.positions[claimant].0,
        y: world.positions[claimant].1,
        time_s: world.clock.now(),
        origin: RecordOrigin::Gps,
    };
    let signed = forged.sign(&world.agents[claimant].device);
    let envelope = Envelope::seal(
        "CTT/Token",
        world.agents[victim].vid.subject(),
        &signed,
        &world.regulator.public_key(),
        &world.agents[claimant].device,
        &mut world.rng,
    )
    .expect("sealing with fresh keys cannot fail");
    let inputs = [(envelope, world.agents[claimant].device.public())];
    let result = run_te(
        &world.ingest,
        &world.platform,
        &inputs,
        None,
        &mut world.regulator,
        &world.registry,
        world.clock.now(),
        &mut world.rng,
        &mut world.events,
    );
    let run = match result {
        Err(_) => return Ok(Outcome::of_run(&result)),
        Ok(run) => run,
    };
    let flagged = run.context_log.iter().any(|l| l.starts_with("flag: dropped token"));
    for line in run.context_log.iter().filter(|l| l.starts_with("flag:")) {
        world.logs.note("collector", line);
    }
    if !run.outputs.is_empty() || !flagged {
        return Ok(Outcome::Error("FORGED_TOKEN_ACCEPTED".into()));
    }
    world.forged_victims.push(world.agents[victim].vid.value);
    Ok(Outcome::Ok)
}

/// Threat 5 — posing as low-risk by under-reporting: a doctored app build
/// fails attestation (uploads refused), and plain silence is noticed
/// because enrolment is known. Either way the flags land in the
/// collector's log; subsequent `collect` steps show peers' receipts
/// referencing the missing tokens, also flagged.
fn attack5_step(world: &mut CtWorld, step: &Step) -> Result<Outcome, ScenarioError> {
    let agent = world.agent_arg(step, "agent")?;
    match step.arg("mode").unwrap_or("tamper") {
        "tamper" => {
            world.agents[agent].tampered = true;
            if world.upload_admitted(agent) {
                return Ok(Outcome::Error("TAMPERED_APP_ACCEPTED".into()));
            }
        }
        "withhold" => world.agents[agent].withholding = true,
        other => return Err(world.setup_err(step, format!("unknown mode {other:?}"))),
    }
    Ok(Outcome::Ok)
}

// ---------------------------------------------------------------------------
// The script driver
// ---------------------------------------------------------------------------

/// Runs the contact-tracing scenario.
///
/// Config parameters: `agents` (default 6), `samples` per collect step
/// (default 12), `sample_period` seconds (default 300), `ble_range`
/// metres (default 2), `area` metres (default 40), `speed` metres per
/// sample (default 4), and any number of `trajectory <agent> <sample>
/// <x> <y>` lines pinning an agent's position at one global sample index.
///
/// Step vocabulary:
/// - `collect` — one full period: sample, broadcast, upload, ingest
/// - `infect agent=i` — a doctor certifies agent i infected
/// - `trace [epsilon=] [delta=] [window=]` — run the tracer
/// - `notify` — the health officer turns the latest list into advisories
/// - `trace_forged` — an infection report no doctor signed
/// - `trace_bad_params` — a query with zero tolerances
/// - `attack1`..`attack5` — the five threats (see each step's docs)
/// - `advance secs=` — move the simulated clock
pub fn run(config: &ScenarioConfig, seed: u64) -> Result<ScenarioReport, ScenarioError> {
    run_with_rules(config, seed, None)
}

/// [`run`], but with the health service's rule set replaced by
/// operator-supplied rule text (the same line-oriented format). Script
/// expectations are judged against whatever policy is loaded.
pub fn run_with_rules(
    config: &ScenarioConfig,
    seed: u64,
    rules: Option<&str>,
) -> Result<ScenarioReport, ScenarioError> {
    if config.scenario != "ct" {
        return Err(ScenarioError::Setup(format!(
            "config names scenario {:?}, not ct",
            config.scenario
        )));
    }
    config.check_params(&[
        "agents",
        "samples",
        "sample_period",
        "ble_range",
        "area",
        "speed",
        "trajectory",
    ])?;
    let agents = config.param_u64("agents", 6)? as usize;
    let area = config.param_u64("area", 40)? as i64;
    if agents == 0 || agents > 10_000 || area <= 0 {
        return Err(ScenarioError::Setup("agents must be 1..=10000 in a positive area".into()));
    }
    let mut overrides = BTreeMap::new();
    for line in config.params_all("trajectory") {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let parsed = (parts.len() == 4)
            .then(|| {
                Some((
                    parts[0].parse::<usize>().ok()?,
                    parts[1].parse::<u64>().ok()?,
                    parts[2].parse::<i64>().ok()?,
                    parts[3].parse::<i64>().ok()?,
                ))
            })
            .flatten();
        let Some((agent, sample, x, y)) = parsed else {
            return Err(ScenarioError::Setup(format!(
                "trajectory line {line:?} must be: <agent> <sample> <x> <y>"
            )));
        };
        if agent >= agents {
            return Err(ScenarioError::Setup(format!(
                "trajectory pins agent {agent} but only {agents} exist"
            )));
        }
        overrides.insert((agent, sample), (x, y));
    }
    let settings = CtSettings {
        agents,
        samples_per_collect: config.param_u64("samples", 12)?,
        sample_period_s: config.param_u64("sample_period", 300)?,
        ble_range: config.param_u64("ble_range", 2)? as i64,
        area,
        speed: config.param_u64("speed", 4)? as i64,
        overrides,
    };
    if settings.samples_per_collect == 0 || settings.sample_period_s == 0 {
        return Err(ScenarioError::Setup("samples and sample_period must be positive".into()));
    }

    let mut world = CtWorld::build(settings, seed, rules.unwrap_or(RULES))?;
    let mut report = ScenarioReport::new("ct", seed);

    for step in &config.steps {
        let observed = match step.action.as_str() {
            "collect" => collect_step(&mut world, step)?,
            "infect" => {
                let agent = world.agent_arg(step, "agent")?;
                let vid = world.agents[agent].vid.value;
                let mut msg = INFECTION_DOMAIN.to_vec();
                msg.extend_from_slice(&vid);
                msg.extend_from_slice(b"infected");
                let mut payload = vid.to_vec();
                payload.extend_from_slice(&world.doctor.sign(&msg).to_bytes());
                let envelope = Envelope::seal(
                    "CTI/InfectionReport",
                    world.agents[agent].vid.subject(),
                    &payload,
                    &world.regulator.public_key(),
                    &world.doctor,
                    &mut world.rng,
                )
                .expect("sealing with fresh keys cannot fail");
                world.pending_report = Some((envelope, world.doctor.public(), vid));
                Outcome::Ok
            }
            "trace" => trace_step(&mut world, step)?,
            "trace_forged" => {
                let agent = world.agent_arg(step, "agent")?;
                let quack = sig::KeyPair::generate(&mut world.rng);
                let vid = world.agents[agent].vid.value;
                let mut msg = INFECTION_DOMAIN.to_vec();
                msg.extend_from_slice(&vid);
                msg.extend_from_slice(b"infected");
                let mut payload = vid.to_vec();
                payload.extend_from_slice(&quack.sign(&msg).to_bytes());
                let envelope = Envelope::seal(
                    "CTI/InfectionReport",
                    world.agents[agent].vid.subject(),
                    &payload,
                    &world.regulator.public_key(),
                    &quack,
                    &mut world.rng,
                )
                .expect("sealing with fresh keys cannot fail");
                let params = TraceParams {
                    epsilon_m: 2,
                    delta_s: 300,
                    window_s: 86_400,
                    time_now: world.clock.now(),
                };
                let sealed = seal_params(&mut world, &params);
                let inputs = vec![(envelope, quack.public()), sealed];
                let result = run_te(
                    &world.tracer,
                    &world.platform,
                    &inputs,
                    None,
                    &mut world.regulator,
                    &world.registry,
                    world.clock.now(),
                    &mut world.rng,
                    &mut world.events,
                );
                Outcome::of_run(&result)
            }
            "trace_bad_params" => {
                let Some((report_env, report_key, _)) = world.pending_report.clone() else {
                    return Err(world.setup_err(step, "no infection report; script infect first"));
                };
                let params = TraceParams {
                    epsilon_m: 0,
                    delta_s: 300,
                    window_s: 86_400,
                    time_now: world.clock.now(),
                };
                let sealed = seal_params(&mut world, &params);
                let inputs = vec![(report_env, report_key), sealed];
                let result = run_te(
                    &world.tracer,
                    &world.platform,
                    &inputs,
                    None,
                    &mut world.regulator,
                    &world.registry,
                    world.clock.now(),
                    &mut world.rng,
                    &mut world.events,
                );
                Outcome::of_run(&result)
            }
            "notify" => notify_step(&mut world, step)?,
            "attack1" => attack1_step(&mut world, step)?,
            "attack2" => attack2_step(&mut world, step)?,
            "attack3" => attack3_step(&mut world, step)?,
            "attack4" => attack4_step(&mut world, step)?,
            "attack5" => attack5_step(&mut world, step)?,
            "advance" => {
                world.clock.advance(step.arg_u64("secs", 3600)?);
                Outcome::Ok
            }
            other => return Err(world.setup_err(step, format!("unknown ct step {other:?}"))),
        };
        report.record_step(step, observed);
    }

    run_checks(&world, &mut report);
    report.tally([&world.regulator.audit]);
    report.digest("audit", world.regulator.audit.to_text().as_bytes());
    report.digest("events", world.events.to_text().as_bytes());
    report.digest("store", &world.store.to_bytes());
    report.attach_audit("health-service", world.regulator.audit.to_text());
    Ok(report)
}

fn run_checks(world: &CtWorld, report: &mut ScenarioReport) {
    // Every trace agreed with the quadratic oracle, and the TE reported
    // the same count it sealed into the list.
    if !world.trace_verdicts.is_empty() {
        let all = world.trace_verdicts.iter().all(|(ok, _)| *ok);
        let detail = world
            .trace_verdicts
            .iter()
            .map(|(_, d)| d.as_str())
            .collect::<Vec<_>>()
            .join("; ");
        report.check("trace-matches-oracle", all, detail);
    }

    // Proximity completeness: every radio-level encounter with the
    // infected agent inside the query window surfaced as a contact.
    if let Some((infected, params, contacts)) = &world.last_oracle {
        let mut pairs = 0usize;
        let mut missed = 0usize;
        let start = params.time_now.saturating_sub(params.window_s);
        for &(t, i, j) in &world.ble_truth {
            if t < start || t > params.time_now {
                continue;
            }
            let (a, b) = (world.agents[i].vid.value, world.agents[j].vid.value);
            let partner = if a == *infected {
                b
            } else if b == *infected {
                a
            } else {
                continue;
            };
            pairs += 1;
            if !contacts.contains(&partner) {
                missed += 1;
            }
        }
        report.check(
            "ble-pairs-covered",
            missed == 0,
            format!("{pairs} radio encounters with the case, {missed} missed"),
        );
    }

    // The advisory boundary leaks nothing: rendered lines carry a phone
    // number and the fixed wording, never a vid or anything hex-like.
    if !world.notify_lines.is_empty() {
        let well_formed = world.notify_lines.iter().all(|line| {
            line.starts_with("Health advisory for +1-555-")
                && line.ends_with("you may have been in proximity of an infectious case. Please get tested.")
        });
        let vid_free = world.notify_lines.iter().all(|line| {
            !world.agents.iter().any(|a| line.contains(&hex::encode(a.vid.value)))
                && !line.as_bytes().windows(64).any(|w| w.iter().all(u8::is_ascii_hexdigit))
        });
        let projected =
            world.notify_rows.iter().all(|row| row.keys().all(|k| k == "phone"));
        report.check(
            "advisories-minimal",
            well_formed && vid_free && projected,
            format!("{} advisories over {} runs", world.notify_lines.len(), world.notify_runs),
        );
    }

    // Uniform reads at the human boundary: every notify run touched every
    // registered phone, so the access pattern is independent of the list.
    if world.notify_runs > 0 {
        let phone_opens = world
            .events
            .events()
            .iter()
            .filter(|e| {
                matches!(e, Event::EnvelopeOpened { type_text } if type_text.starts_with("REG/Phone"))
            })
            .count();
        let expected = world.notify_runs * world.agents.len();
        report.check(
            "uniform-phone-access",
            phone_opens == expected,
            format!("{phone_opens} phone opens across {} runs", world.notify_runs),
        );
    }

    // Nothing the service persists names anyone: the pool on disk holds
    // sealed bytes only.
    let image = world.store.to_bytes();
    let mut leak = None;
    for agent in &world.agents {
        if find_subsequence(&image, &agent.vid.value)
            || find_subsequence(&image, hex::encode(agent.vid.value).as_bytes())
            || find_subsequence(&image, agent.phone.as_bytes())
        {
            leak = Some("agent identifier in store image");
            break;
        }
    }
    report.check("store-opaque", leak.is_none(), leak.unwrap_or("no vid or phone on disk"));

    // A forged claim moved nothing: the framed victim is in no contact
    // list and received no advisory.
    if !world.forged_victims.is_empty() {
        let clear = world.forged_victims.iter().all(|vid| {
            let uninvolved = world
                .last_oracle
                .as_ref()
                .map(|(_, _, contacts)| !contacts.contains(vid))
                .unwrap_or(true);
            let phone = world
                .agents
                .iter()
                .find(|a| a.vid.value == *vid)
                .map(|a| a.phone.clone())
                .unwrap_or_default();
            uninvolved && !world.notify_lines.iter().any(|l| l.contains(&phone))
        });
        report.check(
            "forged-victim-clear",
            clear,
            format!("{} framed, none traced or notified", world.forged_victims.len()),
        );
    }

    // Under-reporting is visible: the collector flagged the silent and
    // the unattested.
    let flags = world.logs.get("collector");
    if world.agents.iter().any(|a| a.tampered || a.withholding) {
        let flagged = find_subsequence(flags, b"flag: no uploads")
            || find_subsequence(flags, b"flag: unattested app build");
        report.check(
            "under-reporting-flagged",
            flagged,
            "collector log names the silent device",
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_equals_brute_force_on_random_walks() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let vids: Vec<VidValue> = (0..20)
            .map(|_| {
                let mut vid = [0u8; 32];
                rng.fill_bytes(&mut vid);
                vid
            })
            .collect();
        for round in 0..10u64 {
            let walks = random_walks(&mut rng, vids.len(), 30, 60, 5);
            let records = walk_records(&walks, &vids, START_S, 300);
            let params = TraceParams {
                epsilon_m: 1 + (round as i64 % 5),
                delta_s: 300 * (1 + round % 3),
                window_s: 30 * 300,
                time_now: START_S + 30 * 300,
            };
            let infected = &vids[(round as usize) % vids.len()];
            assert_eq!(
                grid_trace(&records, infected, &params),
                brute_trace(&records, infected, &params),
                "round {round}"
            );
        }
    }

    #[test]
    fn grid_probe_is_complete_at_cell_boundaries() {
        // Two records exactly ε apart and δ apart in time, straddling
        // cell boundaries: the adjacent-cell probe must still pair them.
        let a = [0xA5u8; 32];
        let b = [0x5Au8; 32];
        let params = TraceParams { epsilon_m: 5, delta_s: 60, window_s: 1000, time_now: 2000 };
        let records = vec![
            ContactRecord { vid: a, x: 4, y: 0, time_s: 1500, origin: RecordOrigin::Gps },
            ContactRecord { vid: b, x: 9, y: 0, time_s: 1560, origin: RecordOrigin::Gps },
        ];
        let contacts = grid_trace(&records, &a, &params);
        assert!(contacts.contains(&b));
        assert_eq!(contacts, brute_trace(&records, &a, &params));
    }

    #[test]
    fn record_wire_round_trips_and_signatures_bind() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let device = sig::KeyPair::generate(&mut rng);
        let record = ContactRecord {
            vid: [9u8; 32],
            x: -41,
            y: 1_000_003,
            time_s: START_S,
            origin: RecordOrigin::BleReceipt,
        };
        assert_eq!(ContactRecord::from_bytes(&record.to_bytes()), Ok(record));

        let signed = record.sign(&device);
        let (parsed, signature) = ContactRecord::parse_signed(&signed).unwrap();
        assert_eq!(parsed, record);
        assert!(parsed.verify(&signature, &device.public()));
        let other = sig::KeyPair::generate(&mut rng);
        assert!(!parsed.verify(&signature, &other.public()));

        let mut tweaked = record;
        tweaked.x += 1;
        assert!(!tweaked.verify(&signature, &device.public()));
    }

    /// The full tour: two collection periods with a pinned encounter, a
    /// trace and notification, all five attacks, and the degraded modes.
    const SCRIPT: &str = "\
scenario ct
agents 4
samples 6
area 30
speed 3
ble_range 2
trajectory 0 2 5 5
trajectory 1 2 6 5
trajectory 3 0 28 28
trajectory 3 1 28 28
trajectory 3 2 28 28
trajectory 3 3 28 28
trajectory 3 4 28 28
trajectory 3 5 28 28
trajectory 3 6 28 28
trajectory 3 7 28 28
trajectory 3 8 28 28
trajectory 3 9 28 28
trajectory 3 10 28 28
trajectory 3 11 28 28
trajectory 3 12 28 28
trajectory 3 13 28 28
trajectory 3 14 28 28
trajectory 3 15 28 28
trajectory 3 16 28 28
trajectory 3 17 28 28
step collect expect=ok
step infect agent=0 expect=ok
step trace epsilon=2 delta=300 window=86400 expect=ok
step notify expect=ok
step attack1 expect=deny:TE_UNKNOWN
step attack2 expect=deny:TE_UNKNOWN
step attack3 expect=ok
step attack4 claimant=1 victim=3 expect=ok
step trace expect=ok
step notify expect=ok
step attack5 agent=2 mode=withhold expect=ok
step collect expect=ok
step trace_forged agent=1 expect=error:BAD_DOCTOR_SIGNATURE
step trace_bad_params expect=error:BAD_PARAMS
step trace expect=ok
step notify expect=ok
step attack5 agent=1 mode=tamper expect=ok
step collect expect=ok
step trace expect=ok
step notify expect=ok
";

    #[test]
    fn full_script_meets_every_expectation() {
        let config = ScenarioConfig::parse(SCRIPT).unwrap();
        let report = run(&config, 17).unwrap();
        for step in &report.steps {
            assert!(
                step.passed(),
                "{}: observed {} wanted {}",
                step.label,
                step.observed,
                step.expected
            );
        }
        for check in &report.checks {
            assert!(check.passed, "check {} failed: {}", check.name, check.detail);
        }
        assert!(report.passed());
        // The pinned encounter at sample 2 (agents 0 and 1, one metre
        // apart) must surface: agent 1 is notified in the first round.
        assert!(report.checks.iter().any(|c| c.name == "ble-pairs-covered"));
        assert!(report.denies.get("TE_UNKNOWN").map(|n| *n >= 2).unwrap_or(false));
    }

    #[test]
    fn reports_are_deterministic_in_config_and_seed() {
        let config = ScenarioConfig::parse(
            "scenario ct\nagents 3\nsamples 4\nstep collect expect=ok\nstep infect agent=0 expect=ok\nstep trace expect=ok\nstep notify expect=ok\n",
        )
        .unwrap();
        let a = run(&config, 5).unwrap().to_text();
        let b = run(&config, 5).unwrap().to_text();
        assert_eq!(a, b);
        let c = run(&config, 6).unwrap().to_text();
        assert_ne!(a, c);
    }

    #[test]
    fn bad_scripts_are_config_errors() {
        for script in [
            "scenario ct\nstep trace expect=ok\n",
            "scenario ct\nstep notify expect=ok\n",
            "scenario ct\nstep quarantine expect=ok\n",
            "scenario ct\nagents 2\nstep attack4 claimant=0 victim=0 expect=ok\n",
            "scenario ct\nagents 2\ntrajectory 5 0 1 1\nstep collect expect=ok\n",
        ] {
            let config = ScenarioConfig::parse(script).unwrap();
            assert!(matches!(run(&config, 1), Err(_)), "{script}");
        }
    }
}
