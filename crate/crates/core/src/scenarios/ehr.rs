//! The EHR case study: a hospital pipeline where scans are taken,
//! analyzed, shown to the consulting doctor, and aggregated for research
//! — every hop gated by the health regulator.
//!
//! The type ladder is `DT1/ScanOrder@x` (the patient's sealed intake) →
//! `DT2/MRIScan@x` (imaging output, stored) → `DT4/DiagnosisReport@x`
//! (analyzer output, stored) → two human boundaries: the doctor terminal
//! (projected fields, per-patient, gated on the *consulted* relationship)
//! and the cohort analyst (aggregate-only, gated on an ethics-board
//! approval plus research consent).
//!
//! The script vocabulary covers the happy path and one adversarial
//! variant per gate, so configs can demonstrate both the control-flow
//! ordering and each specific denial.

use super::{
    certify_vid_key, enroll_requester, find_subsequence, parse_fields, sign_consent,
    sign_revocation, ConfigError, Outcome, ScenarioConfig, ScenarioError, ScenarioReport, Step,
};
use crate::clock::SimClock;
use crate::crypto::envelope::Envelope;
use crate::crypto::{kem, sig};
use crate::identity::{
    issuance_signing_input, Credential, Evidence, IdentityAuthority, Issuer, MasterIdentity,
    VirtualIdentity,
};
use crate::regulator::{AccessDecision, AccessRequest, ConsentObject, Regulator, RequesterAgent};
use crate::store::{EnvelopeStore, StoreKeys};
use crate::te::{
    run_te, FieldMap, LogicFn, LogicOutput, LogicRegistry, TeError, TeInstance, TePlatform, TeRun,
};
use crate::trace::EventLog;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::sync::Arc;

const ORG: &str = "HospitalA";
const START_S: u64 = 1_700_000_000;
const CONSENT_TTL_S: u64 = 30 * 86_400;

pub const IMAGING_MANIFEST: &str = "name imaging-station\n\
    version 1\n\
    input_types DT1/ScanOrder@?x\n\
    output_types DT2/MRIScan@?x\n\
    sink false\n\
    minimisation_policy none\n\
    callback true\n";
pub const IMAGING_CODE: &[u8] = b"imaging-station build 2024.1";

pub const ANALYZER_MANIFEST: &str = "name mri-analyzer\n\
    version 1\n\
    input_types DT2/MRIScan@?x\n\
    output_types DT4/DiagnosisReport@?x\n\
    sink false\n\
    minimisation_policy none\n\
    callback true\n";
pub const ANALYZER_CODE: &[u8] = b"mri-analyzer build 2024.1";

pub const TERMINAL_MANIFEST: &str = "name doctor-terminal\n\
    version 1\n\
    input_types DT4/DiagnosisReport@?x\n\
    output_types DT5/DoctorView\n\
    sink true\n\
    minimisation_policy fields=diagnosis,advice aggregate=false template=Diagnosis for your patient: {diagnosis}. {advice}\n\
    callback true\n";
pub const TERMINAL_CODE: &[u8] = b"doctor-terminal build 2024.1";

pub const COHORT_MANIFEST: &str = "name cohort-analyst\n\
    version 1\n\
    input_types DT4/DiagnosisReport@?x\n\
    output_types DT6/CohortStats\n\
    sink true\n\
    minimisation_policy fields=severity aggregate=true template=Cohort: {count} reports, severity total {sum_severity}\n\
    callback true\n";
pub const COHORT_CODE: &[u8] = b"cohort-analyst build 2024.1";

/// A later cohort build that slipped review: structurally identical
/// manifest, but its logic tries to push row-level data out through the
/// aggregate-only sink. The runtime, not the review, stops it.
pub const ROGUE_COHORT_MANIFEST: &str = "name cohort-analyst\n\
    version 2\n\
    input_types DT4/DiagnosisReport@?x\n\
    output_types DT6/CohortStats\n\
    sink true\n\
    minimisation_policy fields=severity aggregate=true template=Cohort: {count} reports, severity total {sum_severity}\n\
    callback true\n";
pub const ROGUE_COHORT_CODE: &[u8] = b"cohort-analyst build 2024.2-rowgrab";

pub const RULES: &str = "\
# collection gate: imaging reads intake orders only with treatment consent
rule=intake priority=10 te=name:imaging-station type=DT1/ScanOrder@?x require=consent(?x,treatment,org:HospitalA)
# processing gate: analysis rides on the same treatment consent
rule=analyze priority=20 te=name:mri-analyzer type=DT2/MRIScan@?x require=consent(?x,treatment,org:HospitalA)
# sink gate: only the consulted doctor sees a patient's report
rule=view priority=30 te=name:doctor-terminal type=DT4/DiagnosisReport@?x requester=role:doctor:?y require=consent(?x,consulted,?y)
# sink gate: research access needs the board's approval and research consent
rule=cohort priority=40 te=name:cohort-analyst type=DT4/DiagnosisReport@?x requester=role:analyst:?y require=approval(ethics-board,?y,study-2024) require=consent(?x,research,org:HospitalA)
";

struct Patient {
    person: MasterIdentity,
    vid: VirtualIdentity,
    cert: Credential,
    device: sig::KeyPair,
}

/// Which TE a step drives.
#[derive(Clone, Copy)]
enum TeKind {
    Imaging,
    Analyzer,
    TamperedAnalyzer,
    Terminal,
    Cohort,
    RogueCohort,
}

/// Which human faces the sink.
#[derive(Clone, Copy)]
enum Who {
    Nobody,
    Doctor,
    Analyst,
}

struct EhrWorld {
    rng: ChaCha20Rng,
    clock: SimClock,
    platform: TePlatform,
    regulator: Regulator,
    events: EventLog,
    store: EnvelopeStore,
    patients: Vec<Patient>,
    doctor_vid: VirtualIdentity,
    doctor: RequesterAgent,
    analyst: RequesterAgent,
    imaging: TeInstance,
    analyzer: TeInstance,
    tampered_analyzer: TeInstance,
    terminal: TeInstance,
    cohort: TeInstance,
    rogue_cohort: TeInstance,
    registry: LogicRegistry,
}

impl EhrWorld {
    fn build(patient_count: usize, seed: u64, rules: &str) -> Result<EhrWorld, ScenarioError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let clock = SimClock::starting_at(START_S);
        let platform = TePlatform::new(&mut rng);
        let mut authority = IdentityAuthority::new("identity-authority", 256, &mut rng);
        let mut board = Issuer::new("medical-board", 256, &mut rng);
        let mut ethics = Issuer::new("ethics-board", 256, &mut rng);
        let mut events = EventLog::new();

        let mut regulator = Regulator::new("health-regulator", &mut rng);
        regulator.trust_platform(platform.verify_key());
        regulator.set_authority_key(authority.cert_public_key());
        regulator.trust_issuer("medical-board", board.public_key());
        regulator.trust_issuer("ethics-board", ethics.public_key());
        regulator
            .load_rules(rules)
            .map_err(|e| ScenarioError::Setup(format!("rules: {e}")))?;

        let now = clock.now();
        for (manifest, code, note) in [
            (IMAGING_MANIFEST, IMAGING_CODE, "reviewed: device-facing, typed output only"),
            (ANALYZER_MANIFEST, ANALYZER_CODE, "reviewed: pure transform, no sink"),
            (TERMINAL_MANIFEST, TERMINAL_CODE, "reviewed: doctor-facing sink, projection"),
            (COHORT_MANIFEST, COHORT_CODE, "reviewed: research sink, aggregate-only"),
            (ROGUE_COHORT_MANIFEST, ROGUE_COHORT_CODE, "reviewed: maintenance release"),
        ] {
            regulator
                .approve_te(manifest, code, note, now, &mut events)
                .expect("fixture TEs pass review");
        }

        let imaging = TeInstance::load(IMAGING_MANIFEST, IMAGING_CODE, &mut rng).unwrap();
        let analyzer = TeInstance::load(ANALYZER_MANIFEST, ANALYZER_CODE, &mut rng).unwrap();
        let mut flipped = ANALYZER_CODE.to_vec();
        flipped[0] ^= 0x01;
        let tampered_analyzer = TeInstance::load(ANALYZER_MANIFEST, &flipped, &mut rng).unwrap();
        let terminal = TeInstance::load(TERMINAL_MANIFEST, TERMINAL_CODE, &mut rng).unwrap();
        let cohort = TeInstance::load(COHORT_MANIFEST, COHORT_CODE, &mut rng).unwrap();
        let rogue_cohort =
            TeInstance::load(ROGUE_COHORT_MANIFEST, ROGUE_COHORT_CODE, &mut rng).unwrap();

        let mut registry = LogicRegistry::new();
        registry.register(
            imaging.measurement(),
            Arc::new(|ctx, inputs| {
                let mut out = Vec::new();
                for input in inputs {
                    ctx.push(format!("imaging order of {} bytes", input.payload.len()));
                    let order = String::from_utf8_lossy(&input.payload).into_owned();
                    out.push(LogicOutput::Data {
                        type_name: "DT2/MRIScan".into(),
                        subject: input.subject,
                        payload: format!("modality=MRI;order={order}").into_bytes(),
                    });
                }
                Ok(out)
            }),
        );
        registry.register(
            analyzer.measurement(),
            Arc::new(|ctx, inputs| {
                let mut out = Vec::new();
                for input in inputs {
                    // Toy analysis: severity is a stable function of the
                    // scan bytes, so reports are deterministic and distinct.
                    let severity = input.payload.iter().map(|b| *b as u64).sum::<u64>() % 5;
                    ctx.push(format!("analyzed scan of {} bytes", input.payload.len()));
                    out.push(LogicOutput::Data {
                        type_name: "DT4/DiagnosisReport".into(),
                        subject: input.subject,
                        payload: format!(
                            "diagnosis=finding-grade-{severity};severity={severity};advice=Schedule a follow-up consultation.;scan_ref={}",
                            input.envelope_digest.short()
                        )
                        .into_bytes(),
                    });
                }
                Ok(out)
            }),
        );
        let sink_logic: LogicFn = Arc::new(|_, inputs| {
            Ok(inputs
                .iter()
                .map(|input| LogicOutput::Sink(parse_fields(&input.payload)))
                .collect())
        });
        registry.register(terminal.measurement(), sink_logic.clone());
        registry.register(cohort.measurement(), sink_logic);
        registry.register(
            rogue_cohort.measurement(),
            Arc::new(|_, inputs| {
                // The grab: re-emit each report as typed data, hoping the
                // sink will pass rows through unaggregated.
                Ok(inputs
                    .iter()
                    .map(|input| LogicOutput::Data {
                        type_name: "DT6/CohortStats".into(),
                        subject: input.subject,
                        payload: input.payload.clone(),
                    })
                    .collect())
            }),
        );

        let patients = (0..patient_count)
            .map(|i| {
                let person = authority.enroll(&format!("patient-{i}"), &mut rng).unwrap();
                let vid = person.derive_vid(ORG, 0);
                let key = person.vid_signing_key(&vid);
                let cert = certify_vid_key(&mut authority, &person, &vid, &key);
                let device = person.vid_signing_key(&vid);
                Patient { person, vid, cert, device }
            })
            .collect();

        let (_, doctor_vid, doctor) =
            enroll_requester(&mut authority, &mut board, "doctor-1", ORG, "doctor", &mut rng);
        let (analyst_person, analyst_vid, analyst) =
            enroll_requester(&mut authority, &mut ethics, "analyst-1", ORG, "analyst", &mut rng);

        // The ethics board's study approval for the analyst, recorded as a
        // predicate fact the cohort rule will consult.
        let analyst_key = analyst_person.vid_signing_key(&analyst_vid);
        ethics.register_subject(analyst_vid.value, analyst_key.public(), &["study-2024"]);
        let approval = ethics
            .issue_direct(
                &analyst_vid.value,
                "study-2024",
                &Evidence {
                    presented_vid: analyst_vid.value,
                    signature: analyst_key.sign(&issuance_signing_input(
                        "ethics-board",
                        "study-2024",
                        &analyst_vid.value,
                    )),
                },
            )
            .expect("analyst registered with the board");
        regulator.record_approval(&approval, now, &mut events).expect("fixture approval verifies");

        let store = EnvelopeStore::new(StoreKeys::generate(&mut rng));

        Ok(EhrWorld {
            rng,
            clock,
            platform,
            regulator,
            events,
            store,
            patients,
            doctor_vid,
            doctor,
            analyst,
            imaging,
            analyzer,
            tampered_analyzer,
            terminal,
            cohort,
            rogue_cohort,
            registry,
        })
    }

    fn patient(&self, step: &Step) -> Result<usize, ScenarioError> {
        let index = step.arg_usize("patient", 0)?;
        if index >= self.patients.len() {
            return Err(ScenarioError::Config(ConfigError {
                line: step.line,
                message: format!("patient={index} but only {} enrolled", self.patients.len()),
            }));
        }
        Ok(index)
    }

    fn exec(
        &mut self,
        kind: TeKind,
        inputs: &[(Envelope, sig::VerifyKey)],
        who: Who,
    ) -> Result<TeRun, TeError> {
        let te = match kind {
            TeKind::Imaging => &self.imaging,
            TeKind::Analyzer => &self.analyzer,
            TeKind::TamperedAnalyzer => &self.tampered_analyzer,
            TeKind::Terminal => &self.terminal,
            TeKind::Cohort => &self.cohort,
            TeKind::RogueCohort => &self.rogue_cohort,
        };
        let requester = match who {
            Who::Nobody => None,
            Who::Doctor => Some(&self.doctor),
            Who::Analyst => Some(&self.analyst),
        };
        run_te(
            te,
            &self.platform,
            inputs,
            requester,
            &mut self.regulator,
            &self.registry,
            self.clock.now(),
            &mut self.rng,
            &mut self.events,
        )
    }

    /// The stored envelopes of one type for one patient, paired with the
    /// producer key they verify under.
    fn stored(&self, type_name: &str, patient: usize) -> Vec<(Envelope, sig::VerifyKey)> {
        let producer = match type_name {
            "DT2/MRIScan" => self.imaging.producer_key(),
            _ => self.analyzer.producer_key(),
        };
        self.store
            .fetch(type_name, &self.patients[patient].vid.subject())
            .expect("the in-run store is never tampered")
            .into_iter()
            .map(|envelope| (envelope, producer))
            .collect()
    }

    fn store_outputs(&mut self, result: &Result<TeRun, TeError>) {
        if let Ok(run) = result {
            for envelope in &run.outputs {
                self.store.put(envelope, &mut self.rng);
            }
        }
    }

    fn setup_err(&self, step: &Step, message: impl Into<String>) -> ScenarioError {
        ScenarioError::Config(ConfigError { line: step.line, message: message.into() })
    }
}

/// Runs the EHR scenario script. Config parameter: `patients` (default 2).
///
/// Step vocabulary — `patient=` defaults to 0 throughout:
/// - `consent verb=treatment|consulted|research [patient=] [ttl=]` —
///   record a consent (treatment covers intake and analysis, consulted
///   names the doctor, research covers the cohort sink)
/// - `revoke verb=... [patient=]` — revoke a consent
/// - `intake [patient=]` — seal a scan order, run imaging, store the scan
/// - `analyze [patient=]` — run the analyzer over stored scans
/// - `analyze_tampered [patient=]` — the same request from a bit-flipped
///   analyzer build
/// - `analyze_replayed [patient=]` — a granted request submitted twice;
///   the step's outcome is the replay's decision
/// - `view [patient=] [requester=doctor|analyst|none]` — doctor terminal
/// - `aggregate` — cohort analyst over every stored report
/// - `row_grab` — the rogue cohort build over the same inputs
/// - `advance secs=` — move the simulated clock
pub fn run(config: &ScenarioConfig, seed: u64) -> Result<ScenarioReport, ScenarioError> {
    run_with_rules(config, seed, None)
}

/// [`run`], but with the hospital regulator's rule set replaced by
/// operator-supplied rule text (the same line-oriented format). Script
/// expectations are judged against whatever policy is loaded.
pub fn run_with_rules(
    config: &ScenarioConfig,
    seed: u64,
    rules: Option<&str>,
) -> Result<ScenarioReport, ScenarioError> {
    if config.scenario != "ehr" {
        return Err(ScenarioError::Setup(format!(
            "config names scenario {:?}, not ehr",
            config.scenario
        )));
    }
    config.check_params(&["patients"])?;
    let patient_count = config.param_u64("patients", 2)? as usize;
    if patient_count == 0 || patient_count > 10_000 {
        return Err(ScenarioError::Setup("patients must be between 1 and 10000".into()));
    }

    let mut world = EhrWorld::build(patient_count, seed, rules.unwrap_or(RULES))?;
    let mut report = ScenarioReport::new("ehr", seed);
    let mut doctor_rows: Vec<FieldMap> = Vec::new();
    let mut doctor_notes: Vec<String> = Vec::new();
    let mut cohort_rows: Vec<FieldMap> = Vec::new();

    for step in &config.steps {
        let observed = match step.action.as_str() {
            "consent" => consent_step(&mut world, step)?,
            "revoke" => revoke_step(&mut world, step)?,
            "intake" => {
                let index = world.patient(step)?;
                let patient = &world.patients[index];
                let order = Envelope::seal(
                    "DT1/ScanOrder",
                    patient.vid.subject(),
                    format!("head scan requested, visit {index}").as_bytes(),
                    &world.regulator.public_key(),
                    &patient.device,
                    &mut world.rng,
                )
                .expect("sealing with fresh keys cannot fail");
                let inputs = [(order, patient.device.public())];
                let result = world.exec(TeKind::Imaging, &inputs, Who::Nobody);
                world.store_outputs(&result);
                Outcome::of_run(&result)
            }
            "analyze" | "analyze_tampered" => {
                let index = world.patient(step)?;
                let inputs = world.stored("DT2/MRIScan", index);
                if inputs.is_empty() {
                    return Err(world.setup_err(step, "no stored scan; script an intake first"));
                }
                let kind = if step.action == "analyze" {
                    TeKind::Analyzer
                } else {
                    TeKind::TamperedAnalyzer
                };
                let result = world.exec(kind, &inputs, Who::Nobody);
                world.store_outputs(&result);
                Outcome::of_run(&result)
            }
            "analyze_replayed" => replay_step(&mut world, step)?,
            "view" => {
                let index = world.patient(step)?;
                let who = match step.arg("requester").unwrap_or("doctor") {
                    "doctor" => Who::Doctor,
                    "analyst" => Who::Analyst,
                    "none" => Who::Nobody,
                    other => {
                        return Err(
                            world.setup_err(step, format!("unknown requester {other:?}"))
                        )
                    }
                };
                let inputs = world.stored("DT4/DiagnosisReport", index);
                if inputs.is_empty() {
                    return Err(world.setup_err(step, "no stored report; script analyze first"));
                }
                let result = world.exec(TeKind::Terminal, &inputs, who);
                if let Ok(run) = &result {
                    doctor_rows.extend(run.sink_rows.iter().cloned());
                    doctor_notes.extend(run.notifications.iter().cloned());
                }
                Outcome::of_run(&result)
            }
            "aggregate" | "row_grab" => {
                let mut inputs = Vec::new();
                for index in 0..world.patients.len() {
                    inputs.extend(world.stored("DT4/DiagnosisReport", index));
                }
                let kind = if step.action == "aggregate" {
                    TeKind::Cohort
                } else {
                    TeKind::RogueCohort
                };
                let result = world.exec(kind, &inputs, Who::Analyst);
                if let Ok(run) = &result {
                    cohort_rows.extend(run.sink_rows.iter().cloned());
                }
                Outcome::of_run(&result)
            }
            "advance" => {
                world.clock.advance(step.arg_u64("secs", 3600)?);
                Outcome::Ok
            }
            other => {
                return Err(world.setup_err(step, format!("unknown ehr step {other:?}")));
            }
        };
        report.record_step(step, observed);
    }

    run_checks(&world, &mut report, &doctor_rows, &doctor_notes, &cohort_rows);
    report.tally([&world.regulator.audit]);
    report.digest("audit", world.regulator.audit.to_text().as_bytes());
    report.digest("events", world.events.to_text().as_bytes());
    report.digest("store", &world.store.to_bytes());
    report.attach_audit("hospital", world.regulator.audit.to_text());
    Ok(report)
}

fn consent_step(world: &mut EhrWorld, step: &Step) -> Result<Outcome, ScenarioError> {
    let index = world.patient(step)?;
    let verb = step.arg("verb").unwrap_or("treatment").to_string();
    let ttl = step.arg_u64("ttl", CONSENT_TTL_S)?;
    let (object, scope): (ConsentObject, &[&str]) = match verb.as_str() {
        "treatment" => (ConsentObject::Org(ORG.into()), &["DT1/ScanOrder", "DT2/MRIScan"]),
        "research" => (ConsentObject::Org(ORG.into()), &["DT4/DiagnosisReport"]),
        "consulted" => (ConsentObject::Vid(world.doctor_vid.value), &["DT4/DiagnosisReport"]),
        other => {
            return Err(world.setup_err(step, format!("unknown consent verb {other:?}")));
        }
    };
    let expiry = world.clock.now() + ttl;
    let patient = &world.patients[index];
    let signed = sign_consent(
        &patient.person,
        &patient.vid,
        &patient.cert,
        &verb,
        object,
        scope,
        expiry,
        &mut world.rng,
    );
    Ok(match world.regulator.record_consent(&signed, world.clock.now(), &mut world.events) {
        Ok(()) => Outcome::Ok,
        Err(e) => Outcome::Error(format!("CONSENT_{e:?}").to_uppercase()),
    })
}

fn revoke_step(world: &mut EhrWorld, step: &Step) -> Result<Outcome, ScenarioError> {
    let index = world.patient(step)?;
    let verb = step.arg("verb").unwrap_or("consulted").to_string();
    let object = match verb.as_str() {
        "consulted" => ConsentObject::Vid(world.doctor_vid.value),
        _ => ConsentObject::Org(ORG.into()),
    };
    let patient = &world.patients[index];
    let revocation = sign_revocation(&patient.person, &patient.vid, &patient.cert, &verb, object);
    Ok(match world.regulator.revoke_consent(&revocation, world.clock.now(), &mut world.events) {
        Ok(_) => Outcome::Ok,
        Err(e) => Outcome::Error(format!("REVOKE_{e:?}").to_uppercase()),
    })
}

/// A valid request granted once, then submitted again byte-for-byte. The
/// nonce inside the attestation report was consumed by the first
/// decision, so the replay must deny as stale.
fn replay_step(world: &mut EhrWorld, step: &Step) -> Result<Outcome, ScenarioError> {
    let index = world.patient(step)?;
    let inputs = world.stored("DT2/MRIScan", index);
    let Some((envelope, _)) = inputs.into_iter().next() else {
        return Err(world.setup_err(step, "no stored scan; script an intake first"));
    };
    let session = kem::WrapKeyPair::generate(&mut world.rng);
    let nonce = world.regulator.issue_nonce(&mut world.rng, &mut world.events);
    let request = AccessRequest {
        report: world.platform.attest(&world.analyzer, &session.public(), nonce),
        claimed_type: envelope.type_id.clone(),
        subject: envelope.subject,
        wrapped_key: envelope.wrapped_key.clone(),
        requester: None,
    };
    let now = world.clock.now();
    let _first = world.regulator.authorize(&request, now, &mut world.rng, &mut world.events);
    let replay = world.regulator.authorize(&request, now, &mut world.rng, &mut world.events);
    Ok(match replay {
        AccessDecision::Grant { .. } => Outcome::Ok,
        AccessDecision::Deny { reason } => Outcome::Deny(reason.to_string()),
    })
}

fn run_checks(
    world: &EhrWorld,
    report: &mut ScenarioReport,
    doctor_rows: &[FieldMap],
    doctor_notes: &[String],
    cohort_rows: &[FieldMap],
) {
    // Protocol ordering on the event log: consent recorded before the
    // first attestation, which precedes type authentication, rule
    // instantiation, and finally key provisioning.
    let order = ["consent-recorded", "attestation-verified", "type-authenticated", "rule-instantiated", "key-provisioned"];
    let positions: Vec<Option<usize>> =
        order.iter().map(|kind| world.events.position(kind)).collect();
    let ordered = positions.windows(2).all(|w| match (w[0], w[1]) {
        (Some(a), Some(b)) => a < b,
        _ => false,
    });
    let detail: Vec<String> = order
        .iter()
        .zip(&positions)
        .map(|(kind, p)| match p {
            Some(i) => format!("{kind}@{i}"),
            None => format!("{kind}@absent"),
        })
        .collect();
    report.check("control-flow-order", ordered, detail.join(" "));

    // The doctor boundary: only the declared fields survive, and the
    // rendered notification carries no dropped internals.
    if !doctor_rows.is_empty() {
        let projected = doctor_rows
            .iter()
            .all(|row| row.keys().all(|k| k == "diagnosis" || k == "advice"));
        let informative = doctor_rows.iter().all(|row| row.contains_key("diagnosis"));
        report.check(
            "doctor-minimised",
            projected && informative,
            format!("{} rows, fields within diagnosis|advice", doctor_rows.len()),
        );
        let clean = doctor_notes
            .iter()
            .all(|n| !n.contains("scan_ref") && !n.contains("severity="));
        report.check("doctor-notes-clean", clean, format!("{} notifications", doctor_notes.len()));
    }

    // The research boundary: rows collapse to one aggregate; no
    // per-patient value survives.
    if !cohort_rows.is_empty() {
        let collapsed = cohort_rows.len() == 1
            && cohort_rows[0].contains_key("count")
            && cohort_rows[0].keys().all(|k| k == "count" || k == "sum_severity");
        let rowless = cohort_rows
            .iter()
            .all(|row| row.values().all(|v| !v.contains("finding-grade")));
        report.check(
            "aggregate-only",
            collapsed && rowless,
            format!("count={}", cohort_rows[0].get("count").map(String::as_str).unwrap_or("?")),
        );
    }

    // The hospital database on disk: no patient identifier, no plaintext.
    let image = world.store.to_bytes();
    let mut leak = None;
    for patient in &world.patients {
        if find_subsequence(&image, &patient.vid.value)
            || find_subsequence(&image, hex::encode(patient.vid.value).as_bytes())
        {
            leak = Some("vid bytes in store image");
            break;
        }
    }
    let plaintexts: [&[u8]; 3] = [b"diagnosis", b"MRIScan", b"finding-grade"];
    if leak.is_none() && plaintexts.iter().any(|n| find_subsequence(&image, n)) {
        leak = Some("plaintext token in store image");
    }
    report.check("store-opaque", leak.is_none(), leak.unwrap_or("no vid or plaintext on disk"));
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The full tour: the happy path interleaved with one failure per
    /// gate. Patient 0 carries the main thread; patient 1 exercises the
    /// missing-consent and expiry paths.
    const SCRIPT: &str = "\
scenario ehr
patients 2
step consent verb=treatment expect=ok
step intake expect=ok
step analyze expect=ok
step intake patient=1 expect=deny:PREDICATE_MISSING
step consent verb=treatment patient=1 expect=ok
step intake patient=1 expect=ok
step analyze patient=1 expect=ok
step analyze_tampered expect=deny:TE_UNKNOWN
step analyze_replayed expect=deny:STALE_NONCE
step view expect=deny:PREDICATE_MISSING
step consent verb=consulted expect=ok
step view expect=ok
step view requester=none expect=deny:REQUESTER_UNAUTHENTICATED
step view requester=analyst expect=deny:NO_RULE
step aggregate expect=deny:PREDICATE_MISSING
step consent verb=research expect=ok
step consent verb=research patient=1 expect=ok
step aggregate expect=ok
step row_grab expect=error:TYPE_VIOLATION
step consent verb=consulted patient=1 ttl=3600 expect=ok
step advance secs=7200 expect=ok
step view patient=1 expect=deny:EXPIRED_CONSENT
step revoke verb=consulted expect=ok
step view expect=deny:PREDICATE_MISSING
";

    #[test]
    fn full_script_meets_every_expectation() {
        let config = ScenarioConfig::parse(SCRIPT).unwrap();
        let report = run(&config, 7).unwrap();
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
        // Each scripted denial shows up in the audit tally; the replay
        // step contributes one extra grant (its first submission).
        for reason in [
            "TE_UNKNOWN",
            "STALE_NONCE",
            "REQUESTER_UNAUTHENTICATED",
            "NO_RULE",
            "EXPIRED_CONSENT",
        ] {
            assert_eq!(report.denies.get(reason), Some(&1), "tally for {reason}");
        }
        assert_eq!(report.denies.get("PREDICATE_MISSING"), Some(&4));
        assert!(report.grants > 0);
    }

    #[test]
    fn reports_are_deterministic_in_config_and_seed() {
        let config = ScenarioConfig::parse(SCRIPT).unwrap();
        let a = run(&config, 11).unwrap().to_text();
        let b = run(&config, 11).unwrap().to_text();
        assert_eq!(a, b);
        let c = run(&config, 12).unwrap().to_text();
        assert_ne!(a, c, "seed must reach the transcript digests");
    }

    #[test]
    fn unknown_steps_and_params_are_config_errors() {
        let bad = ScenarioConfig::parse("scenario ehr\nstep transplant expect=ok\n").unwrap();
        assert!(matches!(run(&bad, 1), Err(ScenarioError::Config(_))));
        let bad = ScenarioConfig::parse("scenario ehr\nbeds 9\n").unwrap();
        assert!(matches!(run(&bad, 1), Err(ScenarioError::Config(_))));
        let wrong = ScenarioConfig::parse("scenario dbt\n").unwrap();
        assert!(matches!(run(&wrong, 1), Err(ScenarioError::Setup(_))));
    }

    #[test]
    fn missing_prerequisite_steps_are_config_errors() {
        let config =
            ScenarioConfig::parse("scenario ehr\nstep analyze expect=ok\n").unwrap();
        assert!(matches!(run(&config, 1), Err(ScenarioError::Config(_))));
    }
}
