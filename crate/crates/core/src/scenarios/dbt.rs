//! The benefit-transfer case study: a welfare ministry pays beneficiaries
//! through a pipeline that crosses four jurisdictions, and no party along
//! the way holds both halves of anyone's identity.
//!
//! Beneficiaries are known to the scheme by one virtual identity
//! (`dbt_vid`) and to their bank by another (`bank_vid`). The ministry's
//! signed payment file names only dbt vids. The payment processor (PFMS)
//! turns it into one pooled debit order for the sponsor bank and one
//! sealed transfer per beneficiary. The switch (NPCI) runs a mapper TE
//! that joins transfers to beneficiary-uploaded mappings and re-addresses
//! each amount to the bank-side vid — the only place the two vids ever
//! co-exist is inside that mapper's execution context. Each stage's
//! outputs are sealed to the regulator that gates their consumer:
//! payments (R1), sponsor banking (R2), the switch (R3), and one banking
//! regulator per receiving bank.
//!
//! Money is conserved end to end: what leaves the pool equals what lands
//! in bank accounts plus what flows back as refunds. Transfers that
//! cannot be routed (a lost mapping, or a beneficiary who withdrew and
//! asked for removal) return to the pool through a narrowly-typed refund
//! path rather than vanishing.

use super::{
    enroll_requester, parse_fields, sign_consent, sign_revocation, ComponentLogs, ConfigError,
    Outcome, ScenarioConfig, ScenarioError, ScenarioReport, Step,
};
use crate::clock::SimClock;
use crate::crypto::envelope::{Envelope, Subject};
use crate::crypto::sig;
use crate::framing::{self, FrameError};
use crate::identity::{
    issuance_signing_input, Credential, Evidence, IdentityAuthority, Issuer, MasterIdentity,
    VidValue, VirtualIdentity,
};
use crate::regulator::{ConsentObject, Regulator, RequesterAgent};
use crate::store::{EnvelopeStore, StoreKeys};
use crate::te::{
    run_te, run_te_routed, LogicOutput, LogicRegistry, OutputRouting, TeError, TeInstance,
    TePlatform, TeRun,
};
use crate::trace::EventLog;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;
use std::sync::Arc;

const START_S: u64 = 1_700_000_000;
const CONSENT_TTL_S: u64 = 90 * 86_400;
const ALPHA: &str = "alpha-bank";
const BETA: &str = "beta-bank";
const POOL_ACCOUNT: &str = "dbt-pool";

// ---------------------------------------------------------------------------
// The ministry's payment file
// ---------------------------------------------------------------------------

const PAY_MAGIC: [u8; 4] = *b"PAY1";
const PAYFILE_DOMAIN: &[u8] = b"pbd.dbt.payfile.v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaymentEntry {
    pub beneficiary: VidValue,
    pub amount: u64,
}

/// A signed batch of payment instructions: the artifact the ministry
/// hands to PFMS. It names beneficiaries only by scheme-side vid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaymentFile {
    pub scheme: String,
    pub entries: Vec<PaymentEntry>,
    pub signature: sig::Signature,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PayFileError {
    #[error("framing: {0}")]
    Frame(#[from] FrameError),
    #[error("file has no entries")]
    Empty,
    #[error("entry {0} malformed")]
    BadEntry(usize),
    #[error("entry {0} has a zero amount")]
    ZeroAmount(usize),
    #[error("scheme name is not utf-8")]
    BadScheme,
    #[error("signature field malformed")]
    BadSignature,
}

impl PaymentFile {
    fn signing_input(scheme: &str, entries: &[PaymentEntry]) -> Vec<u8> {
        let mut input = PAYFILE_DOMAIN.to_vec();
        input.extend_from_slice(&(scheme.len() as u64).to_be_bytes());
        input.extend_from_slice(scheme.as_bytes());
        for entry in entries {
            input.extend_from_slice(&entry.beneficiary);
            input.extend_from_slice(&entry.amount.to_be_bytes());
        }
        input
    }

    pub fn sign(scheme: &str, entries: Vec<PaymentEntry>, key: &sig::KeyPair) -> PaymentFile {
        let signature = key.sign(&Self::signing_input(scheme, &entries));
        PaymentFile { scheme: scheme.to_string(), entries, signature }
    }

    pub fn verify(&self, key: &sig::VerifyKey) -> bool {
        key.verify(&Self::signing_input(&self.scheme, &self.entries), &self.signature)
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.amount).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries: Vec<Vec<u8>> = self
            .entries
            .iter()
            .map(|e| {
                let mut field = e.beneficiary.to_vec();
                field.extend_from_slice(&e.amount.to_be_bytes());
                field
            })
            .collect();
        let signature = self.signature.to_bytes();
        let mut fields: Vec<&[u8]> = vec![self.scheme.as_bytes()];
        fields.extend(entries.iter().map(|e| e.as_slice()));
        fields.push(&signature);
        framing::encode(PAY_MAGIC, &fields)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<PaymentFile, PayFileError> {
        let fields = framing::decode(PAY_MAGIC, bytes)?;
        if fields.len() < 3 {
            return Err(PayFileError::Empty);
        }
        let scheme = String::from_utf8(fields[0].clone()).map_err(|_| PayFileError::BadScheme)?;
        let signature = sig::Signature::from_bytes(fields.last().expect("len checked"))
            .map_err(|_| PayFileError::BadSignature)?;
        let entries = fields[1..fields.len() - 1]
            .iter()
            .enumerate()
            .map(|(i, field)| {
                if field.len() != 40 {
                    return Err(PayFileError::BadEntry(i));
                }
                let beneficiary: VidValue =
                    field[..32].try_into().expect("length checked above");
                let amount = u64::from_be_bytes(field[32..].try_into().expect("length checked"));
                if amount == 0 {
                    return Err(PayFileError::ZeroAmount(i));
                }
                Ok(PaymentEntry { beneficiary, amount })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PaymentFile { scheme, entries, signature })
    }
}

// ---------------------------------------------------------------------------
// Fixtures: manifests, code images, rules
// ---------------------------------------------------------------------------

pub const PFMS_MANIFEST: &str = "name pfms\n\
    version 1\n\
    input_types DTP/PaymentFile@-\n\
    output_types DTD/DebitOrder@-,DTT/Transfer@*\n\
    sink false\n\
    minimisation_policy none\n\
    callback true\n";
pub const PFMS_CODE: &[u8] = b"pfms-disburser build 2024.1";

pub const SPONSOR_MANIFEST: &str = "name sponsor-ledger\n\
    version 1\n\
    input_types DTD/DebitOrder@-,DTR/Refund@-\n\
    output_types DTL/SponsorStatement\n\
    sink true\n\
    minimisation_policy fields=account,delta,memo aggregate=false template=Ledger {account}: {delta} ({memo})\n\
    callback true\n";
pub const SPONSOR_CODE: &[u8] = b"sponsor-ledger build 2024.1";

pub const MAPPER_MANIFEST: &str = "name npci-mapper\n\
    version 1\n\
    input_types DTT/Transfer@?x,MAP/Mapping@?x\n\
    output_types DTC/Credit-alpha@*,DTC/Credit-beta@*,DTR/Refund@-\n\
    sink false\n\
    minimisation_policy none\n\
    callback true\n";
pub const MAPPER_CODE: &[u8] = b"npci-mapper build 2024.1";

/// Wind-down path: after a beneficiary withdraws routing consent, their
/// still-sealed transfers can reach exactly one place — back to the pool.
/// The manifest's output row makes that reviewable: amount out, nothing
/// else.
pub const RETURN_MANIFEST: &str = "name npci-return\n\
    version 1\n\
    input_types DTT/Transfer@?x\n\
    output_types DTR/Refund@-\n\
    sink false\n\
    minimisation_policy none\n\
    callback true\n";
pub const RETURN_CODE: &[u8] = b"npci-return build 2024.1";

pub const ALPHA_MANIFEST: &str = "name alpha-ledger\n\
    version 1\n\
    input_types DTC/Credit-alpha@?x\n\
    output_types DTL/AlphaStatement\n\
    sink true\n\
    minimisation_policy fields=account,delta,memo aggregate=false template=Credited {account}: {delta} ({memo})\n\
    callback true\n";
pub const ALPHA_CODE: &[u8] = b"alpha-ledger build 2024.1";

pub const BETA_MANIFEST: &str = "name beta-ledger\n\
    version 1\n\
    input_types DTC/Credit-beta@?x\n\
    output_types DTL/BetaStatement\n\
    sink true\n\
    minimisation_policy fields=account,delta,memo aggregate=false template=Credited {account}: {delta} ({memo})\n\
    callback true\n";
pub const BETA_CODE: &[u8] = b"beta-ledger build 2024.1";

pub const R1_RULES: &str = "\
# the disbursement pipeline is approved as reviewed infrastructure;
# integrity of the file itself is checked end-to-end inside the TE
rule=pfms priority=10 te=name:pfms type=DTP/PaymentFile@-
";

pub const R2_RULES: &str = "\
rule=debit priority=10 te=name:sponsor-ledger type=DTD/DebitOrder@- requester=role:clerk:?y
rule=refund priority=20 te=name:sponsor-ledger type=DTR/Refund@- requester=role:clerk:?y
";

pub const R3_RULES: &str = "\
# routing touches per-person data: it needs the beneficiary's consent and
# the ministry's enrolment approval
rule=route-transfer priority=10 te=name:npci-mapper type=DTT/Transfer@?x require=consent(?x,route-payments,org:npci) require=approval(dbt-ministry,?x,dbt-enrolled)
rule=route-mapping priority=20 te=name:npci-mapper type=MAP/Mapping@?x require=consent(?x,route-payments,org:npci)
# the return path stays open after consent withdrawal by regulation: the
# TE it names can only emit subject-less refunds to the sponsor
rule=return priority=30 te=name:npci-return type=DTT/Transfer@?x
";

pub const R4_ALPHA_RULES: &str = "\
rule=credit priority=10 te=name:alpha-ledger type=DTC/Credit-alpha@?x requester=role:clerk:?y require=consent(?x,receive-dbt,org:alpha-bank)
";

pub const R4_BETA_RULES: &str = "\
rule=credit priority=10 te=name:beta-ledger type=DTC/Credit-beta@?x requester=role:clerk:?y require=consent(?x,receive-dbt,org:beta-bank)
";

// ---------------------------------------------------------------------------
// The world
// ---------------------------------------------------------------------------

fn bank_for(index: usize) -> &'static str {
    if index % 2 == 0 {
        ALPHA
    } else {
        BETA
    }
}

fn credit_type(bank: &str) -> &'static str {
    if bank == ALPHA {
        "DTC/Credit-alpha"
    } else {
        "DTC/Credit-beta"
    }
}

struct Beneficiary {
    person: MasterIdentity,
    dbt_vid: VirtualIdentity,
    dbt_cert: Credential,
    bank_vid: VirtualIdentity,
}

/// NPCI's lookup table: which sealed mapping belongs to which scheme-side
/// vid, and which device key it verifies under. Losing an entry (staleness,
/// or honouring a removal request) severs routing without touching the
/// stored ciphertext.
struct DirectoryEntry {
    index: usize,
    subject: VidValue,
    producer: sig::VerifyKey,
}

struct DbtWorld {
    rng: ChaCha20Rng,
    clock: SimClock,
    platform: TePlatform,
    authority: IdentityAuthority,
    ministry_issuer: Issuer,
    ministry_pay: sig::KeyPair,
    ministry_seal: sig::KeyPair,
    r1: Regulator,
    r2: Regulator,
    r3: Regulator,
    r4_alpha: Regulator,
    r4_beta: Regulator,
    events: EventLog,
    registry: LogicRegistry,
    pfms: TeInstance,
    sponsor_ledger: TeInstance,
    mapper: TeInstance,
    npci_return: TeInstance,
    alpha_ledger: TeInstance,
    beta_ledger: TeInstance,
    sponsor_clerk: RequesterAgent,
    alpha_clerk: RequesterAgent,
    beta_clerk: RequesterAgent,
    beneficiaries: Vec<Beneficiary>,
    mapping_store: EnvelopeStore,
    directory: Vec<DirectoryEntry>,
    pending_file: Option<(Envelope, sig::VerifyKey, PaymentFile)>,
    pending_transfers: Vec<(Envelope, sig::VerifyKey)>,
    undeliverable: Vec<(Envelope, sig::VerifyKey)>,
    pending_credits: BTreeMap<String, Vec<(Envelope, sig::VerifyKey)>>,
    pool: i64,
    pool_start: i64,
    accounts: BTreeMap<String, BTreeMap<String, i64>>,
    disbursed: i64,
    credited: i64,
    refunded: i64,
    logs: ComponentLogs,
}

impl DbtWorld {
    fn build(pool_start: i64, seed: u64) -> DbtWorld {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let clock = SimClock::starting_at(START_S);
        let platform = TePlatform::new(&mut rng);
        let mut authority = IdentityAuthority::new("identity-authority", 256, &mut rng);
        let ministry_issuer = Issuer::new("dbt-ministry", 256, &mut rng);
        let mut staff = Issuer::new("bank-staff-registry", 256, &mut rng);
        let ministry_pay = sig::KeyPair::generate(&mut rng);
        let ministry_seal = sig::KeyPair::generate(&mut rng);
        let mut events = EventLog::new();

        let mut r1 = Regulator::new("payments-regulator", &mut rng);
        let mut r2 = Regulator::new("sponsor-banking-regulator", &mut rng);
        let mut r3 = Regulator::new("switch-regulator", &mut rng);
        let mut r4_alpha = Regulator::new("alpha-banking-regulator", &mut rng);
        let mut r4_beta = Regulator::new("beta-banking-regulator", &mut rng);
        for r in [&mut r1, &mut r2, &mut r3, &mut r4_alpha, &mut r4_beta] {
            r.trust_platform(platform.verify_key());
            r.set_authority_key(authority.cert_public_key());
        }
        r3.trust_issuer("dbt-ministry", ministry_issuer.public_key());
        for r in [&mut r2, &mut r4_alpha, &mut r4_beta] {
            r.trust_issuer("bank-staff-registry", staff.public_key());
        }
        r1.load_rules(R1_RULES).expect("fixture rules parse");
        r2.load_rules(R2_RULES).expect("fixture rules parse");
        r3.load_rules(R3_RULES).expect("fixture rules parse");
        r4_alpha.load_rules(R4_ALPHA_RULES).expect("fixture rules parse");
        r4_beta.load_rules(R4_BETA_RULES).expect("fixture rules parse");

        let now = clock.now();
        r1.approve_te(PFMS_MANIFEST, PFMS_CODE, "reviewed: signed files in, typed flows out", now, &mut events)
            .expect("fixture TEs pass review");
        r2.approve_te(SPONSOR_MANIFEST, SPONSOR_CODE, "reviewed: pooled ledger sink", now, &mut events)
            .expect("fixture TEs pass review");
        r3.approve_te(MAPPER_MANIFEST, MAPPER_CODE, "reviewed: vid translation, context destroyed", now, &mut events)
            .expect("fixture TEs pass review");
        r3.approve_te(RETURN_MANIFEST, RETURN_CODE, "reviewed: wind-down refunds only", now, &mut events)
            .expect("fixture TEs pass review");
        r4_alpha
            .approve_te(ALPHA_MANIFEST, ALPHA_CODE, "reviewed: credit ledger sink", now, &mut events)
            .expect("fixture TEs pass review");
        r4_beta
            .approve_te(BETA_MANIFEST, BETA_CODE, "reviewed: credit ledger sink", now, &mut events)
            .expect("fixture TEs pass review");

        let pfms = TeInstance::load(PFMS_MANIFEST, PFMS_CODE, &mut rng).unwrap();
        let sponsor_ledger = TeInstance::load(SPONSOR_MANIFEST, SPONSOR_CODE, &mut rng).unwrap();
        let mapper = TeInstance::load(MAPPER_MANIFEST, MAPPER_CODE, &mut rng).unwrap();
        let npci_return = TeInstance::load(RETURN_MANIFEST, RETURN_CODE, &mut rng).unwrap();
        let alpha_ledger = TeInstance::load(ALPHA_MANIFEST, ALPHA_CODE, &mut rng).unwrap();
        let beta_ledger = TeInstance::load(BETA_MANIFEST, BETA_CODE, &mut rng).unwrap();

        let mut registry = LogicRegistry::new();
        let ministry_pay_pk = ministry_pay.public();
        registry.register(
            pfms.measurement(),
            Arc::new(move |ctx, inputs| {
                let mut out = Vec::new();
                for input in inputs {
                    let file = PaymentFile::from_bytes(&input.payload)
                        .map_err(|e| format!("BAD_PAYMENT_FILE {e}"))?;
                    if !file.verify(&ministry_pay_pk) {
                        return Err("BAD_MINISTRY_SIGNATURE on payment file".into());
                    }
                    ctx.push(format!(
                        "file {}: {} entries, total {}",
                        file.scheme,
                        file.entries.len(),
                        file.total()
                    ));
                    out.push(LogicOutput::Data {
                        type_name: "DTD/DebitOrder".into(),
                        subject: Subject::None,
                        payload: format!(
                            "total={};memo={};count={}",
                            file.total(),
                            file.scheme,
                            file.entries.len()
                        )
                        .into_bytes(),
                    });
                    for entry in &file.entries {
                        ctx.push(format!(
                            "transfer {} {} -> {}",
                            entry.amount,
                            file.scheme,
                            hex::encode(entry.beneficiary)
                        ));
                        out.push(LogicOutput::Data {
                            type_name: "DTT/Transfer".into(),
                            subject: Subject::Vid(entry.beneficiary),
                            payload: format!("amount={};memo={}", entry.amount, file.scheme)
                                .into_bytes(),
                        });
                    }
                }
                Ok(out)
            }),
        );
        registry.register(
            mapper.measurement(),
            Arc::new(|ctx, inputs| {
                // Join transfers to mappings by scheme-side subject. The
                // pairing lives only in this context; outputs leave sorted
                // by destination so their order correlates with nothing.
                let mut mappings: BTreeMap<VidValue, (VidValue, String)> = BTreeMap::new();
                for input in inputs.iter().filter(|i| i.type_id.name() == "MAP/Mapping") {
                    let Subject::Vid(subject) = input.subject else {
                        return Err("MAPPING_WITHOUT_SUBJECT".into());
                    };
                    if input.payload.len() < 65 || input.payload[..32] != subject {
                        ctx.push(format!(
                            "mapping for {} malformed, ignored",
                            hex::encode(subject)
                        ));
                        continue;
                    }
                    let bank_vid: VidValue =
                        input.payload[32..64].try_into().expect("length checked");
                    let bank = String::from_utf8_lossy(&input.payload[64..]).into_owned();
                    mappings.insert(subject, (bank_vid, bank));
                }
                let mut credits = Vec::new();
                let mut refunds = Vec::new();
                for input in inputs.iter().filter(|i| i.type_id.name() == "DTT/Transfer") {
                    let Subject::Vid(subject) = input.subject else {
                        return Err("TRANSFER_WITHOUT_SUBJECT".into());
                    };
                    let fields = parse_fields(&input.payload);
                    let amount = fields
                        .get("amount")
                        .and_then(|a| a.parse::<u64>().ok())
                        .ok_or("TRANSFER_WITHOUT_AMOUNT")?;
                    let memo = fields.get("memo").cloned().unwrap_or_default();
                    match mappings.get(&subject) {
                        Some((bank_vid, bank)) => {
                            ctx.push(format!(
                                "route {} -> {} ({bank})",
                                hex::encode(subject),
                                hex::encode(bank_vid)
                            ));
                            credits.push((
                                credit_type(bank).to_string(),
                                *bank_vid,
                                format!("amount={amount};memo={memo}"),
                            ));
                        }
                        None => {
                            ctx.push(format!(
                                "no mapping for {}, refunding {amount}",
                                hex::encode(subject)
                            ));
                            refunds.push(format!("amount={amount};memo=unroutable {memo}"));
                        }
                    }
                }
                credits.sort();
                refunds.sort();
                let mut out: Vec<LogicOutput> = credits
                    .into_iter()
                    .map(|(type_name, bank_vid, payload)| LogicOutput::Data {
                        type_name,
                        subject: Subject::Vid(bank_vid),
                        payload: payload.into_bytes(),
                    })
                    .collect();
                out.extend(refunds.into_iter().map(|payload| LogicOutput::Data {
                    type_name: "DTR/Refund".into(),
                    subject: Subject::None,
                    payload: payload.into_bytes(),
                }));
                Ok(out)
            }),
        );
        registry.register(
            npci_return.measurement(),
            Arc::new(|ctx, inputs| {
                let mut out = Vec::new();
                for input in inputs {
                    let fields = parse_fields(&input.payload);
                    let amount = fields
                        .get("amount")
                        .and_then(|a| a.parse::<u64>().ok())
                        .ok_or("TRANSFER_WITHOUT_AMOUNT")?;
                    ctx.push(format!("returning {amount} to pool"));
                    out.push(LogicOutput::Data {
                        type_name: "DTR/Refund".into(),
                        subject: Subject::None,
                        payload: format!("amount={amount};memo=returned").into_bytes(),
                    });
                }
                Ok(out)
            }),
        );
        registry.register(
            sponsor_ledger.measurement(),
            Arc::new(|_, inputs| {
                Ok(inputs
                    .iter()
                    .map(|input| {
                        let fields = parse_fields(&input.payload);
                        let memo = fields.get("memo").cloned().unwrap_or_default();
                        let delta = if input.type_id.name() == "DTD/DebitOrder" {
                            format!("-{}", fields.get("total").cloned().unwrap_or_default())
                        } else {
                            format!("+{}", fields.get("amount").cloned().unwrap_or_default())
                        };
                        LogicOutput::Sink(
                            [
                                ("account".to_string(), POOL_ACCOUNT.to_string()),
                                ("delta".to_string(), delta),
                                ("memo".to_string(), memo),
                            ]
                            .into_iter()
                            .collect(),
                        )
                    })
                    .collect())
            }),
        );
        let credit_logic: crate::te::LogicFn = Arc::new(|_, inputs| {
            inputs
                .iter()
                .map(|input| {
                    let Subject::Vid(vid) = input.subject else {
                        return Err("CREDIT_WITHOUT_SUBJECT".to_string());
                    };
                    let fields = parse_fields(&input.payload);
                    let amount = fields.get("amount").cloned().unwrap_or_default();
                    let memo = fields.get("memo").cloned().unwrap_or_default();
                    Ok(LogicOutput::Sink(
                        [
                            // The account number is the bank's own handle for
                            // its customer: derived from the bank-side vid the
                            // bank legitimately knows.
                            ("account".to_string(), format!("acct-{}", &hex::encode(vid)[..12])),
                            ("delta".to_string(), format!("+{amount}")),
                            ("memo".to_string(), memo),
                        ]
                        .into_iter()
                        .collect(),
                    ))
                })
                .collect()
        });
        registry.register(alpha_ledger.measurement(), credit_logic.clone());
        registry.register(beta_ledger.measurement(), credit_logic);

        let (_, _, sponsor_clerk) = enroll_requester(
            &mut authority,
            &mut staff,
            "sponsor-clerk-1",
            "sponsor-bank",
            "clerk",
            &mut rng,
        );
        let (_, _, alpha_clerk) =
            enroll_requester(&mut authority, &mut staff, "alpha-clerk-1", ALPHA, "clerk", &mut rng);
        let (_, _, beta_clerk) =
            enroll_requester(&mut authority, &mut staff, "beta-clerk-1", BETA, "clerk", &mut rng);

        let mapping_store = EnvelopeStore::new(StoreKeys::generate(&mut rng));
        let mut accounts = BTreeMap::new();
        accounts.insert(ALPHA.to_string(), BTreeMap::new());
        accounts.insert(BETA.to_string(), BTreeMap::new());

        DbtWorld {
            rng,
            clock,
            platform,
            authority,
            ministry_issuer,
            ministry_pay,
            ministry_seal,
            r1,
            r2,
            r3,
            r4_alpha,
            r4_beta,
            events,
            registry,
            pfms,
            sponsor_ledger,
            mapper,
            npci_return,
            alpha_ledger,
            beta_ledger,
            sponsor_clerk,
            alpha_clerk,
            beta_clerk,
            beneficiaries: Vec::new(),
            mapping_store,
            directory: Vec::new(),
            pending_file: None,
            pending_transfers: Vec::new(),
            undeliverable: Vec::new(),
            pending_credits: BTreeMap::new(),
            pool: pool_start,
            pool_start,
            accounts,
            disbursed: 0,
            credited: 0,
            refunded: 0,
            logs: ComponentLogs::new(),
        }
    }

    fn setup_err(&self, step: &Step, message: impl Into<String>) -> ScenarioError {
        ScenarioError::Config(ConfigError { line: step.line, message: message.into() })
    }

    fn beneficiary(&self, step: &Step) -> Result<usize, ScenarioError> {
        let index = step.arg_usize("index", 0)?;
        if index >= self.beneficiaries.len() {
            return Err(self.setup_err(
                step,
                format!("index={index} but only {} onboarded", self.beneficiaries.len()),
            ));
        }
        Ok(index)
    }

    /// Enrols one beneficiary end to end: two unlinkable vids, consents on
    /// both sides, the ministry's enrolment approval, and the sealed
    /// mapping uploaded from their device to the switch.
    fn onboard_one(&mut self) {
        let index = self.beneficiaries.len();
        let person =
            self.authority.enroll(&format!("beneficiary-{index}"), &mut self.rng).expect("fresh label");
        let now = self.clock.now();

        let dbt_vid = person.derive_vid("dbt", 0);
        let dbt_key = person.vid_signing_key(&dbt_vid);
        let dbt_cert = super::certify_vid_key(&mut self.authority, &person, &dbt_vid, &dbt_key);
        let consent = sign_consent(
            &person,
            &dbt_vid,
            &dbt_cert,
            "route-payments",
            ConsentObject::Org("npci".into()),
            &["DTT/Transfer", "MAP/Mapping"],
            now + CONSENT_TTL_S,
            &mut self.rng,
        );
        self.r3.record_consent(&consent, now, &mut self.events).expect("fresh consent verifies");

        self.ministry_issuer.register_subject(dbt_vid.value, dbt_key.public(), &["dbt-enrolled"]);
        let approval = self
            .ministry_issuer
            .issue_direct(
                &dbt_vid.value,
                "dbt-enrolled",
                &Evidence {
                    presented_vid: dbt_vid.value,
                    signature: dbt_key.sign(&issuance_signing_input(
                        "dbt-ministry",
                        "dbt-enrolled",
                        &dbt_vid.value,
                    )),
                },
            )
            .expect("subject just registered");
        self.r3.record_approval(&approval, now, &mut self.events).expect("trusted approver");

        let bank = bank_for(index);
        let bank_vid = person.derive_vid(bank, 0);
        let bank_key = person.vid_signing_key(&bank_vid);
        let bank_cert = super::certify_vid_key(&mut self.authority, &person, &bank_vid, &bank_key);
        let consent = sign_consent(
            &person,
            &bank_vid,
            &bank_cert,
            "receive-dbt",
            ConsentObject::Org(bank.into()),
            &[credit_type(bank)],
            now + CONSENT_TTL_S,
            &mut self.rng,
        );
        let r4 = if bank == ALPHA { &mut self.r4_alpha } else { &mut self.r4_beta };
        r4.record_consent(&consent, now, &mut self.events).expect("fresh consent verifies");

        let mut payload = dbt_vid.value.to_vec();
        payload.extend_from_slice(&bank_vid.value);
        payload.extend_from_slice(bank.as_bytes());
        let mapping = Envelope::seal(
            "MAP/Mapping",
            Subject::Vid(dbt_vid.value),
            &payload,
            &self.r3.public_key(),
            &dbt_key,
            &mut self.rng,
        )
        .expect("sealing with fresh keys cannot fail");
        self.mapping_store.put(&mapping, &mut self.rng);
        self.directory.push(DirectoryEntry {
            index,
            subject: dbt_vid.value,
            producer: dbt_key.public(),
        });

        self.beneficiaries.push(Beneficiary { person, dbt_vid, dbt_cert, bank_vid });
    }

    /// Builds this round's signed payment file: every beneficiary, seeded
    /// pseudo-random amounts.
    fn make_file(&mut self, scheme: &str) -> PaymentFile {
        let entries = self
            .beneficiaries
            .iter()
            .map(|b| PaymentEntry {
                beneficiary: b.dbt_vid.value,
                amount: 500 + (self.rng.next_u32() % 1500) as u64,
            })
            .collect();
        PaymentFile::sign(scheme, entries, &self.ministry_pay)
    }

    /// Runs the sponsor-bank ledger sink over debit orders or refunds and
    /// applies the minimised rows to the pool balance.
    fn apply_at_sponsor(&mut self, inputs: &[(Envelope, sig::VerifyKey)]) -> Result<TeRun, TeError> {
        let run = run_te(
            &self.sponsor_ledger,
            &self.platform,
            inputs,
            Some(&self.sponsor_clerk),
            &mut self.r2,
            &self.registry,
            self.clock.now(),
            &mut self.rng,
            &mut self.events,
        )?;
        for row in &run.sink_rows {
            let delta: i64 = row
                .get("delta")
                .and_then(|d| d.parse().ok())
                .expect("ledger rows carry numeric deltas");
            self.pool += delta;
            if delta > 0 {
                self.refunded += delta;
            }
            self.logs.note(
                "sponsor-bank",
                format!(
                    "{} {} balance {}",
                    row.get("account").map(String::as_str).unwrap_or("?"),
                    row.get("delta").map(String::as_str).unwrap_or("?"),
                    self.pool
                ),
            );
        }
        for line in &run.notifications {
            self.logs.note("sponsor-bank", line);
        }
        Ok(run)
    }
}

// ---------------------------------------------------------------------------
// The script driver
// ---------------------------------------------------------------------------

/// Runs the benefit-transfer scenario. Config parameter: `pool` (opening
/// sponsor balance, default 1000000).
///
/// Step vocabulary:
/// - `onboard count=N` — enrol N beneficiaries (alternating banks)
/// - `skip_mapping index=i` — the switch loses i's directory entry
/// - `pay scheme=<name>` — ministry signs a payment file for everyone
/// - `tamper_pay` — a forged file (inflated amount, wrong signer) is
///   submitted to the pipeline
/// - `disburse` — PFMS turns the pending file into a pooled debit (posted
///   at the sponsor bank) and per-beneficiary sealed transfers
/// - `route` — the switch's mapper re-addresses pending transfers to
///   bank-side vids; unroutable amounts refund to the pool
/// - `revoke index=i` — beneficiary withdraws routing consent
/// - `remove_revoked index=i` — the switch honours i's removal request:
///   directory entry deleted, their pending transfers set aside
/// - `return_undeliverable` — set-aside transfers flow back to the pool
///   through the wind-down TE
/// - `credit bank=<name>` — that bank's ledger posts its pending credits
pub fn run(config: &ScenarioConfig, seed: u64) -> Result<ScenarioReport, ScenarioError> {
    if config.scenario != "dbt" {
        return Err(ScenarioError::Setup(format!(
            "config names scenario {:?}, not dbt",
            config.scenario
        )));
    }
    config.check_params(&["pool"])?;
    let pool_start = config.param_u64("pool", 1_000_000)? as i64;

    let mut world = DbtWorld::build(pool_start, seed);
    let mut report = ScenarioReport::new("dbt", seed);

    for step in &config.steps {
        let observed = match step.action.as_str() {
            "onboard" => {
                let count = step.arg_usize("count", 1)?;
                if count == 0 || world.beneficiaries.len() + count > 10_000 {
                    return Err(world.setup_err(step, "count must keep enrolment within 10000"));
                }
                for _ in 0..count {
                    world.onboard_one();
                }
                Outcome::Ok
            }
            "skip_mapping" => {
                let index = world.beneficiary(step)?;
                let before = world.directory.len();
                world.directory.retain(|e| e.index != index);
                if world.directory.len() == before {
                    return Err(world.setup_err(step, "no directory entry to drop"));
                }
                Outcome::Ok
            }
            "pay" => {
                let scheme = step.arg("scheme").unwrap_or("pension").to_string();
                if world.beneficiaries.is_empty() {
                    return Err(world.setup_err(step, "onboard beneficiaries before paying"));
                }
                let file = world.make_file(&scheme);
                let envelope = Envelope::seal(
                    "DTP/PaymentFile",
                    Subject::None,
                    &file.to_bytes(),
                    &world.r1.public_key(),
                    &world.ministry_seal,
                    &mut world.rng,
                )
                .expect("sealing with fresh keys cannot fail");
                world.logs.note(
                    "ministry",
                    format!("signed file {scheme}: {} entries, total {}", file.entries.len(), file.total()),
                );
                world.logs.attach("ministry", &file.to_bytes());
                world.pending_file = Some((envelope, world.ministry_seal.public(), file));
                Outcome::Ok
            }
            "tamper_pay" => tamper_step(&mut world, step)?,
            "disburse" => {
                let Some((envelope, producer, file)) = world.pending_file.take() else {
                    return Err(world.setup_err(step, "no pending payment file"));
                };
                let routing = OutputRouting::to(world.r1.public_key())
                    .route("DTD/DebitOrder", world.r2.public_key())
                    .route("DTT/Transfer", world.r3.public_key());
                let inputs = [(envelope, producer)];
                let result = run_te_routed(
                    &world.pfms,
                    &world.platform,
                    &inputs,
                    None,
                    &mut world.r1,
                    &world.registry,
                    &routing,
                    world.clock.now(),
                    &mut world.rng,
                    &mut world.events,
                );
                match result {
                    Err(_) => Outcome::of_run(&result),
                    Ok(run) => {
                        for line in &run.context_log {
                            world.logs.note("pfms-context", line);
                        }
                        let mut debits = Vec::new();
                        for output in run.outputs {
                            if output.type_id.name() == "DTD/DebitOrder" {
                                debits.push((output, world.pfms.producer_key()));
                            } else {
                                world.logs.attach("npci-transfers", &output.to_bytes());
                                world
                                    .pending_transfers
                                    .push((output, world.pfms.producer_key()));
                            }
                        }
                        world.disbursed += file.total() as i64;
                        let posted = world.apply_at_sponsor(&debits);
                        Outcome::of_run(&posted)
                    }
                }
            }
            "route" => route_step(&mut world, step)?,
            "revoke" => {
                let index = world.beneficiary(step)?;
                let b = &world.beneficiaries[index];
                let revocation = sign_revocation(
                    &b.person,
                    &b.dbt_vid,
                    &b.dbt_cert,
                    "route-payments",
                    ConsentObject::Org("npci".into()),
                );
                match world.r3.revoke_consent(&revocation, world.clock.now(), &mut world.events) {
                    Ok(_) => Outcome::Ok,
                    Err(e) => Outcome::Error(format!("REVOKE_{e:?}").to_uppercase()),
                }
            }
            "remove_revoked" => {
                let index = world.beneficiary(step)?;
                let subject = Subject::Vid(world.beneficiaries[index].dbt_vid.value);
                world.directory.retain(|e| e.index != index);
                let (set_aside, rest): (Vec<_>, Vec<_>) = world
                    .pending_transfers
                    .drain(..)
                    .partition(|(envelope, _)| envelope.subject == subject);
                world.pending_transfers = rest;
                world.undeliverable.extend(set_aside);
                Outcome::Ok
            }
            "return_undeliverable" => {
                if world.undeliverable.is_empty() {
                    return Err(world.setup_err(step, "nothing set aside to return"));
                }
                let inputs = std::mem::take(&mut world.undeliverable);
                let routing = OutputRouting::to(world.r3.public_key())
                    .route("DTR/Refund", world.r2.public_key());
                let result = run_te_routed(
                    &world.npci_return,
                    &world.platform,
                    &inputs,
                    None,
                    &mut world.r3,
                    &world.registry,
                    &routing,
                    world.clock.now(),
                    &mut world.rng,
                    &mut world.events,
                );
                match result {
                    Err(_) => {
                        world.undeliverable = inputs;
                        Outcome::of_run(&result)
                    }
                    Ok(run) => {
                        let refunds: Vec<_> = run
                            .outputs
                            .into_iter()
                            .map(|o| (o, world.npci_return.producer_key()))
                            .collect();
                        let posted = world.apply_at_sponsor(&refunds);
                        Outcome::of_run(&posted)
                    }
                }
            }
            "credit" => credit_step(&mut world, step)?,
            "advance" => {
                world.clock.advance(step.arg_u64("secs", 3600)?);
                Outcome::Ok
            }
            other => return Err(world.setup_err(step, format!("unknown dbt step {other:?}"))),
        };
        report.record_step(step, observed);
    }

    run_checks(&mut world, &mut report);
    report.tally([
        &world.r1.audit,
        &world.r2.audit,
        &world.r3.audit,
        &world.r4_alpha.audit,
        &world.r4_beta.audit,
    ]);
    report.digest("audit-r1", world.r1.audit.to_text().as_bytes());
    report.digest("audit-r2", world.r2.audit.to_text().as_bytes());
    report.digest("audit-r3", world.r3.audit.to_text().as_bytes());
    report.digest("audit-r4-alpha", world.r4_alpha.audit.to_text().as_bytes());
    report.digest("audit-r4-beta", world.r4_beta.audit.to_text().as_bytes());
    report.digest("events", world.events.to_text().as_bytes());
    report.digest("mapping-store", &world.mapping_store.to_bytes());
    report.attach_audit("r1-payments", world.r1.audit.to_text());
    report.attach_audit("r2-sponsor", world.r2.audit.to_text());
    report.attach_audit("r3-switch", world.r3.audit.to_text());
    report.attach_audit("r4-alpha", world.r4_alpha.audit.to_text());
    report.attach_audit("r4-beta", world.r4_beta.audit.to_text());
    Ok(report)
}

/// A forged payment file: copied amounts, one bumped, signed by someone
/// who is not the ministry. The pipeline grants the *access* (the TE and
/// rule are legitimate) and then the TE's own verification rejects the
/// file — defence in depth past the regulator.
fn tamper_step(world: &mut DbtWorld, step: &Step) -> Result<Outcome, ScenarioError> {
    if world.beneficiaries.is_empty() {
        return Err(world.setup_err(step, "onboard beneficiaries before tampering"));
    }
    let attacker = sig::KeyPair::generate(&mut world.rng);
    let mut file = world.make_file("windfall");
    file.entries[0].amount += 1_000_000;
    let forged = PaymentFile::sign(&file.scheme, file.entries, &attacker);
    let envelope = Envelope::seal(
        "DTP/PaymentFile",
        Subject::None,
        &forged.to_bytes(),
        &world.r1.public_key(),
        &attacker,
        &mut world.rng,
    )
    .expect("sealing with fresh keys cannot fail");
    let inputs = [(envelope, attacker.public())];
    let routing = OutputRouting::to(world.r1.public_key())
        .route("DTD/DebitOrder", world.r2.public_key())
        .route("DTT/Transfer", world.r3.public_key());
    let result = run_te_routed(
        &world.pfms,
        &world.platform,
        &inputs,
        None,
        &mut world.r1,
        &world.registry,
        &routing,
        world.clock.now(),
        &mut world.rng,
        &mut world.events,
    );
    Ok(Outcome::of_run(&result))
}

fn route_step(world: &mut DbtWorld, step: &Step) -> Result<Outcome, ScenarioError> {
    if world.pending_transfers.is_empty() {
        return Err(world.setup_err(step, "no pending transfers to route"));
    }
    let mut inputs = world.pending_transfers.clone();
    for entry in &world.directory {
        let stored = world
            .mapping_store
            .fetch("MAP/Mapping", &Subject::Vid(entry.subject))
            .expect("the in-run store is never tampered");
        inputs.extend(stored.into_iter().map(|envelope| (envelope, entry.producer)));
    }
    let routing = OutputRouting::to(world.r3.public_key())
        .route("DTC/Credit-alpha", world.r4_alpha.public_key())
        .route("DTC/Credit-beta", world.r4_beta.public_key())
        .route("DTR/Refund", world.r2.public_key());
    let result = run_te_routed(
        &world.mapper,
        &world.platform,
        &inputs,
        None,
        &mut world.r3,
        &world.registry,
        &routing,
        world.clock.now(),
        &mut world.rng,
        &mut world.events,
    );
    let run = match result {
        Err(_) => return Ok(Outcome::of_run(&result)),
        Ok(run) => run,
    };
    world.pending_transfers.clear();
    for line in &run.context_log {
        world.logs.note("mapper-context", line);
    }
    let mut refunds = Vec::new();
    for output in run.outputs {
        match output.type_id.name() {
            "DTR/Refund" => refunds.push((output, world.mapper.producer_key())),
            name => {
                let bank = if name == "DTC/Credit-alpha" { ALPHA } else { BETA };
                world.logs.attach(bank, &output.to_bytes());
                world
                    .pending_credits
                    .entry(bank.to_string())
                    .or_default()
                    .push((output, world.mapper.producer_key()));
            }
        }
    }
    if refunds.is_empty() {
        return Ok(Outcome::Ok);
    }
    let posted = world.apply_at_sponsor(&refunds);
    Ok(Outcome::of_run(&posted))
}

fn credit_step(world: &mut DbtWorld, step: &Step) -> Result<Outcome, ScenarioError> {
    let bank = step.arg("bank").unwrap_or(ALPHA).to_string();
    if bank != ALPHA && bank != BETA {
        return Err(world.setup_err(step, format!("unknown bank {bank:?}")));
    }
    let inputs = world.pending_credits.remove(&bank).unwrap_or_default();
    let result = match bank.as_str() {
        ALPHA => run_te(
            &world.alpha_ledger,
            &world.platform,
            &inputs,
            Some(&world.alpha_clerk),
            &mut world.r4_alpha,
            &world.registry,
            world.clock.now(),
            &mut world.rng,
            &mut world.events,
        ),
        _ => run_te(
            &world.beta_ledger,
            &world.platform,
            &inputs,
            Some(&world.beta_clerk),
            &mut world.r4_beta,
            &world.registry,
            world.clock.now(),
            &mut world.rng,
            &mut world.events,
        ),
    };
    let run = match result {
        Err(_) => {
            world.pending_credits.insert(bank, inputs);
            return Ok(Outcome::of_run(&result));
        }
        Ok(run) => run,
    };
    let ledger = world.accounts.get_mut(&bank).expect("both banks initialised");
    for row in &run.sink_rows {
        let account = row.get("account").cloned().unwrap_or_default();
        let delta: i64 = row
            .get("delta")
            .and_then(|d| d.parse().ok())
            .expect("ledger rows carry numeric deltas");
        *ledger.entry(account.clone()).or_insert(0) += delta;
        world.credited += delta;
        world.logs.note(&bank, format!("{account} {delta:+}"));
    }
    for line in &run.notifications {
        world.logs.note(&bank, line);
    }
    Ok(Outcome::Ok)
}

fn run_checks(world: &mut DbtWorld, report: &mut ScenarioReport) {
    // Money conservation, end to end and exact: the pool's movement is
    // explained entirely by credits that landed, refunds that returned,
    // and amounts still sealed in flight.
    let bank_total: i64 = world.accounts.values().flat_map(|a| a.values()).sum();
    let in_flight = world.disbursed - world.credited - world.refunded;
    let conserved = world.pool_start == world.pool + bank_total + in_flight;
    report.check(
        "conservation",
        conserved,
        format!(
            "pool {} -> {}, banks {bank_total}, in flight {in_flight}",
            world.pool_start, world.pool
        ),
    );

    // Pair isolation: assemble every party's persisted view and scan for
    // each beneficiary's two vids. They may co-occur only inside the
    // mapper's (destroyed) execution context.
    world.logs.attach("audit-r1", world.r1.audit.to_text().as_bytes());
    world.logs.attach("audit-r2", world.r2.audit.to_text().as_bytes());
    world.logs.attach("audit-r3", world.r3.audit.to_text().as_bytes());
    world.logs.attach("audit-r4-alpha", world.r4_alpha.audit.to_text().as_bytes());
    world.logs.attach("audit-r4-beta", world.r4_beta.audit.to_text().as_bytes());
    world.logs.attach("events", world.events.to_text().as_bytes());
    world.logs.attach("npci-directory", &world.mapping_store.to_bytes());

    let mut linking_components: Vec<String> = Vec::new();
    let mut routed_pairs = 0usize;
    for b in &world.beneficiaries {
        let dbt_side = world.logs.components_containing(&b.dbt_vid.value);
        let bank_side = world.logs.components_containing(&b.bank_vid.value);
        for component in dbt_side.iter().filter(|c| bank_side.contains(c)) {
            if *component == "mapper-context" {
                routed_pairs += 1;
            } else {
                linking_components.push(format!("{component} links {}", b.dbt_vid.hex()));
            }
        }
    }
    report.check(
        "pair-isolation",
        linking_components.is_empty(),
        if linking_components.is_empty() {
            format!(
                "{} beneficiaries, both vids co-occur only in mapper-context ({routed_pairs} routed)",
                world.beneficiaries.len()
            )
        } else {
            linking_components.join("; ")
        },
    );

    // The scan must not pass vacuously: whoever was routed really does
    // appear, both-sided, in the mapper context.
    if world.credited > 0 {
        report.check(
            "mapper-saw-pairs",
            routed_pairs > 0,
            format!("{routed_pairs} pairs inside the TE context"),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two payment rounds over five beneficiaries: a clean round (with one
    /// lost mapping refunding), a forged file, then a round interrupted by
    /// consent withdrawal — atomic denial, removal, graceful rerun, and
    /// the wind-down refund.
    const SCRIPT: &str = "\
scenario dbt
step onboard count=5 expect=ok
step skip_mapping index=4 expect=ok
step pay scheme=pension expect=ok
step disburse expect=ok
step route expect=ok
step credit bank=alpha-bank expect=ok
step credit bank=beta-bank expect=ok
step tamper_pay expect=error:BAD_MINISTRY_SIGNATURE
step pay scheme=scholarship expect=ok
step disburse expect=ok
step revoke index=1 expect=ok
step route expect=deny:PREDICATE_MISSING
step remove_revoked index=1 expect=ok
step route expect=ok
step return_undeliverable expect=ok
step credit bank=alpha-bank expect=ok
step credit bank=beta-bank expect=ok
";

    #[test]
    fn full_script_meets_every_expectation() {
        let config = ScenarioConfig::parse(SCRIPT).unwrap();
        let report = run(&config, 21).unwrap();
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
        assert_eq!(report.denies.get("PREDICATE_MISSING"), Some(&1));
    }

    #[test]
    fn reports_are_deterministic_in_config_and_seed() {
        let config = ScenarioConfig::parse(SCRIPT).unwrap();
        let a = run(&config, 3).unwrap().to_text();
        let b = run(&config, 3).unwrap().to_text();
        assert_eq!(a, b);
        let c = run(&config, 4).unwrap().to_text();
        assert_ne!(a, c);
    }

    #[test]
    fn payment_file_round_trips_and_rejects_tampering() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let key = sig::KeyPair::generate(&mut rng);
        let entries = (0..4)
            .map(|i| {
                let mut vid = [0u8; 32];
                rng.fill_bytes(&mut vid);
                PaymentEntry { beneficiary: vid, amount: 100 * (i + 1) }
            })
            .collect();
        let file = PaymentFile::sign("pension", entries, &key);
        assert!(file.verify(&key.public()));
        assert_eq!(file.total(), 1000);

        let decoded = PaymentFile::from_bytes(&file.to_bytes()).unwrap();
        assert_eq!(decoded, file);
        assert!(decoded.verify(&key.public()));

        let mut bumped = file.clone();
        bumped.entries[2].amount += 1;
        assert!(!bumped.verify(&key.public()));

        let mut zeroed = file.clone();
        zeroed.entries[0].amount = 0;
        assert_eq!(
            PaymentFile::from_bytes(&zeroed.to_bytes()),
            Err(PayFileError::ZeroAmount(0))
        );
    }

    #[test]
    fn out_of_order_scripts_are_config_errors() {
        for script in [
            "scenario dbt\nstep disburse expect=ok\n",
            "scenario dbt\nstep route expect=ok\n",
            "scenario dbt\nstep pay expect=ok\n",
            "scenario dbt\nstep onboard count=1 expect=ok\nstep skip_mapping index=3 expect=ok\n",
        ] {
            let config = ScenarioConfig::parse(script).unwrap();
            assert!(matches!(run(&config, 1), Err(ScenarioError::Config(_))), "{script}");
        }
    }
}
