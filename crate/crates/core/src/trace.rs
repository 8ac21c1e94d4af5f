//! Run-time event trace. Components append one event per observable step;
//! tests assert on the *order* of events (consent recorded before
//! attestation, attestation before any key release, and so on) and
//! scenario reports tally them.
//!
//! Events never carry raw virtual identities. Subjects are rendered as
//! one-way handles (a short digest of the vid) so that traces and logs can
//! be persisted and compared without recreating the linkages the rest of
//! the design works to prevent.

use crate::crypto::envelope::{Subject, TypeId};
use crate::crypto::hash;

/// One-way display handle for a vid: safe to log, stable within a run.
pub fn vid_handle(vid: &[u8; 32]) -> String {
    format!("s:{}", &hash::hash(vid).to_hex()[..12])
}

/// Handle for a subject, `-` when there is none.
pub fn subject_handle(subject: &Subject) -> String {
    match subject {
        Subject::None => "-".to_string(),
        Subject::Vid(v) => vid_handle(v),
    }
}

/// Handle for a type: the name plus the subject handle, never the raw vid.
pub fn type_handle(type_id: &TypeId) -> String {
    match type_id.subject_param() {
        None => type_id.name().to_string(),
        Some(vid) => format!("{}@{}", type_id.name(), vid_handle(&vid)),
    }
}

/// An observable step in a run.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Event {
    ConsentRecorded { subject: String, verb: String },
    ConsentRevoked { subject: String, verb: String },
    ApprovalRecorded { approver: String, subject: String, attribute: String },
    TeApproved { te: String, measurement: String },
    NonceIssued { nonce: String },
    AttestationVerified { te: String },
    RequesterAuthenticated { requester: String },
    TypeAuthenticated { type_text: String },
    RuleInstantiated { rule_id: String, type_text: String },
    KeyProvisioned { type_text: String },
    AccessDenied { reason: String, type_text: String },
    EnvelopeOpened { type_text: String },
    LogicRun { te: String },
    OutputSealed { type_text: String },
    SinkEmitted { te: String, rows: usize },
    LinkRecorded { purpose: String },
    Note { component: String, message: String },
}

impl Event {
    /// Stable name of the event's kind, for position lookups in tests.
    pub fn kind(&self) -> &'static str {
        match self {
            Event::ConsentRecorded { .. } => "consent-recorded",
            Event::ConsentRevoked { .. } => "consent-revoked",
            Event::ApprovalRecorded { .. } => "approval-recorded",
            Event::TeApproved { .. } => "te-approved",
            Event::NonceIssued { .. } => "nonce-issued",
            Event::AttestationVerified { .. } => "attestation-verified",
            Event::RequesterAuthenticated { .. } => "requester-authenticated",
            Event::TypeAuthenticated { .. } => "type-authenticated",
            Event::RuleInstantiated { .. } => "rule-instantiated",
            Event::KeyProvisioned { .. } => "key-provisioned",
            Event::AccessDenied { .. } => "access-denied",
            Event::EnvelopeOpened { .. } => "envelope-opened",
            Event::LogicRun { .. } => "logic-run",
            Event::OutputSealed { .. } => "output-sealed",
            Event::SinkEmitted { .. } => "sink-emitted",
            Event::LinkRecorded { .. } => "link-recorded",
            Event::Note { .. } => "note",
        }
    }
}

impl std::fmt::Display for Event {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Event::ConsentRecorded { subject, verb } => {
                write!(f, "consent-recorded subject={subject} verb={verb}")
            }
            Event::ConsentRevoked { subject, verb } => {
                write!(f, "consent-revoked subject={subject} verb={verb}")
            }
            Event::ApprovalRecorded { approver, subject, attribute } => {
                write!(f, "approval-recorded approver={approver} subject={subject} attribute={attribute}")
            }
            Event::TeApproved { te, measurement } => {
                write!(f, "te-approved te={te} measurement={measurement}")
            }
            Event::NonceIssued { nonce } => write!(f, "nonce-issued nonce={nonce}"),
            Event::AttestationVerified { te } => write!(f, "attestation-verified te={te}"),
            Event::RequesterAuthenticated { requester } => {
                write!(f, "requester-authenticated requester={requester}")
            }
            Event::TypeAuthenticated { type_text } => {
                write!(f, "type-authenticated type={type_text}")
            }
            Event::RuleInstantiated { rule_id, type_text } => {
                write!(f, "rule-instantiated rule={rule_id} type={type_text}")
            }
            Event::KeyProvisioned { type_text } => write!(f, "key-provisioned type={type_text}"),
            Event::AccessDenied { reason, type_text } => {
                write!(f, "access-denied reason={reason} type={type_text}")
            }
            Event::EnvelopeOpened { type_text } => write!(f, "envelope-opened type={type_text}"),
            Event::LogicRun { te } => write!(f, "logic-run te={te}"),
            Event::OutputSealed { type_text } => write!(f, "output-sealed type={type_text}"),
            Event::SinkEmitted { te, rows } => write!(f, "sink-emitted te={te} rows={rows}"),
            Event::LinkRecorded { purpose } => write!(f, "link-recorded purpose={purpose}"),
            Event::Note { component, message } => write!(f, "note [{component}] {message}"),
        }
    }
}

/// Append-only event stream for one run.
#[derive(Default, Debug)]
pub struct EventLog {
    events: Vec<Event>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: Event) {
        self.events.push(event);
    }

    pub fn note(&mut self, component: &str, message: impl Into<String>) {
        self.events.push(Event::Note { component: component.to_string(), message: message.into() });
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Index of the first event of the given kind at or after `from`.
    pub fn position_from(&self, from: usize, kind: &str) -> Option<usize> {
        (from..self.events.len()).find(|&i| self.events[i].kind() == kind)
    }

    pub fn position(&self, kind: &str) -> Option<usize> {
        self.position_from(0, kind)
    }

    /// Number of events of the given kind.
    pub fn count(&self, kind: &str) -> usize {
        self.events.iter().filter(|e| e.kind() == kind).count()
    }

    /// The whole trace, one line per event, for reports and debugging.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, e) in self.events.iter().enumerate() {
            out.push_str(&format!("{i:05} {e}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_and_counts() {
        let mut log = EventLog::new();
        log.push(Event::NonceIssued { nonce: "ab".into() });
        log.push(Event::AttestationVerified { te: "x".into() });
        log.push(Event::NonceIssued { nonce: "cd".into() });
        assert_eq!(log.position("nonce-issued"), Some(0));
        assert_eq!(log.position_from(1, "nonce-issued"), Some(2));
        assert_eq!(log.position("key-provisioned"), None);
        assert_eq!(log.count("nonce-issued"), 2);
    }

    #[test]
    fn handles_hide_raw_vids() {
        let vid = [0x5au8; 32];
        let handle = vid_handle(&vid);
        assert!(!handle.contains(&hex::encode(vid)));
        assert!(handle.starts_with("s:"));
        // Same vid, same handle; different vid, different handle.
        assert_eq!(handle, vid_handle(&vid));
        assert_ne!(handle, vid_handle(&[0x5bu8; 32]));

        let t = TypeId::for_subject("DT4/R", &Subject::Vid(vid)).unwrap();
        let rendered = type_handle(&t);
        assert!(!rendered.contains(&hex::encode(vid)));
        assert!(rendered.starts_with("DT4/R@s:"));
    }

    #[test]
    fn trace_renders_one_line_per_event() {
        let mut log = EventLog::new();
        log.note("store", "opened");
        log.push(Event::KeyProvisioned { type_text: "DT1/X".into() });
        let text = log.to_text();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("note [store] opened"));
    }
}
