//! Privacy-by-design building blocks for public service data flows.
//!
//! The model: personal data moves only inside typed, encrypted envelopes
//! whose data keys are wrapped to a regulator. Computation happens in
//! measured trusted executables (TEs) that attest what they are before the
//! regulator will release a key, people appear as unlinkable virtual
//! identities backed by blind-signed credentials, and every decision the
//! regulator takes lands in a hash-chained audit log.
//!
//! Layout:
//!
//! - [`crypto`] — hashing, signatures, blind signatures, key wrapping, and
//!   the typed envelope itself;
//! - [`identity`] — virtual identities, credentials, and the identity
//!   authority with its regulated linking protocol;
//! - [`te`] — manifests, measurement, attestation, and the TE runner;
//! - [`regulator`] — TE approval, consent and approval facts, the rule
//!   language, the authorization gate, and the audit log;
//! - [`store`] — encrypted at-rest storage with blind index tokens;
//! - [`scenarios`] — three end-to-end pipelines (health records, direct
//!   benefit transfer, contact tracing) built from the parts above;
//! - [`pattern`], [`framing`], [`trace`], [`clock`] — shared plumbing.

pub mod clock;
pub mod crypto;
pub mod framing;
pub mod identity;
pub mod pattern;
pub mod regulator;
pub mod scenarios;
pub mod store;
pub mod te;
pub mod trace;
