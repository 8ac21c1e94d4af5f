//! Cryptographic building blocks: digests and PRFs, ordinary signatures,
//! blind signatures, key wrapping, and the type-bound envelope format that
//! everything above this layer stores and moves.

pub mod blind;
pub mod envelope;
pub mod hash;
pub mod kem;
pub mod sig;

pub use envelope::{Envelope, OpenError, PayloadKey, Subject, TypeId};
pub use hash::{hash, prf, Digest};
