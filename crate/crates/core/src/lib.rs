//! Accountable TLS key notary.
//!
//! A notary repeatedly runs half TLS 1.2 handshakes against monitored domains
//! and keeps the signed ServerKeyExchange as evidence that the domain used a
//! given key at a given time. Only changes of the validation state are
//! published to a block-ordered ledger, where a contract also escrows fees and
//! an SLA deposit. Requesters audit the notary by fetching evidence over HTTP
//! and fall back to on-ledger queries when the notary does not answer.

pub mod auditor;
pub mod clock;
pub mod contract;
pub mod crypto;
pub mod encoding;
pub mod ledger;
pub mod notary;
pub mod probe;
pub mod scan;
pub mod testbed;
pub mod timesource;
pub mod wire;
