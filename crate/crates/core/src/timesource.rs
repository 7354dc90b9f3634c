//! Bracketing a validation between two signed timestamps.
//!
//! Any TLS server that signs its ServerKeyExchange can act as a time source:
//! the notary submits a 32-byte payload as the client random and gets the
//! payload back bound to the source's `gmt_unix_time` by the source's
//! signature. Chaining three probes yields evidence that the monitored key was
//! seen no earlier than `t1` and no later than `t2`:
//!
//! ```text
//! token_before = stamp(r)
//! main         = probe(domain, H(canonical(token_before)))
//! token_after  = stamp(H(canonical(main)))
//! ```

use crate::crypto::{sha256, Digest32};
use crate::probe::{extract_server_timestamp, verify_evidence, ProbeReport, Prober, ValidationResult};
use crate::wire::CertificateChain;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::future::Future;
use std::time::Duration;
use thiserror::Error;
use tokio::time::Instant;

/// A time source's signed acknowledgement of `payload`.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct TimestampToken {
    #[serde(with = "crate::encoding::bytes32")]
    pub payload: [u8; 32],
    pub source_time: u32,
    pub evidence: ValidationResult,
}

impl TimestampToken {
    /// Wraps signed evidence whose client random is the payload.
    pub fn from_evidence(evidence: ValidationResult) -> Option<TimestampToken> {
        if !evidence.is_signed() {
            return None;
        }
        Some(TimestampToken {
            payload: evidence.client_random,
            source_time: extract_server_timestamp(&evidence),
            evidence,
        })
    }

    fn well_formed(&self) -> bool {
        self.evidence.is_signed()
            && self.evidence.client_random == self.payload
            && self.source_time == extract_server_timestamp(&self.evidence)
    }
}

/// Fixed-order concatenation of the signed parts of a validation, used for
/// both links of the hash chain.
pub fn canonical_bytes(vr: &ValidationResult) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 32 + vr.dh_params.len() + vr.signature.len() + 32);
    out.extend_from_slice(&vr.client_random);
    out.extend_from_slice(&vr.server_random.to_bytes());
    out.extend_from_slice(&vr.dh_params);
    out.extend_from_slice(&vr.signature);
    out.extend_from_slice(vr.chain_ref.as_bytes());
    out
}

pub fn evidence_digest(vr: &ValidationResult) -> Digest32 {
    sha256(&canonical_bytes(vr))
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct TimestampedValidation {
    #[serde(with = "crate::encoding::bytes32")]
    pub r: [u8; 32],
    pub token_before: TimestampToken,
    pub main: ValidationResult,
    pub token_after: TimestampToken,
    pub bounds: (u32, u32),
}

impl TimestampedValidation {
    pub fn width_secs(&self) -> u32 {
        self.bounds.1.saturating_sub(self.bounds.0)
    }

    /// Every chain the bundle references.
    pub fn chain_refs(&self) -> [Digest32; 3] {
        [
            self.token_before.evidence.chain_ref,
            self.main.chain_ref,
            self.token_after.evidence.chain_ref,
        ]
    }
}

#[derive(Debug, Error, Clone)]
pub enum TimestampError {
    /// `main` is set when the monitored server was probed before the source failed.
    #[error("time source failed: {reason}")]
    TimeSourceFailure {
        reason: String,
        main: Option<Box<ProbeReport>>,
    },
    #[error("main probe failed: {}", .0.result.diagnostic.as_deref().unwrap_or("no diagnostic"))]
    MainProbeFailure(Box<ProbeReport>),
}

/// A stamped token together with the chain its evidence references.
#[derive(Clone, Debug)]
pub struct Stamp {
    pub token: TimestampToken,
    pub chain: CertificateChain,
}

/// A reference time source. The TLS-server source is the only built-in one;
/// other kinds of source can be added behind the same interface.
pub trait TimeSource: Send + Sync {
    fn stamp(&self, payload: [u8; 32], deadline: Duration) -> impl Future<Output = Result<Stamp, TimestampError>> + Send;
}

/// Uses a probeable TLS server as a time source.
pub struct TlsTimeSource<'a, P: Prober> {
    pub prober: &'a P,
    pub domain: String,
}

impl<'a, P: Prober> TlsTimeSource<'a, P> {
    pub fn new(prober: &'a P, domain: impl Into<String>) -> Self {
        TlsTimeSource {
            prober,
            domain: domain.into(),
        }
    }
}

impl<P: Prober> TimeSource for TlsTimeSource<'_, P> {
    fn stamp(&self, payload: [u8; 32], deadline: Duration) -> impl Future<Output = Result<Stamp, TimestampError>> + Send {
        async move {
            let report = self.prober.probe(&self.domain, payload, deadline).await;
            let failure = |why: String| TimestampError::TimeSourceFailure {
                reason: format!("{}: {why}", self.domain),
                main: None,
            };
            let chain = report.chain.ok_or_else(|| {
                failure(report.result.diagnostic.clone().unwrap_or_else(|| "no evidence".into()))
            })?;
            let token = TimestampToken::from_evidence(report.result)
                .ok_or_else(|| failure("evidence not signed".into()))?;
            Ok(Stamp { token, chain })
        }
    }
}

/// A complete timestamped probe: the bundle plus the chains it references
/// and the report of the main probe.
#[derive(Clone, Debug)]
pub struct TimestampedProbe {
    pub bundle: TimestampedValidation,
    pub chains: Vec<CertificateChain>,
    pub main_report: ProbeReport,
}

/// Runs the three exchanges in order. The overall `deadline` is shared.
pub async fn timestamped_probe<P: Prober, T: TimeSource>(
    prober: &P,
    domain: &str,
    time_source: &T,
    deadline: Duration,
) -> Result<TimestampedProbe, TimestampError> {
    let until = Instant::now() + deadline;
    let left = || until.saturating_duration_since(Instant::now());

    let r: [u8; 32] = rand::random();
    let before = time_source.stamp(r, left()).await?;
    let main_random = evidence_digest(&before.token.evidence).0;
    let main_report = prober.probe(domain, main_random, left()).await;
    let Some(main_chain) = main_report.chain.clone().filter(|_| main_report.result.is_signed()) else {
        return Err(TimestampError::MainProbeFailure(Box::new(main_report)));
    };
    let with_main = |e: TimestampError| match e {
        TimestampError::TimeSourceFailure { reason, .. } => TimestampError::TimeSourceFailure {
            reason,
            main: Some(Box::new(main_report.clone())),
        },
        other => other,
    };
    let after = time_source
        .stamp(evidence_digest(&main_report.result).0, left())
        .await
        .map_err(with_main)?;

    let bounds = (before.token.source_time, after.token.source_time);
    if bounds.0 > bounds.1 {
        return Err(with_main(TimestampError::TimeSourceFailure {
            reason: format!("time source went backwards: {} then {}", bounds.0, bounds.1),
            main: None,
        }));
    }
    let bundle = TimestampedValidation {
        r,
        token_before: before.token,
        main: main_report.result.clone(),
        token_after: after.token,
        bounds,
    };
    let mut chains = vec![before.chain];
    for c in [main_chain, after.chain] {
        if !chains.iter().any(|k| k.chain_hash() == c.chain_hash()) {
            chains.push(c);
        }
    }
    Ok(TimestampedProbe {
        bundle,
        chains,
        main_report,
    })
}

/// Resolves chain references to certificate chains.
pub trait ChainLookup {
    fn lookup(&self, chain_ref: &Digest32) -> Option<CertificateChain>;
}

impl ChainLookup for BTreeMap<Digest32, CertificateChain> {
    fn lookup(&self, chain_ref: &Digest32) -> Option<CertificateChain> {
        self.get(chain_ref).cloned()
    }
}

impl ChainLookup for [CertificateChain] {
    fn lookup(&self, chain_ref: &Digest32) -> Option<CertificateChain> {
        self.iter().find(|c| c.chain_hash() == *chain_ref).cloned()
    }
}

impl ChainLookup for Vec<CertificateChain> {
    fn lookup(&self, chain_ref: &Digest32) -> Option<CertificateChain> {
        self.as_slice().lookup(chain_ref)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VerifyTimestampError {
    #[error("chain {0} not found")]
    MissingChain(Digest32),
}

/// True iff the three signatures verify, the hash chain links as built by
/// `timestamped_probe`, and the bounds are ordered and match the tokens.
pub fn verify_timestamped<C: ChainLookup + ?Sized>(
    tv: &TimestampedValidation,
    chains: &C,
) -> Result<bool, VerifyTimestampError> {
    let links_hold = tv.token_before.payload == tv.r
        && tv.token_before.well_formed()
        && tv.token_after.well_formed()
        && tv.main.is_signed()
        && tv.main.client_random == evidence_digest(&tv.token_before.evidence).0
        && tv.token_after.payload == evidence_digest(&tv.main).0
        && tv.bounds == (tv.token_before.source_time, tv.token_after.source_time)
        && tv.bounds.0 <= tv.bounds.1;

    let mut signatures_hold = true;
    for vr in [&tv.token_before.evidence, &tv.main, &tv.token_after.evidence] {
        let chain = chains
            .lookup(&vr.chain_ref)
            .ok_or(VerifyTimestampError::MissingChain(vr.chain_ref))?;
        signatures_hold &= matches!(verify_evidence(vr, &chain), Ok(true));
    }
    Ok(links_hold && signatures_hold)
}
