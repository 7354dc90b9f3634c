//! Requester-side auditing.
//!
//! The timeline comes from state events on the ledger. Evidence comes from
//! the notary's direct interface, or from an on-ledger response after
//! escalation. Every record is verified and reclassified, then compared with
//! the status the timeline implies at its vid.

use crate::contract::{
    Abort, AccountId, Call, Event, QueryId, ServiceAgreement, ServiceId, Status, VidRange,
};
use crate::crypto::KeyHash;
use crate::ledger::{Ledger, LedgerError, LedgerTransaction, TxId, TxOutcome};
use crate::notary::http::{EvidenceBundle, MAX_RANGE};
use crate::notary::store::AuditRecord;
use crate::notary::{classify, ClassifyPolicy, Evidence};
use crate::probe::verify_evidence;
use crate::timesource::{verify_timestamped, ChainLookup};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::future::Future;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;
use thiserror::Error;

/// Published state changes of one service, in vid order.
#[derive(Clone, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct Timeline {
    pub entries: Vec<(u64, Status)>,
}

impl Timeline {
    pub fn from_ledger(ledger: &Ledger, service_id: ServiceId) -> Timeline {
        let entries = ledger
            .events_from(0)
            .into_iter()
            .filter_map(|e| match e.event {
                Event::StateChanged { service_id: s, state } if s == service_id => Some((state.vid, state.status)),
                _ => None,
            })
            .collect();
        Timeline { entries }
    }

    /// Status in force at `vid`: the latest change at or before it.
    pub fn implied_at(&self, vid: u64) -> Option<Status> {
        let idx = self.entries.partition_point(|(v, _)| *v <= vid);
        idx.checked_sub(1).map(|i| self.entries[i].1)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `0:OK 31:NewKey:<hex> 32:OK`; parses back with `FromStr`.
    pub fn compact(&self) -> String {
        self.render(Status::compact)
    }

    /// `0:OK 31:Err(NewKey a632…) 32:OK`
    pub fn human(&self) -> String {
        self.render(Status::human)
    }

    fn render(&self, f: impl Fn(&Status) -> String) -> String {
        self.entries
            .iter()
            .map(|(vid, s)| format!("{vid}:{}", f(s)))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl fmt::Display for Timeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.human())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("bad timeline entry {0:?}")]
pub struct ParseTimelineError(pub String);

impl FromStr for Timeline {
    type Err = ParseTimelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut entries = Vec::new();
        for item in s.split_whitespace() {
            let bad = || ParseTimelineError(item.to_string());
            let (vid, status) = item.split_once(':').ok_or_else(bad)?;
            entries.push((vid.parse().map_err(|_| bad())?, status.parse().map_err(|_| bad())?));
        }
        Ok(Timeline { entries })
    }
}

/// Publicly checkable material behind a verdict.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Proof {
    /// Verified evidence whose status differs from the published one.
    Evidence(Box<AuditRecord>),
    /// An on-ledger response that is not valid evidence.
    LedgerResponse {
        query_id: QueryId,
        height: u64,
        #[serde(with = "crate::encoding::bytes")]
        payload: Vec<u8>,
    },
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum AuditVerdict {
    Consistent,
    EvidenceContradictsState {
        vid: u64,
        published: Option<Status>,
        observed: Option<Status>,
        proof: Proof,
    },
    EvidenceMissing {
        vids: Vec<u64>,
    },
    SlaBreach {
        query_id: QueryId,
    },
}

impl AuditVerdict {
    pub fn kind(&self) -> VerdictKind {
        match self {
            AuditVerdict::Consistent => VerdictKind::Consistent,
            AuditVerdict::EvidenceContradictsState { .. } => VerdictKind::EvidenceContradictsState,
            AuditVerdict::EvidenceMissing { .. } => VerdictKind::EvidenceMissing,
            AuditVerdict::SlaBreach { .. } => VerdictKind::SlaBreach,
        }
    }

    pub fn summary(&self) -> String {
        match self {
            AuditVerdict::Consistent => "consistent".into(),
            AuditVerdict::EvidenceContradictsState {
                vid,
                published,
                observed,
                ..
            } => format!(
                "evidence contradicts state at vid {vid}: published {}, evidence shows {}",
                published.map_or("nothing".into(), |s| s.human()),
                observed.map_or("invalid response".into(), |s| s.human()),
            ),
            AuditVerdict::EvidenceMissing { vids } => format!("evidence missing for vids {}", compress_ranges(vids)),
            AuditVerdict::SlaBreach { query_id } => format!("SLA breach on query {query_id}"),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, Serialize, Deserialize)]
pub enum VerdictKind {
    Consistent,
    EvidenceContradictsState,
    EvidenceMissing,
    SlaBreach,
}

fn compress_ranges(vids: &[u64]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < vids.len() {
        let start = vids[i];
        let mut end = start;
        while i + 1 < vids.len() && vids[i + 1] == end + 1 {
            i += 1;
            end = vids[i];
        }
        parts.push(if start == end {
            start.to_string()
        } else {
            format!("{start}-{end}")
        });
        i += 1;
    }
    parts.join(",")
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SourceError {
    #[error("notary unreachable: {0}")]
    Unreachable(String),
    #[error("unknown service {0}")]
    UnknownService(ServiceId),
}

/// Where evidence comes from: the notary's HTTP interface, or an in-process
/// audit view.
pub trait EvidenceSource: Send + Sync {
    fn fetch(&self, service_id: ServiceId, vids: VidRange) -> impl Future<Output = Result<EvidenceBundle, SourceError>> + Send;
}

impl EvidenceSource for Arc<crate::notary::http::AuditApi> {
    fn fetch(&self, service_id: ServiceId, vids: VidRange) -> impl Future<Output = Result<EvidenceBundle, SourceError>> + Send {
        let result = if self.faults().read().silent {
            Err(SourceError::Unreachable("notary is not answering".into()))
        } else if !self.knows(service_id) {
            Err(SourceError::UnknownService(service_id))
        } else {
            Ok(self.bundle(service_id, vids))
        };
        std::future::ready(result)
    }
}

/// Fetches evidence over the direct HTTP interface.
#[derive(Clone)]
pub struct HttpEvidenceSource {
    base: String,
    client: reqwest::Client,
}

impl HttpEvidenceSource {
    pub fn new(base_url: &str, timeout: Duration) -> HttpEvidenceSource {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .expect("static client configuration");
        HttpEvidenceSource {
            base: base_url.trim_end_matches('/').to_string(),
            client,
        }
    }

    async fn fetch_chunk(&self, service_id: ServiceId, vids: VidRange) -> Result<EvidenceBundle, SourceError> {
        let url = format!(
            "{}/services/{service_id}/validations?from={}&to={}",
            self.base, vids.from, vids.to
        );
        let unreachable = |e: reqwest::Error| SourceError::Unreachable(e.to_string());
        let response = self.client.get(&url).send().await.map_err(unreachable)?;
        match response.status() {
            s if s.is_success() => response.json().await.map_err(unreachable),
            reqwest::StatusCode::NOT_FOUND => Err(SourceError::UnknownService(service_id)),
            s => Err(SourceError::Unreachable(format!("{url}: HTTP {s}"))),
        }
    }
}

impl EvidenceSource for HttpEvidenceSource {
    fn fetch(&self, service_id: ServiceId, vids: VidRange) -> impl Future<Output = Result<EvidenceBundle, SourceError>> + Send {
        async move {
            let mut out = EvidenceBundle {
                service_id,
                validations: Vec::new(),
                missing: Vec::new(),
            };
            let mut from = vids.from;
            loop {
                let to = vids.to.min(from.saturating_add(MAX_RANGE - 1));
                let chunk = self.fetch_chunk(service_id, VidRange { from, to }).await?;
                out.validations.extend(chunk.validations);
                out.missing.extend(chunk.missing);
                if to == vids.to {
                    return Ok(out);
                }
                from = to + 1;
            }
        }
    }
}

/// True iff every signature in the record verifies against its inlined chains.
/// Records without signed evidence carry nothing to verify.
pub fn verify_record(record: &AuditRecord) -> bool {
    let chains = &record.chains;
    let vid_matches = record.record.evidence.main().is_none_or(|vr| vr.vid == record.record.vid);
    let signed_ok = |vr: &crate::probe::ValidationResult| {
        !vr.is_signed()
            || chains
                .lookup(&vr.chain_ref)
                .is_some_and(|c| verify_evidence(vr, &c) == Ok(true))
    };
    vid_matches
        && match &record.record.evidence {
            Evidence::Probe(vr) => signed_ok(vr),
            Evidence::Timestamped(tv) => verify_timestamped(tv, chains) == Ok(true),
            Evidence::TimeSourceFailure { main, .. } => main.as_ref().is_none_or(signed_ok),
        }
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("unknown service {0}")]
    UnknownService(ServiceId),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("ledger rejected {method}: {reason}")]
    Rejected { method: &'static str, reason: Abort },
    #[error("empty vid range")]
    EmptyRange,
}

impl AuditError {
    pub fn is_unreachable(&self) -> bool {
        matches!(self, AuditError::Source(SourceError::Unreachable(_)))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditReport {
    pub service_id: ServiceId,
    pub vids: VidRange,
    pub verified: usize,
    pub timeline: Timeline,
    pub verdict: AuditVerdict,
}

/// Compares a bundle with the timeline over `vids`.
///
/// Contradictions take precedence over gaps. Records that fail verification
/// count as missing.
pub fn judge(
    agreement: &ServiceAgreement,
    timeline: &Timeline,
    baseline: Option<KeyHash>,
    bundle: &EvidenceBundle,
    vids: VidRange,
) -> (AuditVerdict, usize) {
    let mut policy = ClassifyPolicy::for_service(agreement);
    policy.baseline = baseline;
    let mut missing = Vec::new();
    let mut verified = 0;
    for vid in vids.iter() {
        let record = bundle
            .validations
            .iter()
            .find(|r| r.record.vid == vid && r.record.service_id == agreement.service_id)
            .filter(|r| verify_record(r));
        let Some(record) = record else {
            missing.push(vid);
            continue;
        };
        verified += 1;
        let observed = classify(&policy, &record.record.evidence);
        policy.observe(&record.record.evidence);
        let published = timeline.implied_at(vid);
        if published != Some(observed) {
            let verdict = AuditVerdict::EvidenceContradictsState {
                vid,
                published,
                observed: Some(observed),
                proof: Proof::Evidence(Box::new(record.clone())),
            };
            return (verdict, verified);
        }
    }
    if missing.is_empty() {
        (AuditVerdict::Consistent, verified)
    } else {
        (AuditVerdict::EvidenceMissing { vids: missing }, verified)
    }
}

/// With an empty whitelist the first observed key is the baseline; find it
/// from the earliest verifiable evidence before `before`.
async fn find_baseline<S: EvidenceSource>(
    agreement: &ServiceAgreement,
    source: &S,
    before: u64,
) -> Result<Option<KeyHash>, AuditError> {
    if !agreement.whitelist.is_empty() || before == 0 {
        return Ok(None);
    }
    let bundle = source
        .fetch(
            agreement.service_id,
            VidRange {
                from: 0,
                to: before - 1,
            },
        )
        .await?;
    let mut records: Vec<&AuditRecord> = bundle.validations.iter().filter(|r| verify_record(r)).collect();
    records.sort_by_key(|r| r.record.vid);
    Ok(records.iter().find_map(|r| r.record.evidence.observed_key()))
}

pub async fn audit_range<S: EvidenceSource>(
    ledger: &Ledger,
    source: &S,
    service_id: ServiceId,
    vids: VidRange,
) -> Result<AuditReport, AuditError> {
    if vids.from > vids.to {
        return Err(AuditError::EmptyRange);
    }
    let snap = ledger.snapshot();
    let agreement = snap
        .contract
        .service(service_id)
        .ok_or(AuditError::UnknownService(service_id))?;
    let timeline = Timeline::from_ledger(ledger, service_id);
    let bundle = source.fetch(service_id, vids).await?;
    let baseline = find_baseline(agreement, source, vids.from).await?;
    let (verdict, verified) = judge(agreement, &timeline, baseline, &bundle, vids);
    Ok(AuditReport {
        service_id,
        vids,
        verified,
        timeline,
        verdict,
    })
}

/// A third party's check of a contradiction: the proof verifies and its
/// evidence classifies differently from what the ledger implies.
pub fn confirm_contradiction(ledger: &Ledger, service_id: ServiceId, verdict: &AuditVerdict, baseline: Option<KeyHash>) -> bool {
    let AuditVerdict::EvidenceContradictsState { vid, proof, .. } = verdict else {
        return false;
    };
    let snap = ledger.snapshot();
    let Some(agreement) = snap.contract.service(service_id) else {
        return false;
    };
    let timeline = Timeline::from_ledger(ledger, service_id);
    match proof {
        Proof::Evidence(record) => {
            let mut policy = ClassifyPolicy::for_service(agreement);
            policy.baseline = baseline;
            record.record.vid == *vid
                && record.record.service_id == service_id
                && verify_record(record)
                && Some(classify(&policy, &record.record.evidence)) != timeline.implied_at(*vid)
        }
        Proof::LedgerResponse { query_id, height, payload } => snap.contract.queries.get(query_id).is_some_and(|q| {
            q.service_id == service_id
                && q.responses.iter().any(|r| r.at == *height && &r.payload == payload)
                && parse_response(payload, service_id).is_none()
        }),
    }
}

fn parse_response(payload: &[u8], service_id: ServiceId) -> Option<EvidenceBundle> {
    serde_json::from_slice::<EvidenceBundle>(payload)
        .ok()
        .filter(|b| b.service_id == service_id)
}

/// Submits a service request, attaching the fee.
pub fn request_service(
    ledger: &Ledger,
    requester: &AccountId,
    domain: &str,
    whitelist: BTreeSet<KeyHash>,
    fee: u64,
    time_source: Option<String>,
) -> Result<TxId, LedgerError> {
    ledger.submit(LedgerTransaction::new(
        requester,
        fee,
        Call::Request {
            domain: domain.to_string(),
            whitelist,
            fee,
            time_source,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Stage {
    Start,
    Queried { tx: TxId },
    Open { query_id: QueryId, asked_at: u64 },
    Claimed { query_id: QueryId, tx: TxId },
    Done(AuditVerdict),
}

/// What `Escalation::poll` did.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EscalationStep {
    /// Waiting for blocks.
    Waiting,
    /// The SLA timeout passed and a claim was submitted.
    ClaimSubmitted(TxId),
    Done(AuditVerdict),
}

/// Falls back to the on-ledger query path.
///
/// `start` submits `sla_query`. Each `poll` inspects the latest block: a
/// timely response is judged like direct evidence; once `SLA_TOUT` blocks
/// pass without one, `sla_claim` is submitted, and its execution yields
/// `SlaBreach`.
pub struct Escalation {
    pub service_id: ServiceId,
    pub vids: VidRange,
    pub requester: AccountId,
    query_id: Option<QueryId>,
    stage: Stage,
}

impl Escalation {
    pub fn new(service_id: ServiceId, vids: VidRange, requester: AccountId) -> Escalation {
        Escalation {
            service_id,
            vids,
            requester,
            query_id: None,
            stage: Stage::Start,
        }
    }

    pub fn query_id(&self) -> Option<QueryId> {
        self.query_id
    }

    pub fn verdict(&self) -> Option<&AuditVerdict> {
        match &self.stage {
            Stage::Done(v) => Some(v),
            _ => None,
        }
    }

    pub fn start(&mut self, ledger: &Ledger) -> Result<TxId, AuditError> {
        let tx = ledger.submit(LedgerTransaction::new(
            &self.requester,
            0,
            Call::SlaQuery {
                service_id: self.service_id,
                vids: self.vids,
            },
        ))?;
        self.stage = Stage::Queried { tx };
        Ok(tx)
    }

    pub fn poll(&mut self, ledger: &Ledger) -> Result<EscalationStep, AuditError> {
        ledger.refresh()?;
        loop {
            match self.stage.clone() {
                Stage::Start => {
                    self.start(ledger)?;
                    return Ok(EscalationStep::Waiting);
                }
                Stage::Queried { tx } => {
                    let Some(receipt) = ledger.receipt(tx) else {
                        return Ok(EscalationStep::Waiting);
                    };
                    match receipt.outcome {
                        TxOutcome::Aborted { reason } => {
                            return Err(AuditError::Rejected {
                                method: "sla_query",
                                reason,
                            })
                        }
                        TxOutcome::Executed { events } => {
                            let opened = events.iter().find_map(|e| match e {
                                Event::QueryOpened { query_id, asked_at, .. } => Some((*query_id, *asked_at)),
                                _ => None,
                            });
                            let (query_id, asked_at) = opened.expect("executed sla_query opens a query");
                            self.query_id = Some(query_id);
                            self.stage = Stage::Open { query_id, asked_at };
                        }
                    }
                }
                Stage::Open { query_id, asked_at } => {
                    if let Some(v) = self.judge_response(ledger, query_id)? {
                        self.stage = Stage::Done(v.clone());
                        return Ok(EscalationStep::Done(v));
                    }
                    let snap = ledger.snapshot();
                    let timeout = snap
                        .contract
                        .service(self.service_id)
                        .map_or(snap.contract.config.sla_timeout_blocks, |s| s.sla_timeout_blocks);
                    // A claim submitted now lands in block height+1.
                    if snap.height < asked_at + timeout {
                        return Ok(EscalationStep::Waiting);
                    }
                    let tx = ledger.submit(LedgerTransaction::new(&self.requester, 0, Call::SlaClaim { query_id }))?;
                    self.stage = Stage::Claimed { query_id, tx };
                    return Ok(EscalationStep::ClaimSubmitted(tx));
                }
                Stage::Claimed { query_id, tx } => {
                    let Some(receipt) = ledger.receipt(tx) else {
                        return Ok(EscalationStep::Waiting);
                    };
                    let verdict = match receipt.outcome {
                        TxOutcome::Executed { .. } => AuditVerdict::SlaBreach { query_id },
                        TxOutcome::Aborted { reason } => match self.judge_response(ledger, query_id)? {
                            Some(v) => v,
                            None => {
                                return Err(AuditError::Rejected {
                                    method: "sla_claim",
                                    reason,
                                })
                            }
                        },
                    };
                    self.stage = Stage::Done(verdict.clone());
                    return Ok(EscalationStep::Done(verdict));
                }
                Stage::Done(v) => return Ok(EscalationStep::Done(v)),
            }
        }
    }

    /// Verdict from a timely on-ledger response, if there is one.
    fn judge_response(&self, ledger: &Ledger, query_id: QueryId) -> Result<Option<AuditVerdict>, AuditError> {
        let snap = ledger.snapshot();
        let Some(query) = snap.contract.queries.get(&query_id) else {
            return Ok(None);
        };
        let Some(response) = query.responses.iter().find(|r| r.timely) else {
            return Ok(None);
        };
        let agreement = snap
            .contract
            .service(self.service_id)
            .ok_or(AuditError::UnknownService(self.service_id))?;
        let Some(bundle) = parse_response(&response.payload, self.service_id) else {
            return Ok(Some(AuditVerdict::EvidenceContradictsState {
                vid: self.vids.from,
                published: Timeline::from_ledger(ledger, self.service_id).implied_at(self.vids.from),
                observed: None,
                proof: Proof::LedgerResponse {
                    query_id,
                    height: response.at,
                    payload: response.payload.clone(),
                },
            }));
        };
        let timeline = Timeline::from_ledger(ledger, self.service_id);
        let baseline = if agreement.whitelist.is_empty() {
            let mut records: Vec<&AuditRecord> = bundle.validations.iter().filter(|r| verify_record(r)).collect();
            records.sort_by_key(|r| r.record.vid);
            records.iter().find_map(|r| r.record.evidence.observed_key())
        } else {
            None
        };
        Ok(Some(judge(agreement, &timeline, baseline, &bundle, self.vids).0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{sha256, Digest32};

    fn key(b: u8) -> KeyHash {
        KeyHash(sha256(&[b]))
    }

    #[test]
    fn implied_status_is_latest_change() {
        let t = Timeline {
            entries: vec![(0, Status::Ok), (31, Status::NewKey(key(1))), (32, Status::Ok)],
        };
        assert_eq!(t.implied_at(0), Some(Status::Ok));
        assert_eq!(t.implied_at(30), Some(Status::Ok));
        assert_eq!(t.implied_at(31), Some(Status::NewKey(key(1))));
        assert_eq!(t.implied_at(1000), Some(Status::Ok));
        let late = Timeline {
            entries: vec![(3, Status::Connect)],
        };
        assert_eq!(late.implied_at(2), None);
    }

    #[test]
    fn timeline_text_forms() {
        let mut k = [0u8; 32];
        k[0] = 0xa6;
        k[1] = 0x32;
        let t = Timeline {
            entries: vec![(0, Status::Ok), (31, Status::NewKey(KeyHash(Digest32(k)))), (32, Status::Ok)],
        };
        assert_eq!(t.human(), "0:OK 31:Err(NewKey a632…) 32:OK");
        assert_eq!(t.compact().parse::<Timeline>().unwrap(), t);
        assert_eq!("".parse::<Timeline>().unwrap(), Timeline::default());
        assert!("7".parse::<Timeline>().is_err());
        assert!("x:OK".parse::<Timeline>().is_err());
    }

    #[test]
    fn missing_vids_are_compressed() {
        assert_eq!(compress_ranges(&[5, 6, 7, 9, 11, 12]), "5-7,9,11-12");
        assert_eq!(compress_ranges(&[]), "");
    }
}
