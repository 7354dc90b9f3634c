//! The notary daemon.
//!
//! Each `tick` catches up with the ledger (accepting requests, registering
//! services, answering on-ledger queries), retries failed publications, and
//! runs the validation cycles that are due. A cycle probes the domain, stores
//! the evidence under the next vid, and publishes a state transaction only if
//! the classified status differs from the last one.

pub mod http;
pub mod store;

use crate::clock::SharedClock;
use crate::contract::{
    AccountId, Call, Event, QueryId, RequestId, ServiceAgreement, ServiceId, Status, ValidationState, VidRange,
};
use crate::crypto::KeyHash;
use crate::ledger::{Ledger, LedgerError, LedgerTransaction};
use crate::probe::{extract_server_timestamp, ProbeOutcome, Prober, ValidationResult};
use crate::timesource::{timestamped_probe, TimestampError, TimestampedValidation, TlsTimeSource};
use crate::wire::CertificateChain;
use http::AuditApi;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;
use std::time::Duration;
use store::{EvidenceStore, StoreError};
use thiserror::Error;

/// What a validation produced.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Evidence {
    Probe(ValidationResult),
    Timestamped(TimestampedValidation),
    /// The time source failed. `main` is the monitored server's evidence if
    /// it was obtained first.
    TimeSourceFailure {
        diagnostic: String,
        main: Option<ValidationResult>,
    },
}

impl Evidence {
    /// Evidence about the monitored server itself.
    pub fn main(&self) -> Option<&ValidationResult> {
        match self {
            Evidence::Probe(vr) => Some(vr),
            Evidence::Timestamped(tv) => Some(&tv.main),
            Evidence::TimeSourceFailure { main, .. } => main.as_ref(),
        }
    }

    fn main_mut(&mut self) -> Option<&mut ValidationResult> {
        match self {
            Evidence::Probe(vr) => Some(vr),
            Evidence::Timestamped(tv) => Some(&mut tv.main),
            Evidence::TimeSourceFailure { main, .. } => main.as_mut(),
        }
    }

    /// Key of the monitored server, if its flight was signed.
    pub fn observed_key(&self) -> Option<KeyHash> {
        self.main().filter(|vr| vr.is_signed()).and_then(|vr| vr.observed_key_hash)
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct StoredValidation {
    pub service_id: ServiceId,
    pub vid: u64,
    /// Status the notary derived from the evidence.
    pub status: Status,
    pub evidence: Evidence,
}

/// Inputs to `classify` besides the evidence.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct ClassifyPolicy {
    pub whitelist: BTreeSet<KeyHash>,
    pub skew_tolerance_secs: u64,
    /// With an empty whitelist, the first key observed.
    pub baseline: Option<KeyHash>,
}

impl ClassifyPolicy {
    pub fn for_service(s: &ServiceAgreement) -> ClassifyPolicy {
        ClassifyPolicy {
            whitelist: s.whitelist.clone(),
            skew_tolerance_secs: s.skew_tolerance_secs,
            baseline: None,
        }
    }

    pub fn accepts(&self, key: &KeyHash) -> bool {
        if self.whitelist.is_empty() {
            self.baseline.is_none_or(|b| b == *key)
        } else {
            self.whitelist.contains(key)
        }
    }

    /// Records the baseline key for an empty whitelist.
    pub fn observe(&mut self, evidence: &Evidence) {
        if self.whitelist.is_empty() && self.baseline.is_none() {
            self.baseline = evidence.observed_key();
        }
    }
}

/// Maps evidence to a status. A key outside the whitelist is reported even
/// when the timestamp is also off.
pub fn classify(policy: &ClassifyPolicy, evidence: &Evidence) -> Status {
    if let Some(key) = evidence.observed_key() {
        if !policy.accepts(&key) {
            return Status::NewKey(key);
        }
    }
    let tolerance = policy.skew_tolerance_secs as i64;
    match evidence {
        Evidence::Probe(vr) => match vr.outcome {
            ProbeOutcome::Signed => {
                let server = extract_server_timestamp(vr) as i64;
                let local = (vr.notary_wall_clock_ms / 1000) as i64;
                if (server - local).abs() > tolerance {
                    Status::Time
                } else {
                    Status::Ok
                }
            }
            ProbeOutcome::ConnectFailure => Status::Connect,
            ProbeOutcome::ProtocolFailure => Status::Other,
        },
        Evidence::Timestamped(tv) => {
            let local = (tv.main.notary_wall_clock_ms / 1000) as i64;
            let (t1, t2) = (tv.bounds.0 as i64, tv.bounds.1 as i64);
            if local < t1 - tolerance || local > t2 + tolerance {
                Status::Time
            } else {
                Status::Ok
            }
        }
        Evidence::TimeSourceFailure { .. } => Status::Time,
    }
}

/// Fixed-period scheduling. Each service is due every `period_ms`; a service
/// that falls more than a period behind restarts its cadence from now.
#[derive(Clone, Debug, Default)]
pub struct Scheduler {
    entries: BTreeMap<ServiceId, (u64, u64)>,
}

impl Scheduler {
    pub fn add(&mut self, id: ServiceId, period_ms: u64, first_due_ms: u64) {
        self.entries.insert(id, (period_ms.max(1), first_due_ms));
    }

    pub fn remove(&mut self, id: ServiceId) {
        self.entries.remove(&id);
    }

    pub fn contains(&self, id: ServiceId) -> bool {
        self.entries.contains_key(&id)
    }

    /// Services due at `now_ms`, each at most once.
    pub fn run_due(&mut self, now_ms: u64) -> Vec<ServiceId> {
        let mut due = Vec::new();
        for (id, (period, next)) in self.entries.iter_mut() {
            if *next <= now_ms {
                due.push(*id);
                *next += *period;
                if *next <= now_ms {
                    *next = now_ms + *period;
                }
            }
        }
        due
    }

    pub fn next_due(&self) -> Option<u64> {
        self.entries.values().map(|(_, next)| *next).min()
    }
}

/// Deliberate misbehavior, for exercising auditors.
#[derive(Clone, Debug, Default)]
pub struct Faults {
    /// Status changes observed at these vids are not published.
    pub suppress: BTreeSet<u64>,
    /// At these vids the given status is published and no evidence is kept.
    pub fabricate: BTreeMap<u64, Status>,
    /// The notary refuses to serve these vids.
    pub censor: BTreeSet<u64>,
    /// Neither the HTTP interface nor on-ledger queries are answered.
    pub silent: bool,
}

impl Faults {
    pub fn is_honest(&self) -> bool {
        self.suppress.is_empty() && self.fabricate.is_empty() && self.censor.is_empty() && !self.silent
    }
}

#[derive(Clone, Debug)]
pub struct NotaryConfig {
    pub owner: AccountId,
    pub probe_deadline: Duration,
    /// Accept every pending request, depositing the SLA stake.
    pub auto_accept: bool,
    pub answer_queries: bool,
}

impl NotaryConfig {
    pub fn new(owner: impl Into<AccountId>) -> NotaryConfig {
        NotaryConfig {
            owner: owner.into(),
            probe_deadline: Duration::from_secs(10),
            auto_accept: true,
            answer_queries: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum NotaryError {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("unknown service {0}")]
    UnknownService(ServiceId),
}

/// Result of one validation cycle.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct CycleOutcome {
    pub service_id: ServiceId,
    pub vid: u64,
    pub status: Status,
    /// A state transaction was submitted (or queued for retry).
    pub published: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TickReport {
    pub accepted: Vec<RequestId>,
    pub registered: Vec<ServiceId>,
    pub answered: Vec<QueryId>,
    pub cycles: Vec<CycleOutcome>,
    pub errors: Vec<String>,
}

struct ServiceRuntime {
    agreement: ServiceAgreement,
    policy: ClassifyPolicy,
    next_vid: u64,
    /// Last status published or queued for publication.
    last_status: Option<Status>,
}

#[derive(Default)]
struct Runtime {
    services: BTreeMap<ServiceId, ServiceRuntime>,
    scheduler: Scheduler,
    cursor: u64,
    unpublished: VecDeque<(ServiceId, ValidationState)>,
    accept_sent: BTreeSet<RequestId>,
    answered: BTreeSet<QueryId>,
}

pub struct Notary<P: Prober> {
    ledger: Arc<Ledger>,
    prober: P,
    store: Arc<EvidenceStore>,
    clock: SharedClock,
    config: NotaryConfig,
    api: Arc<AuditApi>,
    runtime: Mutex<Runtime>,
}

impl<P: Prober> Notary<P> {
    pub fn new(ledger: Arc<Ledger>, prober: P, store: Arc<EvidenceStore>, clock: SharedClock, config: NotaryConfig) -> Self {
        let api = Arc::new(AuditApi::new(store.clone(), ledger.clone()));
        Notary {
            ledger,
            prober,
            store,
            clock,
            config,
            api,
            runtime: Mutex::new(Runtime::default()),
        }
    }

    pub fn api(&self) -> Arc<AuditApi> {
        self.api.clone()
    }

    pub fn store(&self) -> &Arc<EvidenceStore> {
        &self.store
    }

    pub fn ledger(&self) -> &Arc<Ledger> {
        &self.ledger
    }

    pub fn prober(&self) -> &P {
        &self.prober
    }

    pub fn faults(&self) -> Arc<RwLock<Faults>> {
        self.api.faults()
    }

    pub fn set_faults(&self, faults: Faults) {
        *self.api.faults().write() = faults;
    }

    pub fn services(&self) -> Vec<ServiceId> {
        self.runtime.lock().services.keys().copied().collect()
    }

    /// Earliest time any service is due, in clock milliseconds.
    pub fn next_due_ms(&self) -> Option<u64> {
        self.runtime.lock().scheduler.next_due()
    }

    pub fn unpublished(&self) -> usize {
        self.runtime.lock().unpublished.len()
    }

    pub async fn tick(&self) -> TickReport {
        let mut report = TickReport::default();
        if let Err(e) = self.ledger.refresh() {
            report.errors.push(e.to_string());
        }
        self.sync_ledger(&mut report);
        self.flush_publications(&mut report);
        let due = self.runtime.lock().scheduler.run_due(self.clock.now_ms());
        let results = futures::future::join_all(due.into_iter().map(|id| self.run_validation_cycle(id))).await;
        for r in results {
            match r {
                Ok(outcome) => report.cycles.push(outcome),
                Err(e) => report.errors.push(e.to_string()),
            }
        }
        report
    }

    /// Probes one service, stores the evidence and publishes on change.
    pub async fn run_validation_cycle(&self, service_id: ServiceId) -> Result<CycleOutcome, NotaryError> {
        let (vid, domain, time_source) = {
            let mut rt = self.runtime.lock();
            let s = rt.services.get_mut(&service_id).ok_or(NotaryError::UnknownService(service_id))?;
            let vid = s.next_vid;
            s.next_vid += 1;
            (vid, s.agreement.domain.clone(), s.agreement.time_source.clone())
        };

        let (mut evidence, chains) = self.gather(&domain, time_source.as_deref()).await;
        if let Some(main) = evidence.main_mut() {
            main.vid = vid;
        }

        let faults = self.api.faults().read().clone();
        let mut rt = self.runtime.lock();
        let rt = &mut *rt;
        let s = rt.services.get_mut(&service_id).ok_or(NotaryError::UnknownService(service_id))?;
        let mut status = classify(&s.policy, &evidence);
        s.policy.observe(&evidence);

        let fabricated = faults.fabricate.get(&vid).copied();
        let store_result = match fabricated {
            Some(fake) => {
                status = fake;
                Ok(())
            }
            None => self.store.append(
                StoredValidation {
                    service_id,
                    vid,
                    status,
                    evidence,
                },
                &chains,
            ),
        };

        let changed = s.last_status != Some(status);
        let published = changed && !faults.suppress.contains(&vid);
        if published {
            s.last_status = Some(status);
            let state = ValidationState { status, vid };
            rt.unpublished.push_back((service_id, state));
            self.flush_locked(rt, &mut Vec::new());
        }
        store_result?;
        Ok(CycleOutcome {
            service_id,
            vid,
            status,
            published,
        })
    }

    async fn gather(&self, domain: &str, time_source: Option<&str>) -> (Evidence, Vec<CertificateChain>) {
        let deadline = self.config.probe_deadline;
        let Some(source) = time_source else {
            let report = self.prober.probe(domain, rand::random(), deadline).await;
            return (Evidence::Probe(report.result), report.chain.into_iter().collect());
        };
        let ts = TlsTimeSource::new(&self.prober, source);
        match timestamped_probe(&self.prober, domain, &ts, deadline).await {
            Ok(tp) => (Evidence::Timestamped(tp.bundle), tp.chains),
            Err(TimestampError::MainProbeFailure(report)) => {
                (Evidence::Probe(report.result), report.chain.into_iter().collect())
            }
            Err(TimestampError::TimeSourceFailure { reason, main }) => {
                let (main, chains) = match main {
                    Some(r) => (Some(r.result), r.chain.into_iter().collect()),
                    None => (None, Vec::new()),
                };
                (
                    Evidence::TimeSourceFailure {
                        diagnostic: reason,
                        main,
                    },
                    chains,
                )
            }
        }
    }

    fn flush_publications(&self, report: &mut TickReport) {
        let mut rt = self.runtime.lock();
        self.flush_locked(&mut rt, &mut report.errors);
    }

    /// Submits queued state transactions in order, stopping at the first failure.
    fn flush_locked(&self, rt: &mut Runtime, errors: &mut Vec<String>) {
        while let Some((service_id, state)) = rt.unpublished.front().copied() {
            let tx = LedgerTransaction::new(&self.config.owner, 0, Call::State { service_id, state });
            match self.ledger.submit(tx) {
                Ok(_) => {
                    rt.unpublished.pop_front();
                }
                Err(e) => {
                    tracing::warn!(service_id, vid = state.vid, error = %e, "state publication failed; will retry");
                    errors.push(e.to_string());
                    break;
                }
            }
        }
    }

    fn sync_ledger(&self, report: &mut TickReport) {
        let snap = self.ledger.snapshot();
        let cursor = self.runtime.lock().cursor;
        let events: Vec<_> = self
            .ledger
            .events_from(cursor)
            .into_iter()
            .filter(|e| e.height <= snap.height)
            .collect();
        let now = self.clock.now_ms();
        let mut rt = self.runtime.lock();
        for logged in events {
            match logged.event {
                Event::Requested { request_id, .. } => {
                    if !self.config.auto_accept
                        || rt.accept_sent.contains(&request_id)
                        || !snap.contract.pending.contains_key(&request_id)
                    {
                        continue;
                    }
                    let deposit = snap.contract.config.sla_deposit;
                    let tx = LedgerTransaction::new(&self.config.owner, deposit, Call::Accept { request_id });
                    match self.ledger.submit(tx) {
                        Ok(_) => {
                            rt.accept_sent.insert(request_id);
                            report.accepted.push(request_id);
                        }
                        Err(e) => report.errors.push(e.to_string()),
                    }
                }
                Event::Accepted { service_id, .. } => {
                    if let Some(agreement) = snap.contract.active_service(service_id) {
                        if !rt.services.contains_key(&service_id) {
                            self.register(&mut rt, agreement.clone(), now);
                            report.registered.push(service_id);
                        }
                    }
                }
                Event::QueryOpened { query_id, service_id, vids, .. } => {
                    let open = snap.contract.queries.get(&query_id).is_some_and(|q| q.open);
                    if !open || !self.config.answer_queries || rt.answered.contains(&query_id) {
                        continue;
                    }
                    if !rt.services.contains_key(&service_id) || self.api.faults().read().silent {
                        continue;
                    }
                    match self.answer_query(query_id, service_id, vids) {
                        Ok(()) => {
                            rt.answered.insert(query_id);
                            report.answered.push(query_id);
                        }
                        Err(e) => report.errors.push(e.to_string()),
                    }
                }
                Event::DepositClaimed { service_id, .. } | Event::ServiceExpired { service_id } => {
                    rt.services.remove(&service_id);
                    rt.scheduler.remove(service_id);
                }
                _ => {}
            }
        }
        rt.cursor = snap.height + 1;
    }

    fn register(&self, rt: &mut Runtime, agreement: ServiceAgreement, now_ms: u64) {
        let id = agreement.service_id;
        let mut policy = ClassifyPolicy::for_service(&agreement);
        let records = self.store.records(id);
        for r in &records {
            policy.observe(&r.evidence);
        }
        let next_vid = records.last().map_or(0, |r| r.vid + 1);
        let last_status = agreement.state.map(|s| s.status);
        rt.scheduler
            .add(id, agreement.validation_interval_secs.saturating_mul(1000), now_ms);
        rt.services.insert(
            id,
            ServiceRuntime {
                agreement,
                policy,
                next_vid,
                last_status,
            },
        );
    }

    fn answer_query(&self, query_id: QueryId, service_id: ServiceId, vids: VidRange) -> Result<(), LedgerError> {
        let bundle = self.api.bundle(service_id, vids);
        let payload = serde_json::to_vec(&bundle).expect("bundle serializes");
        let tx = LedgerTransaction::new(&self.config.owner, 0, Call::SlaResponse { query_id, payload });
        self.ledger.submit(tx).map(|_| ())
    }

    /// Ticks forever, sleeping `every` between ticks.
    pub async fn run(&self, every: Duration) {
        let mut interval = tokio::time::interval(every);
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            interval.tick().await;
            let report = self.tick().await;
            for c in &report.cycles {
                tracing::info!(service = c.service_id, vid = c.vid, status = %c.status, published = c.published, "validation");
            }
            for e in &report.errors {
                tracing::warn!(error = %e, "tick");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{sha256, Digest32, SigScheme};
    use crate::wire::RandomField;

    fn key(b: u8) -> KeyHash {
        KeyHash(sha256(&[b]))
    }

    fn signed(key: KeyHash, server_secs: u32, local_ms: u64) -> Evidence {
        let mut vr = ValidationResult::failed("d", [0; 32], local_ms, ProbeOutcome::Signed, String::new());
        vr.diagnostic = None;
        vr.server_random = RandomField {
            gmt_unix_time: server_secs,
            random_bytes: [0; 28],
        };
        vr.sig_scheme = SigScheme::RSA_PKCS1_SHA256;
        vr.chain_ref = Digest32([1; 32]);
        vr.observed_key_hash = Some(key);
        Evidence::Probe(vr)
    }

    fn policy(keys: &[KeyHash]) -> ClassifyPolicy {
        ClassifyPolicy {
            whitelist: keys.iter().copied().collect(),
            skew_tolerance_secs: 10,
            baseline: None,
        }
    }

    #[test]
    fn classify_rules() {
        let p = policy(&[key(1), key(2)]);
        assert_eq!(classify(&p, &signed(key(1), 1000, 1_000_000)), Status::Ok);
        assert_eq!(classify(&p, &signed(key(2), 1010, 1_000_000)), Status::Ok);
        assert_eq!(classify(&p, &signed(key(3), 1000, 1_000_000)), Status::NewKey(key(3)));
        assert_eq!(classify(&p, &signed(key(1), 1400, 1_000_000)), Status::Time);
        assert_eq!(classify(&p, &signed(key(1), 989, 1_000_000)), Status::Time);
        assert_eq!(classify(&p, &signed(key(3), 1400, 1_000_000)), Status::NewKey(key(3)));
        let refused = ValidationResult::failed("d", [0; 32], 0, ProbeOutcome::ConnectFailure, "x".into());
        assert_eq!(classify(&p, &Evidence::Probe(refused)), Status::Connect);
        let garbled = ValidationResult::failed("d", [0; 32], 0, ProbeOutcome::ProtocolFailure, "x".into());
        assert_eq!(classify(&p, &Evidence::Probe(garbled)), Status::Other);
        let no_source = Evidence::TimeSourceFailure {
            diagnostic: "down".into(),
            main: None,
        };
        assert_eq!(classify(&p, &no_source), Status::Time);
    }

    #[test]
    fn empty_whitelist_uses_first_key_as_baseline() {
        let mut p = policy(&[]);
        let first = signed(key(5), 1000, 1_000_000);
        assert_eq!(classify(&p, &first), Status::Ok);
        p.observe(&first);
        assert_eq!(p.baseline, Some(key(5)));
        assert_eq!(classify(&p, &signed(key(5), 1000, 1_000_000)), Status::Ok);
        assert_eq!(classify(&p, &signed(key(6), 1000, 1_000_000)), Status::NewKey(key(6)));
        p.observe(&signed(key(6), 1000, 1_000_000));
        assert_eq!(p.baseline, Some(key(5)));
    }

    #[test]
    fn scheduler_runs_at_exact_period() {
        let mut s = Scheduler::default();
        s.add(1, 1000, 0);
        s.add(2, 500, 250);
        assert_eq!(s.run_due(0), vec![1]);
        assert_eq!(s.run_due(250), vec![2]);
        assert_eq!(s.run_due(749), Vec::<u64>::new());
        assert_eq!(s.run_due(750), vec![2]);
        assert_eq!(s.run_due(1000), vec![1]);
        assert_eq!(s.next_due(), Some(1250));
        assert_eq!(s.run_due(10_000), vec![1, 2]);
        assert_eq!(s.next_due(), Some(10_500));
        assert_eq!(s.run_due(10_500), vec![2]);
    }
}
