//! The notary contract: service setup, validation-state publication and the
//! SLA query/response/claim path.
//!
//! The contract never sees wall-clock time. Every deadline is a block height.
//! Calls are atomic: an operation either returns `Ok` with its events and
//! payouts, or returns `Err` before touching any state.

use crate::crypto::KeyHash;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccountId(pub String);

impl AccountId {
    pub fn new(s: impl Into<String>) -> AccountId {
        AccountId(s.into())
    }
}

impl fmt::Display for AccountId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AccountId {
    fn from(s: &str) -> Self {
        AccountId(s.to_string())
    }
}

pub type RequestId = u64;
pub type ServiceId = u64;
pub type QueryId = u64;

/// Result of one validation as published on the ledger.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum Status {
    Ok,
    NewKey(KeyHash),
    Time,
    Connect,
    Other,
}

impl Status {
    /// Stable, re-parseable form: `OK`, `NewKey:<hex>`, `Time`, `Connect`, `Other`.
    pub fn compact(&self) -> String {
        match self {
            Status::Ok => "OK".into(),
            Status::NewKey(k) => format!("NewKey:{k}"),
            Status::Time => "Time".into(),
            Status::Connect => "Connect".into(),
            Status::Other => "Other".into(),
        }
    }

    /// Display form with abbreviated key hashes, e.g. `Err(NewKey a632…)`.
    pub fn human(&self) -> String {
        match self {
            Status::Ok => "OK".into(),
            Status::NewKey(k) => format!("Err(NewKey {})", k.short()),
            Status::Time => "Err(Time)".into(),
            Status::Connect => "Err(Connect)".into(),
            Status::Other => "Err(Other)".into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, Status::Ok)
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.human())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unrecognized status {0:?}")]
pub struct ParseStatusError(pub String);

impl FromStr for Status {
    type Err = ParseStatusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ParseStatusError(s.to_string());
        Ok(match s {
            "OK" => Status::Ok,
            "Time" => Status::Time,
            "Connect" => Status::Connect,
            "Other" => Status::Other,
            _ => {
                let hex = s.strip_prefix("NewKey:").ok_or_else(bad)?;
                Status::NewKey(hex.parse().map_err(|_| bad())?)
            }
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ValidationState {
    pub status: Status,
    pub vid: u64,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ServiceRequest {
    pub requester: AccountId,
    pub domain: String,
    pub whitelist: BTreeSet<KeyHash>,
    pub fee: u64,
    pub time_source: Option<String>,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ServiceAgreement {
    pub service_id: ServiceId,
    pub request_id: RequestId,
    pub requester: AccountId,
    pub domain: String,
    pub whitelist: BTreeSet<KeyHash>,
    pub fee: u64,
    pub time_source: Option<String>,
    pub state: Option<ValidationState>,
    pub sla_deposit: u64,
    pub sla_timeout_blocks: u64,
    pub validation_interval_secs: u64,
    pub skew_tolerance_secs: u64,
    pub created_at: u64,
    /// Height from which the service may end normally; `None` never expires.
    pub expires_at: Option<u64>,
    pub ended: Option<ServiceEnd>,
}

impl ServiceAgreement {
    pub fn is_active(&self) -> bool {
        self.ended.is_none()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum EndReason {
    Expired,
    Claimed(QueryId),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ServiceEnd {
    pub at: u64,
    pub reason: EndReason,
}

/// Inclusive range of validation ids.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct VidRange {
    pub from: u64,
    pub to: u64,
}

impl VidRange {
    pub fn single(vid: u64) -> VidRange {
        VidRange { from: vid, to: vid }
    }

    pub fn iter(&self) -> std::ops::RangeInclusive<u64> {
        self.from..=self.to
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: QueryId,
    pub service_id: ServiceId,
    pub vids: VidRange,
    pub asked_at: u64,
    pub open: bool,
    pub responses: Vec<QueryResponse>,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct QueryResponse {
    pub at: u64,
    pub timely: bool,
    #[serde(with = "crate::encoding::bytes")]
    pub payload: Vec<u8>,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ContractConfig {
    pub owner: AccountId,
    pub sla_deposit: u64,
    pub sla_timeout_blocks: u64,
    /// Fee units per block of service; zero means services never expire.
    pub price_per_block: u64,
    pub validation_interval_secs: u64,
    pub skew_tolerance_secs: u64,
}

impl ContractConfig {
    pub fn new(owner: impl Into<String>) -> ContractConfig {
        ContractConfig {
            owner: AccountId(owner.into()),
            sla_deposit: 1_000,
            sla_timeout_blocks: 10,
            price_per_block: 0,
            validation_interval_secs: 3_600,
            skew_tolerance_secs: 10,
        }
    }
}

/// A contract method and its arguments.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Call {
    Request {
        domain: String,
        whitelist: BTreeSet<KeyHash>,
        fee: u64,
        time_source: Option<String>,
    },
    Accept {
        request_id: RequestId,
    },
    Timeout {
        request_id: RequestId,
    },
    State {
        service_id: ServiceId,
        state: ValidationState,
    },
    SlaQuery {
        service_id: ServiceId,
        vids: VidRange,
    },
    SlaResponse {
        query_id: QueryId,
        #[serde(with = "crate::encoding::bytes")]
        payload: Vec<u8>,
    },
    SlaClaim {
        query_id: QueryId,
    },
}

impl Call {
    pub fn method(&self) -> &'static str {
        match self {
            Call::Request { .. } => "request",
            Call::Accept { .. } => "accept",
            Call::Timeout { .. } => "timeout",
            Call::State { .. } => "state",
            Call::SlaQuery { .. } => "sla_query",
            Call::SlaResponse { .. } => "sla_response",
            Call::SlaClaim { .. } => "sla_claim",
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Requested {
        request_id: RequestId,
        requester: AccountId,
        domain: String,
    },
    Accepted {
        request_id: RequestId,
        service_id: ServiceId,
    },
    TimedOut {
        request_id: RequestId,
    },
    StateChanged {
        service_id: ServiceId,
        state: ValidationState,
    },
    StateIgnored {
        service_id: ServiceId,
        state: ValidationState,
    },
    QueryOpened {
        query_id: QueryId,
        service_id: ServiceId,
        vids: VidRange,
        asked_at: u64,
    },
    QueryAnswered {
        query_id: QueryId,
        timely: bool,
    },
    DepositClaimed {
        query_id: QueryId,
        service_id: ServiceId,
        amount: u64,
    },
    ServiceExpired {
        service_id: ServiceId,
    },
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Abort {
    #[error("attached value {got}, expected {expected}")]
    WrongValue { expected: u64, got: u64 },
    #[error("fee must be positive")]
    ZeroFee,
    #[error("domain must not be empty")]
    EmptyDomain,
    #[error("sender is not the contract owner")]
    NotOwner,
    #[error("sender is not the requester")]
    NotRequester,
    #[error("unknown request {0}")]
    UnknownRequest(RequestId),
    #[error("unknown or inactive service {0}")]
    UnknownService(ServiceId),
    #[error("unknown query {0}")]
    UnknownQuery(QueryId),
    #[error("query {0} is closed")]
    QueryClosed(QueryId),
    #[error("claim at height {height} is too early; allowed after {deadline}")]
    TooEarly { height: u64, deadline: u64 },
    #[error("empty vid range")]
    EmptyRange,
    #[error("sender balance {balance} cannot cover {value}")]
    InsufficientBalance { balance: u64, value: u64 },
}

/// Effects of a successful call.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct Effects {
    pub events: Vec<Event>,
    pub payouts: Vec<(AccountId, u64)>,
}

impl Effects {
    fn event(e: Event) -> Effects {
        Effects {
            events: vec![e],
            payouts: Vec::new(),
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct PendingRequest {
    pub request_id: RequestId,
    pub request: ServiceRequest,
    pub submitted_at: u64,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ContractState {
    pub config: ContractConfig,
    /// Value held by the contract: pending fees and SLA deposits.
    pub escrow: u64,
    pub next_request_id: RequestId,
    pub next_service_id: ServiceId,
    pub next_query_id: QueryId,
    pub pending: BTreeMap<RequestId, PendingRequest>,
    pub services: BTreeMap<ServiceId, ServiceAgreement>,
    pub queries: BTreeMap<QueryId, QueryRecord>,
}

impl ContractState {
    pub fn new(config: ContractConfig) -> ContractState {
        ContractState {
            config,
            escrow: 0,
            next_request_id: 0,
            next_service_id: 0,
            next_query_id: 0,
            pending: BTreeMap::new(),
            services: BTreeMap::new(),
            queries: BTreeMap::new(),
        }
    }

    pub fn owner(&self) -> &AccountId {
        &self.config.owner
    }

    pub fn service(&self, id: ServiceId) -> Option<&ServiceAgreement> {
        self.services.get(&id)
    }

    pub fn active_service(&self, id: ServiceId) -> Option<&ServiceAgreement> {
        self.services.get(&id).filter(|s| s.is_active())
    }

    pub fn open_queries(&self, service_id: ServiceId) -> impl Iterator<Item = &QueryRecord> {
        self.queries
            .values()
            .filter(move |q| q.service_id == service_id && q.open)
    }

    /// Executes `call` at block `height`. `value` has already been moved from
    /// the sender into `escrow`; on `Err` the caller must move it back.
    pub fn execute(&mut self, sender: &AccountId, value: u64, call: &Call, height: u64) -> Result<Effects, Abort> {
        match call {
            Call::Request {
                domain,
                whitelist,
                fee,
                time_source,
            } => {
                if *fee == 0 {
                    return Err(Abort::ZeroFee);
                }
                if domain.is_empty() {
                    return Err(Abort::EmptyDomain);
                }
                expect_value(value, *fee)?;
                let request_id = self.next_request_id;
                self.next_request_id += 1;
                self.pending.insert(
                    request_id,
                    PendingRequest {
                        request_id,
                        request: ServiceRequest {
                            requester: sender.clone(),
                            domain: domain.clone(),
                            whitelist: whitelist.clone(),
                            fee: *fee,
                            time_source: time_source.clone(),
                        },
                        submitted_at: height,
                    },
                );
                Ok(Effects::event(Event::Requested {
                    request_id,
                    requester: sender.clone(),
                    domain: domain.clone(),
                }))
            }

            Call::Accept { request_id } => {
                if sender != self.owner() {
                    return Err(Abort::NotOwner);
                }
                if !self.pending.contains_key(request_id) {
                    return Err(Abort::UnknownRequest(*request_id));
                }
                expect_value(value, self.config.sla_deposit)?;
                let pending = self.pending.remove(request_id).expect("checked above");
                let req = pending.request;
                let service_id = self.next_service_id;
                self.next_service_id += 1;
                let expires_at = (self.config.price_per_block > 0)
                    .then(|| height.saturating_add(req.fee / self.config.price_per_block));
                // Fee goes to the notary now; the deposit stays in escrow.
                self.escrow -= req.fee;
                self.services.insert(
                    service_id,
                    ServiceAgreement {
                        service_id,
                        request_id: *request_id,
                        requester: req.requester,
                        domain: req.domain,
                        whitelist: req.whitelist,
                        fee: req.fee,
                        time_source: req.time_source,
                        state: None,
                        sla_deposit: self.config.sla_deposit,
                        sla_timeout_blocks: self.config.sla_timeout_blocks,
                        validation_interval_secs: self.config.validation_interval_secs,
                        skew_tolerance_secs: self.config.skew_tolerance_secs,
                        created_at: height,
                        expires_at,
                        ended: None,
                    },
                );
                Ok(Effects {
                    events: vec![Event::Accepted {
                        request_id: *request_id,
                        service_id,
                    }],
                    payouts: vec![(self.config.owner.clone(), req.fee)],
                })
            }

            Call::Timeout { request_id } => {
                let pending = self
                    .pending
                    .get(request_id)
                    .ok_or(Abort::UnknownRequest(*request_id))?;
                if &pending.request.requester != sender {
                    return Err(Abort::NotRequester);
                }
                expect_value(value, 0)?;
                let pending = self.pending.remove(request_id).expect("checked above");
                let fee = pending.request.fee;
                self.escrow -= fee;
                Ok(Effects {
                    events: vec![Event::TimedOut {
                        request_id: *request_id,
                    }],
                    payouts: vec![(pending.request.requester, fee)],
                })
            }

            Call::State { service_id, state } => {
                if sender != self.owner() {
                    return Err(Abort::NotOwner);
                }
                let service = self.active_service(*service_id).ok_or(Abort::UnknownService(*service_id))?;
                expect_value(value, 0)?;
                let accepted = match &service.state {
                    None => true,
                    Some(cur) => state.vid > cur.vid && state.status != cur.status,
                };
                let event = if accepted {
                    self.services.get_mut(service_id).expect("checked above").state = Some(*state);
                    Event::StateChanged {
                        service_id: *service_id,
                        state: *state,
                    }
                } else {
                    Event::StateIgnored {
                        service_id: *service_id,
                        state: *state,
                    }
                };
                Ok(Effects::event(event))
            }

            Call::SlaQuery { service_id, vids } => {
                let service = self.active_service(*service_id).ok_or(Abort::UnknownService(*service_id))?;
                if &service.requester != sender {
                    return Err(Abort::NotRequester);
                }
                if vids.from > vids.to {
                    return Err(Abort::EmptyRange);
                }
                expect_value(value, 0)?;
                let query_id = self.next_query_id;
                self.next_query_id += 1;
                self.queries.insert(
                    query_id,
                    QueryRecord {
                        query_id,
                        service_id: *service_id,
                        vids: *vids,
                        asked_at: height,
                        open: true,
                        responses: Vec::new(),
                    },
                );
                Ok(Effects::event(Event::QueryOpened {
                    query_id,
                    service_id: *service_id,
                    vids: *vids,
                    asked_at: height,
                }))
            }

            Call::SlaResponse { query_id, payload } => {
                if sender != self.owner() {
                    return Err(Abort::NotOwner);
                }
                let query = self.queries.get(query_id).ok_or(Abort::UnknownQuery(*query_id))?;
                expect_value(value, 0)?;
                let timeout = self.services[&query.service_id].sla_timeout_blocks;
                let timely = height - query.asked_at <= timeout;
                let query = self.queries.get_mut(query_id).expect("checked above");
                query.responses.push(QueryResponse {
                    at: height,
                    timely,
                    payload: payload.clone(),
                });
                if timely {
                    query.open = false;
                }
                Ok(Effects::event(Event::QueryAnswered {
                    query_id: *query_id,
                    timely,
                }))
            }

            Call::SlaClaim { query_id } => {
                let query = self.queries.get(query_id).ok_or(Abort::UnknownQuery(*query_id))?;
                let service = &self.services[&query.service_id];
                if &service.requester != sender {
                    return Err(Abort::NotRequester);
                }
                if !query.open || !service.is_active() {
                    return Err(Abort::QueryClosed(*query_id));
                }
                let deadline = query.asked_at + service.sla_timeout_blocks;
                if height <= deadline {
                    return Err(Abort::TooEarly { height, deadline });
                }
                expect_value(value, 0)?;
                let service_id = query.service_id;
                let amount = service.sla_deposit;
                let requester = service.requester.clone();
                self.escrow -= amount;
                self.queries.get_mut(query_id).expect("checked above").open = false;
                self.end_service(service_id, height, EndReason::Claimed(*query_id));
                Ok(Effects {
                    events: vec![Event::DepositClaimed {
                        query_id: *query_id,
                        service_id,
                        amount,
                    }],
                    payouts: vec![(requester, amount)],
                })
            }
        }
    }

    /// End-of-block housekeeping: services past their paid duration end and
    /// the deposit returns to the owner, unless a query is still open.
    pub fn on_block(&mut self, height: u64) -> Effects {
        let due: Vec<ServiceId> = self
            .services
            .values()
            .filter(|s| s.is_active() && s.expires_at.is_some_and(|e| e <= height))
            .map(|s| s.service_id)
            .filter(|id| self.open_queries(*id).next().is_none())
            .collect();
        let mut effects = Effects::default();
        for id in due {
            let deposit = self.services[&id].sla_deposit;
            self.escrow -= deposit;
            self.end_service(id, height, EndReason::Expired);
            effects.events.push(Event::ServiceExpired { service_id: id });
            effects.payouts.push((self.config.owner.clone(), deposit));
        }
        effects
    }

    fn end_service(&mut self, service_id: ServiceId, height: u64, reason: EndReason) {
        self.services.get_mut(&service_id).expect("service exists").ended = Some(ServiceEnd { at: height, reason });
        for q in self.queries.values_mut().filter(|q| q.service_id == service_id) {
            q.open = false;
        }
    }
}

fn expect_value(got: u64, expected: u64) -> Result<(), Abort> {
    if got == expected {
        Ok(())
    } else {
        Err(Abort::WrongValue { expected, got })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::sha256;

    fn key(b: u8) -> KeyHash {
        KeyHash(sha256(&[b]))
    }

    fn setup() -> (ContractState, ServiceId) {
        let mut c = ContractState::new(ContractConfig::new("notary"));
        let requester = AccountId::from("alice");
        c.escrow += 100;
        c.execute(
            &requester,
            100,
            &Call::Request {
                domain: "example.org".into(),
                whitelist: [key(1)].into(),
                fee: 100,
                time_source: None,
            },
            1,
        )
        .unwrap();
        c.escrow += 1_000;
        c.execute(&"notary".into(), 1_000, &Call::Accept { request_id: 0 }, 2).unwrap();
        (c, 0)
    }

    fn publish(c: &mut ContractState, status: Status, vid: u64) -> Event {
        let fx = c
            .execute(
                &"notary".into(),
                0,
                &Call::State {
                    service_id: 0,
                    state: ValidationState { status, vid },
                },
                3,
            )
            .unwrap();
        fx.events[0].clone()
    }

    #[test]
    fn state_updates_follow_delta_rule() {
        let (mut c, _) = setup();
        assert!(matches!(publish(&mut c, Status::Ok, 0), Event::StateChanged { .. }));
        assert!(matches!(publish(&mut c, Status::Ok, 15), Event::StateIgnored { .. }));
        assert!(matches!(publish(&mut c, Status::NewKey(key(9)), 31), Event::StateChanged { .. }));
        assert!(matches!(publish(&mut c, Status::NewKey(key(8)), 31), Event::StateIgnored { .. }));
        assert!(matches!(publish(&mut c, Status::NewKey(key(8)), 32), Event::StateChanged { .. }));
        assert!(matches!(publish(&mut c, Status::Ok, 30), Event::StateIgnored { .. }));
        assert_eq!(c.services[&0].state, Some(ValidationState { status: Status::NewKey(key(8)), vid: 32 }));
    }

    #[test]
    fn accept_pays_fee_to_owner_and_keeps_deposit() {
        let (c, _) = setup();
        assert_eq!(c.escrow, 1_000);
        assert!(c.pending.is_empty());
    }

    #[test]
    fn failed_call_leaves_state_untouched() {
        let (mut c, _) = setup();
        let before = c.clone();
        assert_eq!(
            c.execute(&"notary".into(), 0, &Call::Accept { request_id: 0 }, 5),
            Err(Abort::UnknownRequest(0))
        );
        assert_eq!(
            c.execute(&"notary".into(), 0, &Call::SlaClaim { query_id: 3 }, 5),
            Err(Abort::UnknownQuery(3))
        );
        assert_eq!(c, before);
    }

    #[test]
    fn expiry_waits_for_open_queries() {
        let mut cfg = ContractConfig::new("notary");
        cfg.price_per_block = 10;
        let mut c = ContractState::new(cfg);
        c.escrow += 50;
        let req = Call::Request {
            domain: "d".into(),
            whitelist: BTreeSet::new(),
            fee: 50,
            time_source: None,
        };
        c.execute(&"alice".into(), 50, &req, 0).unwrap();
        c.escrow += 1_000;
        c.execute(&"notary".into(), 1_000, &Call::Accept { request_id: 0 }, 0).unwrap();
        assert_eq!(c.services[&0].expires_at, Some(5));
        c.execute(
            &"alice".into(),
            0,
            &Call::SlaQuery {
                service_id: 0,
                vids: VidRange::single(0),
            },
            4,
        )
        .unwrap();
        assert!(c.on_block(5).events.is_empty());
        c.execute(&"notary".into(), 0, &Call::SlaResponse { query_id: 0, payload: vec![] }, 6)
            .unwrap();
        let fx = c.on_block(6);
        assert_eq!(fx.events, vec![Event::ServiceExpired { service_id: 0 }]);
        assert_eq!(fx.payouts, vec![(AccountId::from("notary"), 1_000)]);
        assert_eq!(c.escrow, 0);
    }

    #[test]
    fn status_text_forms_round_trip() {
        for s in [Status::Ok, Status::NewKey(key(3)), Status::Time, Status::Connect, Status::Other] {
            assert_eq!(s.compact().parse::<Status>().unwrap(), s);
        }
        assert_eq!(Status::NewKey(key(3)).human(), format!("Err(NewKey {})", key(3).short()));
        assert!("NewKey:zz".parse::<Status>().is_err());
    }
}
