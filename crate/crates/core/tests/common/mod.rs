#![allow(dead_code)]

use keynotary::auditor::{request_service, Timeline};
use keynotary::clock::{SharedClock, VirtualClock};
use keynotary::contract::{Call, ContractConfig, Event, ServiceId, Status};
use keynotary::crypto::{sha256, KeyHash, SigScheme};
use keynotary::ledger::{Genesis, Ledger, TxOutcome};
use keynotary::notary::store::EvidenceStore;
use keynotary::notary::{Notary, NotaryConfig, TickReport};
use keynotary::probe::{ProbeOutcome, ProbeReport, Prober, ValidationResult};
use keynotary::testbed::{ServerCore, ServerProfile, TestbedProber};
use keynotary::wire::{CertificateChain, RandomField};
use parking_lot::Mutex;
use std::collections::VecDeque;
use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

pub const OWNER: &str = "notary";
pub const REQUESTER: &str = "requester";
pub const STRANGER: &str = "mallory";
pub const FUNDS: u64 = 1_000_000_000;
pub const FEE: u64 = 500;
pub const START_MS: u64 = 1_700_000_000_000;

pub fn contract_config() -> ContractConfig {
    ContractConfig::new(OWNER)
}

pub struct World<P: Prober = TestbedProber> {
    pub clock: Arc<VirtualClock>,
    pub ledger: Arc<Ledger>,
    pub notary: Notary<P>,
    pub interval_ms: u64,
}

impl World<TestbedProber> {
    pub fn testbed() -> Self {
        World::with_prober(TestbedProber::new(), contract_config())
    }

    pub fn server(&self, domain: &str, profile: ServerProfile) -> Arc<ServerCore> {
        let core = ServerCore::new(profile, self.clock.clone() as SharedClock);
        self.notary.prober().register(domain, core.clone());
        core
    }
}

impl<P: Prober> World<P> {
    pub fn with_prober(prober: P, config: ContractConfig) -> Self {
        let clock = VirtualClock::new(START_MS);
        let interval_ms = config.validation_interval_secs * 1000;
        let genesis = Genesis::new(config)
            .with_account(OWNER, FUNDS)
            .with_account(REQUESTER, FUNDS)
            .with_account(STRANGER, FUNDS);
        let ledger = Arc::new(Ledger::new(genesis));
        let store = Arc::new(EvidenceStore::in_memory());
        let notary = Notary::new(
            ledger.clone(),
            prober,
            store,
            clock.clone() as SharedClock,
            NotaryConfig::new(OWNER),
        );
        World {
            clock,
            ledger,
            notary,
            interval_ms,
        }
    }

    /// Requests and gets a service accepted. No validation has run yet.
    pub async fn order(&self, domain: &str, whitelist: &[KeyHash], time_source: Option<&str>) -> ServiceId {
        let tx = request_service(
            &self.ledger,
            &REQUESTER.into(),
            domain,
            whitelist.iter().copied().collect(),
            FEE,
            time_source.map(str::to_string),
        )
        .unwrap();
        self.ledger.mine().unwrap();
        assert!(matches!(self.ledger.receipt(tx).unwrap().outcome, TxOutcome::Executed { .. }));
        let report = self.notary.tick().await;
        assert_eq!(report.accepted.len(), 1, "{report:?}");
        let block = self.ledger.mine().unwrap();
        block
            .receipts
            .iter()
            .flat_map(|r| r.events())
            .find_map(|e| match e {
                Event::Accepted { service_id, .. } => Some(*service_id),
                _ => None,
            })
            .expect("accept mined")
    }

    /// One notary tick, one block, one validation interval.
    pub async fn step(&self) -> TickReport {
        let report = self.notary.tick().await;
        self.ledger.mine().unwrap();
        self.clock.advance(self.interval_ms);
        report
    }

    pub async fn run(&self, validations: u64) {
        for _ in 0..validations {
            let r = self.step().await;
            assert!(r.errors.is_empty(), "{:?}", r.errors);
        }
    }

    pub fn timeline(&self, service_id: ServiceId) -> Timeline {
        Timeline::from_ledger(&self.ledger, service_id)
    }

    /// Number of `state` transactions for the service on the ledger.
    pub fn state_txs(&self, service_id: ServiceId) -> usize {
        self.ledger
            .blocks_from(0)
            .iter()
            .flat_map(|b| b.transactions.iter())
            .filter(|(_, tx)| matches!(&tx.call, Call::State { service_id: s, .. } if *s == service_id))
            .count()
    }
}

/// Answers probes from a queue of desired statuses with synthetic, unsigned
/// evidence shaped so classification yields exactly that status.
#[derive(Clone)]
pub struct ScriptedProber {
    pub script: Arc<Mutex<VecDeque<Status>>>,
    pub clock: SharedClock,
    pub good_key: KeyHash,
    pub chain: CertificateChain,
}

impl ScriptedProber {
    pub fn new(clock: SharedClock) -> ScriptedProber {
        ScriptedProber {
            script: Arc::default(),
            clock,
            good_key: key_hash(0),
            chain: CertificateChain::new(vec![b"scripted certificate".to_vec()]).unwrap(),
        }
    }

    pub fn push(&self, statuses: impl IntoIterator<Item = Status>) {
        self.script.lock().extend(statuses);
    }
}

pub fn key_hash(n: u8) -> KeyHash {
    KeyHash(sha256(&[b'k', n]))
}

impl Prober for ScriptedProber {
    fn probe(&self, domain: &str, client_random: [u8; 32], _deadline: Duration) -> impl Future<Output = ProbeReport> + Send {
        let status = self.script.lock().pop_front().unwrap_or(Status::Ok);
        let now = self.clock.now_ms();
        let failed = |outcome| ProbeReport {
            result: ValidationResult::failed(domain, client_random, now, outcome, "scripted".into()),
            chain: None,
            failure: None,
            finished_ms: now,
        };
        let signed = |key: KeyHash, ts: u64| ProbeReport {
            result: ValidationResult {
                vid: 0,
                domain: domain.to_string(),
                client_random,
                server_random: RandomField {
                    gmt_unix_time: ts as u32,
                    random_bytes: [7; 28],
                },
                dh_params: vec![1, 2, 3],
                sig_scheme: SigScheme::RSA_PKCS1_SHA256,
                signature: vec![0; 16],
                chain_ref: self.chain.chain_hash(),
                observed_key_hash: Some(key),
                notary_wall_clock_ms: now,
                outcome: ProbeOutcome::Signed,
                diagnostic: None,
            },
            chain: Some(self.chain.clone()),
            failure: None,
            finished_ms: now,
        };
        let report = match status {
            Status::Ok => signed(self.good_key, now / 1000),
            Status::NewKey(k) => signed(k, now / 1000),
            Status::Time => signed(self.good_key, now / 1000 + 3600),
            Status::Connect => failed(ProbeOutcome::ConnectFailure),
            Status::Other => failed(ProbeOutcome::ProtocolFailure),
        };
        std::future::ready(report)
    }
}

