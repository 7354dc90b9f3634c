mod common;

use common::*;
use keynotary::auditor::{audit_range, verify_record, Escalation, EscalationStep, Timeline, VerdictKind};
use keynotary::clock::{SharedClock, SystemClock, VirtualClock};
use keynotary::contract::{Abort, Call, ContractConfig, Event, ServiceId, Status, ValidationState, VidRange};
use keynotary::crypto::{Digest32, KeyHash, SigScheme};
use keynotary::ledger::{Genesis, Ledger, LedgerTransaction, TxId, TxOutcome};
use keynotary::notary::store::{AuditRecord, EvidenceStore};
use keynotary::notary::{Evidence, Faults, StoredValidation};
use keynotary::probe::{verify_evidence, ProbeConfig, ProbeOutcome, TlsProber, ValidationResult};
use keynotary::scan::{scan, Bucket, ScanConfig};
use keynotary::testbed::{credential, spawn, ServerProfile};
use keynotary::timesource::{timestamped_probe, verify_timestamped, TlsTimeSource};
use keynotary::wire::{CertificateChain, RandomField};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::panic::AssertUnwindSafe;
use std::sync::Arc;
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("timeline reproduction", Box::new(|| rt.block_on(timeline_reproduction()))),
        ("delta publication", Box::new(|| rt.block_on(delta_publication()))),
        ("evidence soundness", Box::new(|| rt.block_on(evidence_soundness()))),
        ("timestamp sandwich", Box::new(|| rt.block_on(timestamp_sandwich()))),
        ("SLA boundary exactness", Box::new(sla_boundary)),
        ("misbehavior detection", Box::new(|| rt.block_on(misbehavior_detection()))),
        ("storage dedup", Box::new(storage_dedup)),
        ("ledger determinism", Box::new(ledger_determinism)),
        ("scanner shape", Box::new(|| rt.block_on(scanner_shape()))),
        ("authorization matrix", Box::new(authorization_matrix)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(&p))));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.2}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.2}s): {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown".into())
}

async fn timeline_reproduction() -> Outcome {
    let started = Instant::now();
    let w = World::testbed();
    let good = credential("acc-good");
    let rogue = credential("acc-rogue");
    let server = w.server("example.org", ServerProfile::new(good.clone()).with_key(rogue.clone()));
    server.script_key_change(31, &rogue.id).map_err(|e| e.to_string())?;
    server.script_key_change(32, &good.id).map_err(|e| e.to_string())?;
    let id = w.order("example.org", &[good.key_hash], None).await;
    w.run(33).await;

    let expected = Timeline {
        entries: vec![(0, Status::Ok), (31, Status::NewKey(rogue.key_hash)), (32, Status::Ok)],
    };
    let got = w.timeline(id);
    let txs = w.state_txs(id);
    let elapsed = started.elapsed();
    ensure!(got == expected, "timeline {} != {}", got.human(), expected.human());
    ensure!(txs == 3, "{txs} state transactions");
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{} in {} state txs", got.human(), txs))
}

fn changes(seq: &[Status]) -> Vec<(u64, Status)> {
    seq.iter()
        .enumerate()
        .filter(|(i, s)| *i == 0 || seq[i - 1] != **s)
        .map(|(i, s)| (i as u64, *s))
        .collect()
}

async fn delta_publication() -> Outcome {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(2);
    let pool = [
        Status::Ok,
        Status::NewKey(key_hash(1)),
        Status::NewKey(key_hash(2)),
        Status::Time,
        Status::Connect,
        Status::Other,
    ];
    let mut total_changes = 0;
    for run in 0..1000 {
        let len = rng.gen_range(1..=500);
        let mut seq = vec![pool[rng.gen_range(0..pool.len())]];
        while seq.len() < len {
            let s = if rng.gen_bool(0.7) {
                *seq.last().unwrap()
            } else {
                pool[rng.gen_range(0..pool.len())]
            };
            seq.push(s);
        }
        let prober = ScriptedProber::new(VirtualClock::new(START_MS) as SharedClock);
        prober.push(seq.iter().copied());
        let good = prober.good_key;
        let w = World::with_prober(prober, contract_config());
        let id = w.order("scripted.example", &[good], None).await;
        w.step().await;
        for _ in 1..len {
            w.notary.run_validation_cycle(id).await.map_err(|e| e.to_string())?;
        }
        w.ledger.mine().unwrap();

        let expected = changes(&seq);
        let txs = w.state_txs(id);
        ensure!(txs == expected.len(), "run {run}: {txs} transactions for {} changes", expected.len());
        let tl = w.timeline(id);
        ensure!(tl.entries == expected, "run {run}: timeline {} differs", tl.compact());
        total_changes += expected.len();
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("1000 sequences, {total_changes} changes, transactions matched every time"))
}

/// Verifies signed evidence with the RSA primitives directly.
fn oracle_verify(vr: &ValidationResult, chains: &[CertificateChain]) -> bool {
    use rsa::pkcs1v15::{Signature, VerifyingKey};
    use rsa::pkcs8::DecodePublicKey;
    use rsa::signature::Verifier;
    use x509_cert::der::{Decode, Encode};

    if vr.sig_scheme != SigScheme::RSA_PKCS1_SHA256 {
        return false;
    }
    let Some(chain) = chains
        .iter()
        .find(|c| Sha256::digest(c.certificates().concat()).as_slice() == vr.chain_ref.as_bytes())
    else {
        return false;
    };
    let Ok(cert) = x509_cert::Certificate::from_der(chain.leaf()) else {
        return false;
    };
    let Ok(spki) = cert.tbs_certificate.subject_public_key_info.to_der() else {
        return false;
    };
    let Ok(key) = rsa::RsaPublicKey::from_public_key_der(&spki) else {
        return false;
    };
    let mut msg = vr.client_random.to_vec();
    msg.extend_from_slice(&vr.server_random.gmt_unix_time.to_be_bytes());
    msg.extend_from_slice(&vr.server_random.random_bytes);
    msg.extend_from_slice(&vr.dh_params);
    let Ok(sig) = Signature::try_from(vr.signature.as_slice()) else {
        return false;
    };
    VerifyingKey::<Sha256>::new(key).verify(&msg, &sig).is_ok()
}

fn flip_bit(bytes: &mut [u8], rng: &mut StdRng) {
    let bit = rng.gen_range(0..bytes.len() * 8);
    bytes[bit / 8] ^= 1 << (bit % 8);
}

const MUTATED_FIELDS: [&str; 5] = ["signature", "client_random", "server_random", "dh_params", "chain"];

fn mutate(record: &mut AuditRecord, field: usize, rng: &mut StdRng) {
    if field == 4 {
        let i = rng.gen_range(0..record.chains.len());
        let mut certs = record.chains[i].certificates().to_vec();
        let c = rng.gen_range(0..certs.len());
        flip_bit(&mut certs[c], rng);
        record.chains[i] = CertificateChain::new(certs).unwrap();
        return;
    }
    let vr = match &mut record.record.evidence {
        Evidence::Probe(vr) => vr,
        Evidence::Timestamped(tv) => match rng.gen_range(0..3) {
            0 => &mut tv.token_before.evidence,
            1 => &mut tv.main,
            _ => &mut tv.token_after.evidence,
        },
        Evidence::TimeSourceFailure { .. } => unreachable!("honest runs only hold signed evidence"),
    };
    match field {
        0 => flip_bit(&mut vr.signature, rng),
        1 => flip_bit(&mut vr.client_random, rng),
        2 => {
            let mut b = vr.server_random.to_bytes();
            flip_bit(&mut b, rng);
            vr.server_random = RandomField::from_bytes(&b);
        }
        _ => flip_bit(&mut vr.dh_params, rng),
    }
}

async fn evidence_soundness() -> Outcome {
    let w = World::testbed();
    let good = credential("acc-good");
    let alt = credential("acc-alt");
    let rogue = credential("acc-rogue");
    let server = w.server(
        "bank.example",
        ServerProfile::new(good.clone()).with_key(alt.clone()).with_key(rogue.clone()),
    );
    server.script_key_change(10, &alt.id).unwrap();
    server.script_key_change(20, &rogue.id).unwrap();
    server.script_key_change(22, &good.id).unwrap();
    w.server("ts.example", ServerProfile::new(credential("acc-ts")));
    w.server("shop.example", ServerProfile::new(good.clone()).with_skew(-250));

    let plain = w.order("bank.example", &[good.key_hash, alt.key_hash], None).await;
    let stamped = w.order("shop.example", &[good.key_hash], Some("ts.example")).await;
    w.run(40).await;

    let api = w.notary.api();
    let mut records = api.bundle(plain, VidRange { from: 0, to: 39 }).validations;
    records.extend(api.bundle(stamped, VidRange { from: 0, to: 39 }).validations);
    ensure!(records.len() == 80, "{} records stored", records.len());

    for r in &records {
        ensure!(verify_record(r), "honest record vid {} failed verification", r.record.vid);
        let signed: Vec<&ValidationResult> = match &r.record.evidence {
            Evidence::Probe(vr) => {
                ensure!(verify_evidence(vr, &r.chains[0]) == Ok(true), "verify_evidence rejected vid {}", vr.vid);
                vec![vr]
            }
            Evidence::Timestamped(tv) => {
                ensure!(verify_timestamped(tv, &r.chains) == Ok(true), "verify_timestamped rejected vid {}", r.record.vid);
                vec![&tv.token_before.evidence, &tv.main, &tv.token_after.evidence]
            }
            Evidence::TimeSourceFailure { diagnostic, .. } => return Err(format!("time source failed: {diagnostic}")),
        };
        for vr in signed {
            ensure!(oracle_verify(vr, &r.chains), "independent check rejected vid {}", r.record.vid);
        }
    }

    let mut rng = StdRng::seed_from_u64(3);
    let trials = 1500;
    for t in 0..trials {
        let field = t % MUTATED_FIELDS.len();
        let mut m = records[rng.gen_range(0..records.len())].clone();
        mutate(&mut m, field, &mut rng);
        ensure!(!verify_record(&m), "mutation of {} accepted (trial {t})", MUTATED_FIELDS[field]);
    }
    Ok(format!(
        "{} honest records verified two ways; {trials}/{trials} one-bit mutations rejected",
        records.len()
    ))
}

async fn timestamp_sandwich() -> Outcome {
    let clock: SharedClock = Arc::new(SystemClock);
    let ts = spawn(ServerProfile::new(credential("acc-ts")), clock.clone()).await.map_err(|e| e.to_string())?;
    let skews = [-400, -90, -3, 0, 2, 45, 300, 1000];
    let mut targets = Vec::new();
    for (i, s) in skews.iter().enumerate() {
        let profile = ServerProfile::new(credential(&format!("acc-target-{i}"))).with_skew(*s);
        targets.push(spawn(profile, clock.clone()).await.map_err(|e| e.to_string())?);
    }
    let prober = TlsProber::new(ProbeConfig::default(), clock.clone());
    let source = TlsTimeSource::new(&prober, ts.domain());
    let deadline = Duration::from_secs(10);
    let mut max_width = 0;
    for i in 0..200 {
        let target = &targets[i % targets.len()];
        let tp = timestamped_probe(&prober, &target.domain(), &source, deadline)
            .await
            .map_err(|e| format!("probe {i}: {e}"))?;
        let tv = &tp.bundle;
        let handshake = target
            .handshakes()
            .into_iter()
            .find(|h| h.client_random == tv.main.client_random)
            .ok_or("main handshake not recorded")?;
        let instant = handshake.true_time_ms / 1000;
        let (t1, t2) = (tv.bounds.0 as u64, tv.bounds.1 as u64);
        ensure!(t1 <= instant && instant <= t2, "probe {i}: {instant} outside [{t1}, {t2}]");
        ensure!((tv.width_secs() as u64) < deadline.as_secs(), "probe {i}: width {}", tv.width_secs());
        ensure!(verify_timestamped(tv, &tp.chains) == Ok(true), "probe {i}: bundle does not verify");
        max_width = max_width.max(tv.width_secs());
    }
    Ok(format!("200/200 sandwiches hold; max width {max_width} s < {} s deadline", deadline.as_secs()))
}

struct SlaWorld {
    ledger: Ledger,
    service_id: ServiceId,
    query_id: u64,
    asked_at: u64,
    timeout: u64,
    deposit: u64,
}

fn sla_world() -> SlaWorld {
    let config = contract_config();
    let (timeout, deposit) = (config.sla_timeout_blocks, config.sla_deposit);
    let ledger = Ledger::new(
        Genesis::new(config)
            .with_account(OWNER, FUNDS)
            .with_account(REQUESTER, FUNDS),
    );
    let executed = |tx: TxId, l: &Ledger| l.receipt(tx).unwrap().events().to_vec();
    let req = ledger
        .submit(LedgerTransaction::new(
            REQUESTER,
            FEE,
            Call::Request {
                domain: "sla.example".into(),
                whitelist: BTreeSet::new(),
                fee: FEE,
                time_source: None,
            },
        ))
        .unwrap();
    ledger.mine().unwrap();
    let Event::Requested { request_id, .. } = executed(req, &ledger)[0] else {
        panic!("request failed")
    };
    let acc = ledger
        .submit(LedgerTransaction::new(OWNER, deposit, Call::Accept { request_id }))
        .unwrap();
    ledger.mine().unwrap();
    let Event::Accepted { service_id, .. } = executed(acc, &ledger)[0] else {
        panic!("accept failed")
    };
    let q = ledger
        .submit(LedgerTransaction::new(
            REQUESTER,
            0,
            Call::SlaQuery {
                service_id,
                vids: VidRange::single(0),
            },
        ))
        .unwrap();
    ledger.mine().unwrap();
    let Event::QueryOpened { query_id, asked_at, .. } = executed(q, &ledger)[0] else {
        panic!("query failed")
    };
    SlaWorld {
        ledger,
        service_id,
        query_id,
        asked_at,
        timeout,
        deposit,
    }
}

/// What the claim should do for response offset `r` and claim offset `c`,
/// with the response ordered first when both land in one block.
fn expected_claim(r: i64, c: i64) -> Result<(), &'static str> {
    if r <= 0 && r <= c {
        Err("closed")
    } else if c <= 0 {
        Err("early")
    } else {
        Ok(())
    }
}

fn sla_boundary() -> Outcome {
    let offsets = [-2i64, -1, 0, 1, 2];
    for r in offsets {
        for c in offsets {
            let w = sla_world();
            let supply = w.ledger.snapshot().total_supply();
            let base = (w.asked_at + w.timeout) as i64;
            let (mut resp_tx, mut claim_tx) = (None, None);
            while w.ledger.height() < (base + 3) as u64 {
                let next = w.ledger.height() as i64 + 1;
                if next == base + r {
                    resp_tx = Some(
                        w.ledger
                            .submit(LedgerTransaction::new(
                                OWNER,
                                0,
                                Call::SlaResponse {
                                    query_id: w.query_id,
                                    payload: b"{}".to_vec(),
                                },
                            ))
                            .unwrap(),
                    );
                }
                if next == base + c {
                    claim_tx = Some(
                        w.ledger
                            .submit(LedgerTransaction::new(REQUESTER, 0, Call::SlaClaim { query_id: w.query_id }))
                            .unwrap(),
                    );
                }
                w.ledger.mine().unwrap();
                ensure!(
                    w.ledger.snapshot().total_supply() == supply,
                    "r={r} c={c}: supply changed at height {next}"
                );
            }
            let resp = w.ledger.receipt(resp_tx.unwrap()).unwrap();
            let claim = w.ledger.receipt(claim_tx.unwrap()).unwrap();
            let snap = w.ledger.snapshot();
            let q = &snap.contract.queries[&w.query_id];

            let timely = resp
                .events()
                .iter()
                .find_map(|e| match e {
                    Event::QueryAnswered { timely, .. } => Some(*timely),
                    _ => None,
                })
                .ok_or(format!("r={r} c={c}: response aborted: {:?}", resp.abort()))?;
            ensure!(timely == (r <= 0), "r={r} c={c}: timely={timely}");
            if r == 0 && c >= 0 {
                ensure!(!q.open, "r=0: query still open");
            }
            match (expected_claim(r, c), claim.abort()) {
                (Ok(()), None) => {}
                (Err("closed"), Some(Abort::QueryClosed(_))) => {}
                (Err("early"), Some(Abort::TooEarly { .. })) => {}
                (want, got) => return Err(format!("r={r} c={c}: claim expected {want:?}, got {got:?}")),
            }

            let claimed = expected_claim(r, c).is_ok();
            let requester = snap.balance(&REQUESTER.into());
            let owner = snap.balance(&OWNER.into());
            let (want_req, want_owner, want_escrow) = if claimed {
                (FUNDS - FEE + w.deposit, FUNDS + FEE - w.deposit, 0)
            } else {
                (FUNDS - FEE, FUNDS + FEE - w.deposit, w.deposit)
            };
            ensure!(
                requester == want_req && owner == want_owner && snap.contract.escrow == want_escrow,
                "r={r} c={c}: balances requester {requester} owner {owner} escrow {}",
                snap.contract.escrow
            );
            ensure!(
                claimed == snap.contract.services[&w.service_id].ended.is_some(),
                "r={r} c={c}: service end mismatch"
            );
        }
    }
    Ok("25/25 interleavings match the model; deposit conserved in every block".into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scenario {
    Honest,
    HiddenNewKey,
    Fabricated,
    Censored,
    Silent,
}

impl Scenario {
    fn expected(self) -> VerdictKind {
        match self {
            Scenario::Honest => VerdictKind::Consistent,
            Scenario::HiddenNewKey => VerdictKind::EvidenceContradictsState,
            Scenario::Fabricated | Scenario::Censored => VerdictKind::EvidenceMissing,
            Scenario::Silent => VerdictKind::SlaBreach,
        }
    }
}

async fn escalate(w: &World, id: ServiceId, vids: VidRange) -> Result<VerdictKind, String> {
    let mut esc = Escalation::new(id, vids, REQUESTER.into());
    for _ in 0..100 {
        match esc.poll(&w.ledger).map_err(|e| e.to_string())? {
            EscalationStep::Done(v) => return Ok(v.kind()),
            EscalationStep::Waiting | EscalationStep::ClaimSubmitted(_) => {
                w.notary.tick().await;
                w.ledger.mine().unwrap();
            }
        }
    }
    Err("escalation did not finish".into())
}

async fn run_scenario(kind: Scenario, seed: u64) -> Result<VerdictKind, String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let w = World::testbed();
    let good = credential("acc-good");
    let alt = credential("acc-alt");
    let rogue = credential("acc-rogue");
    let mut profile = ServerProfile::new(good.clone()).with_key(alt.clone()).with_key(rogue.clone());
    let n: u64 = rng.gen_range(8..=16);
    let v = rng.gen_range(1..n - 1);
    let whitelist = if kind == Scenario::Honest && rng.gen_bool(0.3) {
        vec![]
    } else {
        vec![good.key_hash, alt.key_hash]
    };
    let mut faults = Faults::default();
    match kind {
        Scenario::Honest => match rng.gen_range(0..4) {
            0 => profile.key_schedule = vec![(v, rogue.id.clone()), (v + 1, good.id.clone())],
            1 if !whitelist.is_empty() => profile.key_schedule = vec![(v, alt.id.clone())],
            2 => {
                let at = START_MS + v * w.interval_ms;
                profile.outages = vec![at..at + 1];
            }
            _ => {}
        },
        Scenario::HiddenNewKey => {
            profile.key_schedule = vec![(v, rogue.id.clone()), (v + 1, good.id.clone())];
            faults.suppress.insert(v);
        }
        Scenario::Fabricated => {
            let fake = [Status::Time, Status::Connect, Status::NewKey(rogue.key_hash)][rng.gen_range(0..3)];
            faults.fabricate.insert(v, fake);
        }
        Scenario::Censored => {
            faults.censor.insert(v);
            for vid in 0..n {
                if rng.gen_bool(0.2) {
                    faults.censor.insert(vid);
                }
            }
        }
        Scenario::Silent => faults.silent = true,
    }
    w.server("site.example", profile);
    let id = w.order("site.example", &whitelist, None).await;
    w.notary.set_faults(faults);
    w.run(n).await;

    let vids = VidRange { from: 0, to: n - 1 };
    if seed % 2 == 1 && kind != Scenario::Silent {
        return escalate(&w, id, vids).await;
    }
    match audit_range(&w.ledger, &w.notary.api(), id, vids).await {
        Ok(report) => Ok(report.verdict.kind()),
        Err(e) if e.is_unreachable() => escalate(&w, id, vids).await,
        Err(e) => Err(e.to_string()),
    }
}

async fn misbehavior_detection() -> Outcome {
    let kinds = [
        Scenario::Honest,
        Scenario::HiddenNewKey,
        Scenario::Fabricated,
        Scenario::Censored,
        Scenario::Silent,
    ];
    let mut summary = Vec::new();
    for kind in kinds {
        let mut correct = 0;
        for i in 0..50 {
            let seed = 1000 * (kind as u64 + 1) + i;
            let got = run_scenario(kind, seed).await.map_err(|e| format!("{kind:?} seed {seed}: {e}"))?;
            ensure!(got == kind.expected(), "{kind:?} seed {seed}: got {got:?}");
            correct += 1;
        }
        summary.push(format!("{kind:?} {correct}/50"));
    }
    Ok(summary.join(", "))
}

fn cbor_len<T: serde::Serialize>(v: &T) -> u64 {
    let mut out = Vec::new();
    ciborium::into_writer(v, &mut out).unwrap();
    out.len() as u64
}

const YEAR: u64 = 8760;
const CHAIN_BYTES: usize = 3976;
const NAIVE_TARGET: u64 = 4483;
const DEDUP_MB: f64 = 4.44;

/// Three certificates whose stored encoding is exactly `CHAIN_BYTES`.
fn synthetic_chain() -> CertificateChain {
    let build = |last: usize| {
        let mut rng = StdRng::seed_from_u64(7);
        let sizes = [1480, 1320, last];
        CertificateChain::new(sizes.iter().map(|&n| (0..n).map(|_| rng.gen()).collect()).collect()).unwrap()
    };
    (1..CHAIN_BYTES - 1480 - 1320)
        .rev()
        .map(build)
        .find(|c| cbor_len(c) == CHAIN_BYTES as u64)
        .expect("a chain of the target size")
}

fn synthetic_record(vid: u64, chain: &CertificateChain, dh_len: usize) -> StoredValidation {
    let vr = ValidationResult {
        vid,
        domain: "example.org".into(),
        client_random: [vid as u8; 32],
        server_random: RandomField {
            gmt_unix_time: 1_700_000_000 + vid as u32 * 3600,
            random_bytes: [9; 28],
        },
        dh_params: vec![0xd5; dh_len],
        sig_scheme: SigScheme::RSA_PKCS1_SHA256,
        signature: vec![0x5a; 64],
        chain_ref: chain.chain_hash(),
        observed_key_hash: Some(KeyHash(Digest32([3; 32]))),
        notary_wall_clock_ms: 1_700_000_000_000 + vid * 3_600_000,
        outcome: ProbeOutcome::Signed,
        diagnostic: None,
    };
    StoredValidation {
        service_id: 0,
        vid,
        status: Status::Ok,
        evidence: Evidence::Probe(vr),
    }
}

fn storage_dedup() -> Outcome {
    let started = Instant::now();
    let chain = synthetic_chain();
    ensure!(cbor_len(&chain) == CHAIN_BYTES as u64, "chain size {}", cbor_len(&chain));

    // Pad the key exchange so one naive validation is as close to the target as CBOR allows.
    let naive_of = |dh: usize| 4 + cbor_len(&synthetic_record(YEAR - 1, &chain, dh)) + cbor_len(&chain);
    let dh_len = (0..NAIVE_TARGET as usize)
        .min_by_key(|&d| naive_of(d).abs_diff(NAIVE_TARGET))
        .unwrap();

    let store = EvidenceStore::in_memory();
    let (mut oracle_naive, mut oracle_records) = (0u64, 0u64);
    for vid in 0..YEAR {
        let rec = synthetic_record(vid, &chain, dh_len);
        let framed = 4 + cbor_len(&rec);
        oracle_records += framed;
        oracle_naive += framed + cbor_len(&chain);
        store.append(rec, std::slice::from_ref(&chain)).map_err(|e| e.to_string())?;
    }
    let oracle_dedup = oracle_records + 4 + cbor_len(&chain);
    let report = store.storage_report(0);
    ensure!(report.validations == YEAR, "{} validations", report.validations);
    ensure!(
        report.bytes_naive == oracle_naive && report.bytes_dedup == oracle_dedup,
        "store reports {}/{}, recomputed {oracle_naive}/{oracle_dedup}",
        report.bytes_naive,
        report.bytes_dedup
    );
    let per_validation = report.bytes_naive as f64 / YEAR as f64;
    ensure!((per_validation - NAIVE_TARGET as f64).abs() < 8.0, "naive per validation {per_validation:.1} B");
    let dedup_mb = report.bytes_dedup as f64 / 1e6;
    ensure!((dedup_mb - DEDUP_MB).abs() < 0.01, "dedup {dedup_mb:.3} MB");
    let ratio = report.ratio();
    ensure!(ratio >= 8.0, "ratio {ratio:.2}");
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!(
        "naive {:.2} MB ({per_validation:.0} B/validation, {dh_len} B key exchange), dedup {dedup_mb:.3} MB, ratio {ratio:.2}",
        report.bytes_naive as f64 / 1e6
    ))
}

const ROLES: [&str; 3] = [OWNER, REQUESTER, STRANGER];

fn random_call(rng: &mut StdRng, snap: &keynotary::ledger::Snapshot) -> (u64, Call) {
    let pick = |rng: &mut StdRng, ids: Vec<u64>| {
        if ids.is_empty() || rng.gen_bool(0.1) {
            rng.gen_range(0..5)
        } else {
            ids[rng.gen_range(0..ids.len())]
        }
    };
    let deposit = snap.contract.config.sla_deposit;
    match rng.gen_range(0..7) {
        0 => {
            let fee = [0, FEE, 7][rng.gen_range(0..3)];
            let value = if rng.gen_bool(0.9) { fee } else { fee + 1 };
            (
                value,
                Call::Request {
                    domain: ["a.example", "b.example", ""][rng.gen_range(0..3)].into(),
                    whitelist: BTreeSet::new(),
                    fee,
                    time_source: None,
                },
            )
        }
        1 => (deposit, Call::Accept { request_id: pick(rng, snap.contract.pending.keys().copied().collect()) }),
        2 => (0, Call::Timeout { request_id: pick(rng, snap.contract.pending.keys().copied().collect()) }),
        3 => {
            let service_id = pick(rng, snap.contract.services.keys().copied().collect());
            let status = [Status::Ok, Status::Time, Status::Connect][rng.gen_range(0..3)];
            (
                0,
                Call::State {
                    service_id,
                    state: ValidationState {
                        status,
                        vid: rng.gen_range(0..20),
                    },
                },
            )
        }
        4 => {
            let service_id = pick(rng, snap.contract.services.keys().copied().collect());
            let from = rng.gen_range(0..10);
            (
                0,
                Call::SlaQuery {
                    service_id,
                    vids: VidRange {
                        from,
                        to: from + rng.gen_range(0..5),
                    },
                },
            )
        }
        5 => (
            0,
            Call::SlaResponse {
                query_id: pick(rng, snap.contract.queries.keys().copied().collect()),
                payload: vec![rng.gen(); rng.gen_range(0..8)],
            },
        ),
        _ => (0, Call::SlaClaim { query_id: pick(rng, snap.contract.queries.keys().copied().collect()) }),
    }
}

fn ledger_determinism() -> Outcome {
    let mut rng = StdRng::seed_from_u64(8);
    let mut txs = 0;
    for session in 0..100 {
        let mut config = ContractConfig::new(OWNER);
        config.sla_timeout_blocks = rng.gen_range(1..5);
        config.price_per_block = [0, 50, 100][rng.gen_range(0..3)];
        let ledger = Ledger::new(
            Genesis::new(config)
                .with_account(OWNER, FUNDS)
                .with_account(REQUESTER, FUNDS)
                .with_account(STRANGER, FUNDS),
        );
        for _ in 0..rng.gen_range(20..120) {
            if rng.gen_bool(0.3) {
                ledger.mine().unwrap();
                continue;
            }
            let snap = ledger.snapshot();
            let (value, call) = random_call(&mut rng, &snap);
            let sender = ROLES[rng.gen_range(0..3)];
            ledger.submit(LedgerTransaction::new(sender, value, call)).unwrap();
            txs += 1;
        }
        ledger.mine().unwrap();
        let replayed = Ledger::replay(&ledger.log()).map_err(|e| e.to_string())?;
        ensure!(
            replayed.snapshot().to_bytes() == ledger.snapshot().to_bytes(),
            "session {session}: replayed snapshot differs"
        );
        for h in 0..=ledger.height() {
            ensure!(replayed.block(h) == ledger.block(h), "session {session}: block {h} differs");
        }
    }
    Ok(format!("100/100 sessions ({txs} transactions) replay byte-identically"))
}

async fn scanner_shape() -> Outcome {
    let clock: SharedClock = Arc::new(SystemClock);
    let mut servers = Vec::new();
    for (i, skew) in [0, 3, 30, 120, 400].into_iter().enumerate() {
        let profile = ServerProfile::new(credential(&format!("acc-scan-{i}"))).with_skew(skew);
        servers.push(spawn(profile, clock.clone()).await.map_err(|e| e.to_string())?);
    }
    let domains: Vec<String> = servers.iter().map(|s| s.domain()).collect();
    let prober = TlsProber::new(ProbeConfig::default(), clock);
    let report = scan(&prober, &domains, &ScanConfig::default()).await;
    let counts: Vec<usize> = Bucket::ALL.iter().map(|b| report.count(*b)).collect();
    ensure!(counts == vec![1; 5], "bucket counts {counts:?}");
    Ok(Bucket::ALL
        .iter()
        .map(|b| format!("{}: {}", b.label(), report.count(*b)))
        .collect::<Vec<_>>()
        .join(", "))
}

/// A ledger with one pending request, one active service and one open query.
fn authz_world() -> (Ledger, u64, ServiceId, u64) {
    let ledger = Ledger::new(
        Genesis::new(contract_config())
            .with_account(OWNER, FUNDS)
            .with_account(REQUESTER, FUNDS)
            .with_account(STRANGER, FUNDS),
    );
    let request = |l: &Ledger| {
        l.submit(LedgerTransaction::new(
            REQUESTER,
            FEE,
            Call::Request {
                domain: "authz.example".into(),
                whitelist: BTreeSet::new(),
                fee: FEE,
                time_source: None,
            },
        ))
        .unwrap()
    };
    request(&ledger);
    request(&ledger);
    ledger.mine().unwrap();
    ledger
        .submit(LedgerTransaction::new(OWNER, contract_config().sla_deposit, Call::Accept { request_id: 0 }))
        .unwrap();
    ledger.mine().unwrap();
    ledger
        .submit(LedgerTransaction::new(
            REQUESTER,
            0,
            Call::SlaQuery {
                service_id: 0,
                vids: VidRange::single(0),
            },
        ))
        .unwrap();
    ledger.mine().unwrap();
    ledger.mine_n(contract_config().sla_timeout_blocks + 1).unwrap();
    (ledger, 1, 0, 0)
}

fn authorization_matrix() -> Outcome {
    let (_, request_id, service_id, query_id) = authz_world();
    let ops: Vec<(&str, u64, Call, &[&str])> = vec![
        (
            "request",
            FEE,
            Call::Request {
                domain: "x.example".into(),
                whitelist: BTreeSet::new(),
                fee: FEE,
                time_source: None,
            },
            &[OWNER, REQUESTER, STRANGER],
        ),
        ("accept", contract_config().sla_deposit, Call::Accept { request_id }, &[OWNER]),
        ("timeout", 0, Call::Timeout { request_id }, &[REQUESTER]),
        (
            "state",
            0,
            Call::State {
                service_id,
                state: ValidationState {
                    status: Status::Ok,
                    vid: 0,
                },
            },
            &[OWNER],
        ),
        (
            "sla_query",
            0,
            Call::SlaQuery {
                service_id,
                vids: VidRange::single(1),
            },
            &[REQUESTER],
        ),
        (
            "sla_response",
            0,
            Call::SlaResponse {
                query_id,
                payload: vec![1],
            },
            &[OWNER],
        ),
        ("sla_claim", 0, Call::SlaClaim { query_id }, &[REQUESTER]),
    ];
    let (mut denied, mut allowed) = (0, 0);
    for (name, value, call, permitted) in &ops {
        for role in ROLES {
            let (ledger, ..) = authz_world();
            let before = ledger.snapshot();
            let tx = ledger.submit(LedgerTransaction::new(role, *value, call.clone())).unwrap();
            ledger.mine().unwrap();
            let after = ledger.snapshot();
            let receipt = ledger.receipt(tx).unwrap();
            if permitted.contains(&role) {
                ensure!(
                    matches!(receipt.outcome, TxOutcome::Executed { .. }),
                    "{name} by {role} aborted: {:?}",
                    receipt.abort()
                );
                allowed += 1;
            } else {
                let role_abort = matches!(receipt.abort(), Some(Abort::NotOwner | Abort::NotRequester));
                ensure!(role_abort, "{name} by {role}: {:?}", receipt.outcome);
                ensure!(
                    serde_json::to_vec(&before.contract).unwrap() == serde_json::to_vec(&after.contract).unwrap()
                        && before.accounts == after.accounts,
                    "{name} by {role} changed state"
                );
                denied += 1;
            }
        }
    }
    Ok(format!("{denied} wrong-role cells aborted with state unchanged, {allowed} permitted cells executed"))
}
