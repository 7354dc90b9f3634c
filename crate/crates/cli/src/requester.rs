use crate::config::Settings;
use crate::exit::{CliError, Code};
use crate::output::emit;
use clap::Args;
use keynotary::auditor::{
    audit_range, request_service, AuditReport, AuditVerdict, Escalation, EscalationStep, HttpEvidenceSource, Timeline,
};
use keynotary::contract::{Event, ServiceId, VidRange};
use keynotary::crypto::KeyHash;
use keynotary::ledger::TxOutcome;
use serde::Serialize;
use std::collections::BTreeSet;
use std::time::Duration;

#[derive(Args, Debug)]
pub struct RequestArgs {
    /// Requesting account.
    #[arg(long = "as")]
    account: Option<String>,
    /// Domain to monitor, optionally with :port.
    #[arg(long)]
    domain: String,
    /// Fee attached to the request.
    #[arg(long)]
    fee: u64,
    /// Accepted key hash (hex SHA-256 of the SubjectPublicKeyInfo). Repeatable.
    #[arg(long = "whitelist")]
    whitelist: Vec<KeyHash>,
    /// Domain used to timestamp each validation.
    #[arg(long)]
    time_source: Option<String>,
    /// Mine a block so the request executes immediately.
    #[arg(long)]
    mine: bool,
}

#[derive(Args, Debug)]
pub struct TimelineArgs {
    #[arg(long)]
    service: ServiceId,
    /// Print the one-line `vid:status` form.
    #[arg(long)]
    compact: bool,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    #[arg(long)]
    service: ServiceId,
    /// Base URL of the notary's direct interface.
    #[arg(long)]
    notary: Option<String>,
    #[arg(long, default_value_t = 0)]
    from: u64,
    #[arg(long)]
    to: u64,
}

#[derive(Args, Debug)]
pub struct EscalateArgs {
    #[arg(long)]
    service: ServiceId,
    #[arg(long, default_value_t = 0)]
    from: u64,
    #[arg(long)]
    to: u64,
    /// Requesting account.
    #[arg(long = "as")]
    account: Option<String>,
    /// Mine blocks while waiting instead of relying on an external miner.
    #[arg(long)]
    mine: bool,
    /// Milliseconds between ledger polls.
    #[arg(long, default_value_t = 500)]
    poll_ms: u64,
    /// Give up after this many blocks without a verdict.
    #[arg(long, default_value_t = 100)]
    max_blocks: u64,
}

#[derive(Serialize)]
struct RequestOutput {
    tx_id: u64,
    height: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    request_id: Option<u64>,
}

pub fn request(a: RequestArgs, s: &Settings) -> Result<Code, CliError> {
    let account = s.account(a.account)?;
    let ledger = s.open_ledger()?;
    let whitelist: BTreeSet<KeyHash> = a.whitelist.into_iter().collect();
    let tx_id = request_service(&ledger, &account.as_str().into(), &a.domain, whitelist, a.fee, a.time_source)?;
    let mut out = RequestOutput {
        tx_id,
        height: ledger.height(),
        request_id: None,
    };
    if a.mine {
        ledger.mine()?;
        out.height = ledger.height();
        match ledger.receipt(tx_id).map(|r| r.outcome) {
            Some(TxOutcome::Executed { events }) => {
                out.request_id = events.iter().find_map(|e| match e {
                    Event::Requested { request_id, .. } => Some(*request_id),
                    _ => None,
                });
            }
            Some(TxOutcome::Aborted { reason }) => {
                return Err(CliError::new(Code::REJECTED, format!("request aborted: {reason}")));
            }
            None => return Err(CliError::runtime(format!("transaction {tx_id} was not mined"))),
        }
    }
    emit(s.out, &out, || match out.request_id {
        Some(id) => format!("request {id} recorded at height {}", out.height),
        None => format!("submitted transaction {tx_id}"),
    });
    Ok(Code::OK)
}

#[derive(Serialize)]
struct TimelineOutput<'a> {
    service_id: ServiceId,
    domain: &'a str,
    timeline: String,
}

pub fn timeline(a: TimelineArgs, s: &Settings) -> Result<Code, CliError> {
    let ledger = s.open_ledger()?;
    let snap = ledger.snapshot();
    let Some(service) = snap.contract.service(a.service) else {
        return Err(CliError::new(Code::UNKNOWN, format!("unknown service {}", a.service)));
    };
    let t = Timeline::from_ledger(&ledger, a.service);
    let out = TimelineOutput {
        service_id: a.service,
        domain: &service.domain,
        timeline: t.compact(),
    };
    emit(s.out, &out, || {
        if a.compact {
            t.compact()
        } else if t.is_empty() {
            "no state published".into()
        } else {
            t.human()
        }
    });
    Ok(Code::OK)
}

fn vid_range(from: u64, to: u64) -> Result<VidRange, CliError> {
    if from > to {
        return Err(CliError::usage(format!("empty vid range {from}..{to}")));
    }
    Ok(VidRange { from, to })
}

pub async fn audit(a: AuditArgs, s: &Settings) -> Result<Code, CliError> {
    let vids = vid_range(a.from, a.to)?;
    let url = s.notary_url(a.notary)?;
    let ledger = s.open_ledger()?;
    let source = HttpEvidenceSource::new(&url, s.timeout);
    let report = audit_range(&ledger, &source, a.service, vids).await?;
    emit(s.out, &report, || render_report(&report));
    Ok(Code::for_verdict(report.verdict.kind()))
}

fn render_report(r: &AuditReport) -> String {
    format!(
        "service {} vids {}-{}: {} records verified\n{}",
        r.service_id,
        r.vids.from,
        r.vids.to,
        r.verified,
        r.verdict.summary()
    )
}

#[derive(Serialize)]
struct EscalationOutput {
    service_id: ServiceId,
    query_id: Option<u64>,
    height: u64,
    verdict: AuditVerdict,
}

pub async fn escalate(a: EscalateArgs, s: &Settings) -> Result<Code, CliError> {
    let vids = vid_range(a.from, a.to)?;
    let account = s.account(a.account)?;
    let ledger = s.open_ledger()?;
    if ledger.snapshot().contract.service(a.service).is_none() {
        return Err(CliError::new(Code::UNKNOWN, format!("unknown service {}", a.service)));
    }
    let mut esc = Escalation::new(a.service, vids, account.as_str().into());
    esc.start(&ledger)?;
    let limit = ledger.height() + a.max_blocks;
    loop {
        match esc.poll(&ledger)? {
            EscalationStep::Done(verdict) => {
                let out = EscalationOutput {
                    service_id: a.service,
                    query_id: esc.query_id(),
                    height: ledger.height(),
                    verdict,
                };
                emit(s.out, &out, || out.verdict.summary());
                return Ok(Code::for_verdict(out.verdict.kind()));
            }
            EscalationStep::ClaimSubmitted(_) | EscalationStep::Waiting => {}
        }
        if ledger.height() >= limit {
            return Err(CliError::new(
                Code::GAVE_UP,
                format!("no verdict after {} blocks", a.max_blocks),
            ));
        }
        if a.mine {
            ledger.mine()?;
        } else {
            tokio::time::sleep(Duration::from_millis(a.poll_ms)).await;
        }
    }
}
