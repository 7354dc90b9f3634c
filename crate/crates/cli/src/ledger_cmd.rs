use crate::config::Settings;
use crate::exit::{CliError, Code};
use crate::output::emit;
use clap::{Args, Subcommand};
use keynotary::contract::{AccountId, ContractConfig, ServiceId, ValidationState};
use keynotary::ledger::{Genesis, Ledger, LoggedEvent};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Subcommand, Debug)]
pub enum LedgerCommand {
    /// Create a new ledger state file.
    Init(InitArgs),
    /// Credit an account.
    Fund { account: String, amount: u64 },
    /// Execute pending transactions in new blocks.
    Mine {
        #[arg(long, default_value_t = 1)]
        blocks: u64,
    },
    /// Show balances, services, pending requests and open queries.
    Inspect {
        /// Also list events from this height on.
        #[arg(long)]
        events_from: Option<u64>,
    },
}

#[derive(Args, Debug)]
pub struct InitArgs {
    /// The notary's account, owner of the contract.
    #[arg(long)]
    owner: String,
    /// Initial balance, as NAME=AMOUNT. Repeatable.
    #[arg(long = "account", value_parser = parse_account)]
    accounts: Vec<(String, u64)>,
    #[arg(long, default_value_t = 1000)]
    sla_deposit: u64,
    /// Blocks the notary has to answer an on-ledger query.
    #[arg(long, default_value_t = 10)]
    sla_timeout: u64,
    /// Fee units per block of service; 0 means services never expire.
    #[arg(long, default_value_t = 0)]
    price_per_block: u64,
    /// Seconds between validations; 0 validates on every notary tick.
    #[arg(long, default_value_t = 3600)]
    interval: u64,
    /// Allowed server clock deviation in seconds.
    #[arg(long, default_value_t = 10)]
    tolerance: u64,
}

fn parse_account(s: &str) -> Result<(String, u64), String> {
    let (name, amount) = s.split_once('=').ok_or("expected NAME=AMOUNT")?;
    let amount = amount.parse().map_err(|e| format!("{amount}: {e}"))?;
    if name.is_empty() {
        return Err("empty account name".into());
    }
    Ok((name.to_string(), amount))
}

#[derive(Serialize)]
struct ServiceView {
    service_id: ServiceId,
    domain: String,
    requester: AccountId,
    active: bool,
    state: Option<ValidationState>,
    time_source: Option<String>,
    whitelist: Vec<String>,
}

#[derive(Serialize)]
struct Inspection {
    height: u64,
    accounts: BTreeMap<AccountId, u64>,
    escrow: u64,
    pending_requests: Vec<u64>,
    services: Vec<ServiceView>,
    open_queries: Vec<u64>,
    pending_transactions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    events: Option<Vec<LoggedEvent>>,
}

pub fn run(cmd: LedgerCommand, s: &Settings) -> Result<Code, CliError> {
    match cmd {
        LedgerCommand::Init(a) => {
            let mut config = ContractConfig::new(a.owner.as_str());
            config.sla_deposit = a.sla_deposit;
            config.sla_timeout_blocks = a.sla_timeout;
            config.price_per_block = a.price_per_block;
            config.validation_interval_secs = a.interval;
            config.skew_tolerance_secs = a.tolerance;
            let mut genesis = Genesis::new(config);
            for (name, amount) in a.accounts {
                genesis = genesis.with_account(name, amount);
            }
            let path = s.ledger_path()?;
            let ledger = Ledger::create(path, genesis)?;
            let value = serde_json::json!({ "ledger": path, "height": ledger.height() });
            emit(s.out, &value, || format!("created {} at height {}", path.display(), ledger.height()));
        }
        LedgerCommand::Fund { account, amount } => {
            let ledger = s.open_ledger()?;
            ledger.mint(account.as_str(), amount)?;
            let balance = ledger.snapshot().balance(&account.as_str().into());
            let value = serde_json::json!({ "account": account, "balance": balance });
            emit(s.out, &value, || format!("{account}: {balance}"));
        }
        LedgerCommand::Mine { blocks } => {
            let ledger = s.open_ledger()?;
            let mut executed = 0;
            for _ in 0..blocks {
                executed += ledger.mine()?.transactions.len();
            }
            let height = ledger.height();
            let value = serde_json::json!({ "height": height, "transactions": executed });
            emit(s.out, &value, || format!("height {height}, {executed} transactions executed"));
        }
        LedgerCommand::Inspect { events_from } => {
            let ledger = s.open_ledger()?;
            let snap = ledger.snapshot();
            let c = &snap.contract;
            let view = Inspection {
                height: snap.height,
                accounts: snap.accounts.clone(),
                escrow: c.escrow,
                pending_requests: c.pending.keys().copied().collect(),
                services: c
                    .services
                    .values()
                    .map(|sv| ServiceView {
                        service_id: sv.service_id,
                        domain: sv.domain.clone(),
                        requester: sv.requester.clone(),
                        active: sv.is_active(),
                        state: sv.state,
                        time_source: sv.time_source.clone(),
                        whitelist: sv.whitelist.iter().map(|k| k.0.to_hex()).collect(),
                    })
                    .collect(),
                open_queries: c.queries.values().filter(|q| q.open).map(|q| q.query_id).collect(),
                pending_transactions: ledger.pending().len(),
                events: events_from.map(|h| ledger.events_from(h)),
            };
            emit(s.out, &view, || render(&view));
        }
    }
    Ok(Code::OK)
}

fn render(v: &Inspection) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "height {}  escrow {}  pending txs {}", v.height, v.escrow, v.pending_transactions);
    for (a, b) in &v.accounts {
        let _ = writeln!(out, "account {a}: {b}");
    }
    for r in &v.pending_requests {
        let _ = writeln!(out, "pending request {r}");
    }
    for sv in &v.services {
        let state = sv.state.map_or("none".into(), |st| format!("vid {} {}", st.vid, st.status.human()));
        let _ = writeln!(
            out,
            "service {} {} requester {} {} state {state}",
            sv.service_id,
            sv.domain,
            sv.requester,
            if sv.active { "active" } else { "ended" }
        );
    }
    for q in &v.open_queries {
        let _ = writeln!(out, "open query {q}");
    }
    if let Some(events) = &v.events {
        for e in events {
            let _ = writeln!(out, "event h{} {}", e.height, serde_json::to_string(&e.event).expect("event serializes"));
        }
    }
    out
}
