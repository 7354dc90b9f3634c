use crate::config::Settings;
use crate::exit::{CliError, Code};
use crate::output::Format;
use clap::{Args, Subcommand};
use keynotary::clock::{SharedClock, SystemClock};
use keynotary::contract::Status;
use keynotary::notary::http::serve;
use keynotary::notary::store::EvidenceStore;
use keynotary::notary::{Faults, Notary, NotaryConfig, TickReport};
use keynotary::probe::{ProbeConfig, TlsProber};
use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

#[derive(Subcommand, Debug)]
pub enum NotaryCommand {
    /// Validate accepted services, publish state changes and serve evidence.
    Run(RunArgs),
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// The notary's ledger account.
    #[arg(long = "as")]
    account: Option<String>,
    /// Evidence store directory.
    #[arg(long, default_value = "notary-store")]
    store: PathBuf,
    /// Address of the direct audit interface.
    #[arg(long, default_value = "127.0.0.1:8700")]
    listen: SocketAddr,
    /// Milliseconds between scheduler ticks.
    #[arg(long, default_value_t = 1000)]
    tick_ms: u64,
    /// Exit after this many ticks.
    #[arg(long)]
    ticks: Option<u64>,
    /// Mine a block after every tick (single-host setups without a separate miner).
    #[arg(long)]
    mine: bool,
    /// Do not accept pending requests automatically.
    #[arg(long)]
    manual_accept: bool,
    /// Fixed address for a domain, as DOMAIN=IP:PORT. Repeatable.
    #[arg(long = "pin", value_parser = parse_pin)]
    pins: Vec<(String, SocketAddr)>,

    #[arg(long, hide = true)]
    fault_suppress: Vec<u64>,
    #[arg(long, hide = true, value_parser = parse_fabricate)]
    fault_fabricate: Vec<(u64, Status)>,
    #[arg(long, hide = true)]
    fault_censor: Vec<u64>,
    #[arg(long, hide = true)]
    fault_silent: bool,
}

fn parse_pin(s: &str) -> Result<(String, SocketAddr), String> {
    let (domain, addr) = s.split_once('=').ok_or("expected DOMAIN=IP:PORT")?;
    Ok((domain.to_string(), addr.parse().map_err(|e| format!("{addr}: {e}"))?))
}

fn parse_fabricate(s: &str) -> Result<(u64, Status), String> {
    let (vid, status) = s.split_once('=').ok_or("expected VID=STATUS")?;
    Ok((
        vid.parse().map_err(|e| format!("{vid}: {e}"))?,
        status.parse().map_err(|e| format!("{status}: {e}"))?,
    ))
}

pub async fn run(cmd: NotaryCommand, s: &Settings) -> Result<Code, CliError> {
    let NotaryCommand::Run(a) = cmd;
    let owner = s.account(a.account)?;
    let ledger = Arc::new(s.open_ledger()?);
    if ledger.snapshot().contract.owner().0 != owner {
        return Err(CliError::usage(format!(
            "{owner} is not the contract owner ({})",
            ledger.snapshot().contract.owner()
        )));
    }
    let store = Arc::new(EvidenceStore::open(&a.store).map_err(|e| CliError::runtime(e.to_string()))?);
    let clock: SharedClock = Arc::new(SystemClock);
    let mut probe_config = ProbeConfig::default();
    probe_config.pinned.extend(a.pins);
    let prober = TlsProber::new(probe_config, clock.clone());
    let mut config = NotaryConfig::new(owner.as_str());
    config.probe_deadline = s.timeout;
    config.auto_accept = !a.manual_accept;
    let notary = Notary::new(ledger.clone(), prober, store, clock, config);
    notary.set_faults(Faults {
        suppress: a.fault_suppress.into_iter().collect(),
        fabricate: a.fault_fabricate.into_iter().collect(),
        censor: a.fault_censor.into_iter().collect(),
        silent: a.fault_silent,
    });

    let listener = tokio::net::TcpListener::bind(a.listen)
        .await
        .map_err(|e| CliError::runtime(format!("{}: {e}", a.listen)))?;
    let addr = listener.local_addr().map_err(|e| CliError::runtime(e.to_string()))?;
    let http = tokio::spawn(serve(listener, notary.api()));
    match s.out {
        Format::Human => println!("listening http://{addr}"),
        Format::Structured => println!("{}", serde_json::json!({ "listening": format!("http://{addr}") })),
    }
    let _ = std::io::stdout().flush();

    let mut interval = tokio::time::interval(Duration::from_millis(a.tick_ms.max(1)));
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let mut done = 0;
    loop {
        tokio::select! {
            _ = interval.tick() => {}
            _ = tokio::signal::ctrl_c() => break,
        }
        let report = notary.tick().await;
        if a.mine {
            if let Err(e) = ledger.mine() {
                eprintln!("mining failed: {e}");
            }
        }
        print_report(s.out, &report);
        done += 1;
        if a.ticks.is_some_and(|n| done >= n) {
            break;
        }
    }
    http.abort();
    Ok(Code::OK)
}

fn print_report(out: Format, r: &TickReport) {
    for e in &r.errors {
        eprintln!("error: {e}");
    }
    match out {
        Format::Human => {
            for id in &r.accepted {
                println!("accepted request {id}");
            }
            for id in &r.registered {
                println!("monitoring service {id}");
            }
            for q in &r.answered {
                println!("answered query {q}");
            }
            for c in &r.cycles {
                println!(
                    "service {} vid {} {}{}",
                    c.service_id,
                    c.vid,
                    c.status.human(),
                    if c.published { " (published)" } else { "" }
                );
            }
        }
        Format::Structured => {
            if !(r.accepted.is_empty() && r.registered.is_empty() && r.answered.is_empty() && r.cycles.is_empty()) {
                println!("{}", serde_json::to_string(r).expect("report serializes"));
            }
        }
    }
    let _ = std::io::stdout().flush();
}
