//! `keynotary`: one binary for the notary daemon, requesters, auditors and
//! operators.

mod config;
mod exit;
mod ledger_cmd;
mod notary_cmd;
mod output;
mod requester;
mod scan_cmd;
mod testbed_cmd;

use clap::{Parser, Subcommand};
use config::Settings;
use exit::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "keynotary", version, about = "Accountable TLS key notary")]
pub struct Cli {
    /// Ledger state file (JSON lines).
    #[arg(long, global = true, env = "KEYNOTARY_LEDGER")]
    ledger: Option<PathBuf>,

    /// TOML file with defaults for the global flags.
    #[arg(long, global = true, env = "KEYNOTARY_CONFIG")]
    config: Option<PathBuf>,

    /// Output format.
    #[arg(long, global = true, value_enum)]
    out: Option<output::Format>,

    /// Probes in flight at once.
    #[arg(long, global = true)]
    concurrency: Option<usize>,

    /// Network timeout in seconds.
    #[arg(long, global = true)]
    timeout: Option<f64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create, fund, mine and inspect the ledger.
    #[command(subcommand)]
    Ledger(ledger_cmd::LedgerCommand),
    /// Run the notary daemon.
    #[command(subcommand)]
    Notary(notary_cmd::NotaryCommand),
    /// Ask the notary to monitor a domain.
    Request(requester::RequestArgs),
    /// Print a service's published state changes.
    Timeline(requester::TimelineArgs),
    /// Audit a vid range against the notary's direct interface.
    Audit(requester::AuditArgs),
    /// Audit a vid range through the on-ledger query path.
    Escalate(requester::EscalateArgs),
    /// Survey server timestamp accuracy for a list of domains.
    Scan(scan_cmd::ScanArgs),
    /// Local test servers.
    #[command(subcommand)]
    Testbed(testbed_cmd::TestbedCommand),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("KEYNOTARY_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let result = Settings::resolve(&cli).and_then(|settings| {
        let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::runtime(e.to_string()))?;
        rt.block_on(dispatch(cli.command, &settings))
    });
    match result {
        Ok(code) => code.into(),
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code.into()
        }
    }
}

async fn dispatch(command: Command, s: &Settings) -> Result<exit::Code, CliError> {
    match command {
        Command::Ledger(c) => ledger_cmd::run(c, s),
        Command::Notary(c) => notary_cmd::run(c, s).await,
        Command::Request(a) => requester::request(a, s),
        Command::Timeline(a) => requester::timeline(a, s),
        Command::Audit(a) => requester::audit(a, s).await,
        Command::Escalate(a) => requester::escalate(a, s).await,
        Command::Scan(a) => scan_cmd::run(a, s).await,
        Command::Testbed(c) => testbed_cmd::run(c, s).await,
    }
}
