//! Optional TOML defaults for the global flags.
//!
//! ```toml
//! ledger = "state/ledger.jsonl"
//! out = "structured"
//! concurrency = 32
//! timeout = 5.0
//! notary = "http://127.0.0.1:8700"
//! account = "alice"
//! ```
//!
//! Flags given on the command line win over the file.

use crate::exit::CliError;
use crate::output::Format;
use crate::Cli;
use keynotary::ledger::Ledger;
use serde::Deserialize;
use std::path::PathBuf;
use std::time::Duration;

#[derive(Deserialize, Default, Debug)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub ledger: Option<PathBuf>,
    pub out: Option<Format>,
    pub concurrency: Option<usize>,
    pub timeout: Option<f64>,
    /// Base URL of the notary's direct interface.
    pub notary: Option<String>,
    /// Default sender for requester commands.
    pub account: Option<String>,
}

#[derive(Debug)]
pub struct Settings {
    pub ledger: Option<PathBuf>,
    pub out: Format,
    pub concurrency: usize,
    pub timeout: Duration,
    pub notary: Option<String>,
    pub account: Option<String>,
}

impl Settings {
    pub fn resolve(cli: &Cli) -> Result<Settings, CliError> {
        let file = match &cli.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
                toml::from_str::<FileConfig>(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
            }
            None => FileConfig::default(),
        };
        let timeout = cli.timeout.or(file.timeout).unwrap_or(10.0);
        if !(timeout.is_finite() && timeout > 0.0) {
            return Err(CliError::usage("timeout must be a positive number of seconds"));
        }
        Ok(Settings {
            ledger: cli.ledger.clone().or(file.ledger),
            out: cli.out.or(file.out).unwrap_or_default(),
            concurrency: cli.concurrency.or(file.concurrency).unwrap_or(64).max(1),
            timeout: Duration::from_secs_f64(timeout),
            notary: file.notary,
            account: file.account,
        })
    }

    pub fn ledger_path(&self) -> Result<&PathBuf, CliError> {
        self.ledger
            .as_ref()
            .ok_or_else(|| CliError::usage("no ledger given; pass --ledger or set it in the config file"))
    }

    pub fn open_ledger(&self) -> Result<Ledger, CliError> {
        Ok(Ledger::open(self.ledger_path()?)?)
    }

    pub fn account(&self, flag: Option<String>) -> Result<String, CliError> {
        flag.or_else(|| self.account.clone())
            .ok_or_else(|| CliError::usage("no account given; pass --as or set `account` in the config file"))
    }

    pub fn notary_url(&self, flag: Option<String>) -> Result<String, CliError> {
        flag.or_else(|| self.notary.clone())
            .ok_or_else(|| CliError::usage("no notary URL given; pass --notary or set `notary` in the config file"))
    }
}
