use crate::config::Settings;
use crate::exit::{CliError, Code};
use crate::output::emit;
use clap::Args;
use keynotary::clock::SystemClock;
use keynotary::probe::{ProbeConfig, TlsProber};
use keynotary::scan::{parse_domain_list, scan, ScanConfig};
use std::path::PathBuf;
use std::sync::Arc;

#[derive(Args, Debug)]
pub struct ScanArgs {
    /// File with one domain per line; `-` reads standard input.
    file: PathBuf,
    /// Retry unreachable domains with a `www.` prefix.
    #[arg(long)]
    www_fallback: bool,
}

pub async fn run(a: ScanArgs, s: &Settings) -> Result<Code, CliError> {
    let text = if a.file.as_os_str() == "-" {
        std::io::read_to_string(std::io::stdin()).map_err(|e| CliError::runtime(format!("stdin: {e}")))?
    } else {
        std::fs::read_to_string(&a.file).map_err(|e| CliError::usage(format!("{}: {e}", a.file.display())))?
    };
    let domains = parse_domain_list(&text);
    let mut probe_config = ProbeConfig::default();
    probe_config.attempts = 1;
    let prober = TlsProber::new(probe_config, Arc::new(SystemClock));
    let config = ScanConfig {
        concurrency: s.concurrency,
        timeout: s.timeout,
        www_fallback: a.www_fallback,
    };
    let report = scan(&prober, &domains, &config).await;
    emit(s.out, &report, || report.render_table());
    Ok(Code::OK)
}
