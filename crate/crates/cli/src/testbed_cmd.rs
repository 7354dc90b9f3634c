use crate::config::Settings;
use crate::exit::{CliError, Code};
use crate::output::emit;
use clap::{Args, Subcommand};
use keynotary::clock::{SharedClock, SystemClock};
use keynotary::testbed::{credential, spawn_on, KeyExchangeMode, ServerProfile};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

#[derive(Subcommand, Debug)]
pub enum TestbedCommand {
    /// Serve a scripted TLS server until interrupted.
    Spawn(SpawnArgs),
}

#[derive(Args, Debug)]
pub struct SpawnArgs {
    /// Key id to generate; the first one is active. Repeatable.
    #[arg(long = "key")]
    keys: Vec<String>,
    /// Offset of the server's gmt_unix_time in seconds.
    #[arg(long, allow_negative_numbers = true)]
    skew: Option<i64>,
    /// Switch to a key from a handshake count on, as EPOCH=KEY. Repeatable.
    #[arg(long = "schedule", value_parser = parse_schedule)]
    schedule: Vec<(u64, String)>,
    /// Send no ServerKeyExchange (plain RSA key transport).
    #[arg(long)]
    rsa_only: bool,
    #[arg(long)]
    listen: Option<SocketAddr>,
    /// TOML profile; flags override it.
    #[arg(long)]
    profile: Option<PathBuf>,
}

/// Profile file.
///
/// ```toml
/// listen = "127.0.0.1:9443"
/// skew_secs = -30
/// keys = ["a", "b"]
///
/// [[schedule]]
/// epoch = 5
/// key = "b"
///
/// [[outages]]
/// from_secs = 60
/// to_secs = 120
/// ```
///
/// Outage bounds are seconds after startup.
#[derive(Deserialize, Default, Debug)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    listen: Option<SocketAddr>,
    skew_secs: Option<i64>,
    #[serde(default)]
    keys: Vec<String>,
    #[serde(default)]
    schedule: Vec<ScheduleEntry>,
    #[serde(default)]
    outages: Vec<Outage>,
    #[serde(default)]
    rsa_only: bool,
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct ScheduleEntry {
    epoch: u64,
    key: String,
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct Outage {
    from_secs: u64,
    to_secs: u64,
}

fn parse_schedule(s: &str) -> Result<(u64, String), String> {
    let (epoch, key) = s.split_once('=').ok_or("expected EPOCH=KEY")?;
    Ok((epoch.parse().map_err(|e| format!("{epoch}: {e}"))?, key.to_string()))
}

#[derive(Serialize)]
struct KeyView {
    id: String,
    key_hash: String,
}

#[derive(Serialize)]
struct Spawned {
    domain: String,
    keys: Vec<KeyView>,
}

pub async fn run(cmd: TestbedCommand, s: &Settings) -> Result<Code, CliError> {
    let TestbedCommand::Spawn(a) = cmd;
    let file = match &a.profile {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            toml::from_str::<ProfileFile>(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
        }
        None => ProfileFile::default(),
    };
    let mut ids = if a.keys.is_empty() { file.keys } else { a.keys };
    if ids.is_empty() {
        ids.push("default".into());
    }
    let schedule: Vec<(u64, String)> = if a.schedule.is_empty() {
        file.schedule.into_iter().map(|e| (e.epoch, e.key)).collect()
    } else {
        a.schedule
    };
    for (_, key) in &schedule {
        if !ids.contains(key) {
            return Err(CliError::usage(format!("scheduled key {key:?} is not among the generated keys")));
        }
    }

    let clock: SharedClock = Arc::new(SystemClock);
    let start = clock.now_ms();
    let mut creds = ids.iter().map(|id| credential(id));
    let mut profile = ServerProfile::new(creds.next().expect("at least one key"));
    for c in creds {
        profile = profile.with_key(c);
    }
    profile = profile.with_skew(a.skew.or(file.skew_secs).unwrap_or(0));
    profile.key_schedule = schedule;
    profile.outages = file
        .outages
        .iter()
        .map(|o| start + o.from_secs * 1000..start + o.to_secs * 1000)
        .collect();
    if a.rsa_only || file.rsa_only {
        profile.mode = KeyExchangeMode::RsaOnly;
    }
    let keys = profile
        .keys
        .iter()
        .map(|k| KeyView {
            id: k.id.clone(),
            key_hash: k.key_hash.to_string(),
        })
        .collect();

    let listen = a
        .listen
        .or(file.listen)
        .unwrap_or_else(|| "127.0.0.1:0".parse().expect("static address"));
    let listener = tokio::net::TcpListener::bind(listen)
        .await
        .map_err(|e| CliError::runtime(format!("{listen}: {e}")))?;
    let server = spawn_on(listener, profile, clock).map_err(|e| CliError::usage(e.to_string()))?;
    let out = Spawned {
        domain: server.domain(),
        keys,
    };
    emit(s.out, &out, || {
        let mut text = format!("serving {}\n", out.domain);
        for k in &out.keys {
            let _ = writeln!(text, "key {} {}", k.id, k.key_hash);
        }
        text
    });
    use std::io::Write;
    let _ = std::io::stdout().flush();
    tokio::signal::ctrl_c()
        .await
        .map_err(|e| CliError::runtime(e.to_string()))?;
    drop(server);
    Ok(Code::OK)
}
