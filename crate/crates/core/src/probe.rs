//! Half-handshake probing: send one ClientHello, read the server flight up to
//! ServerHelloDone, reset the connection, and verify the signed key exchange.

use crate::clock::Clock;
use crate::crypto::{certificate_spki, verify_signature, Digest32, KeyHash, SigScheme, VerifyError};
use crate::wire::{
    assemble_signed_params, decode_server_flight, CertificateChain, ClientHello, RandomField,
    ServerFlight, WireError, DEFAULT_SUITES,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::future::Future;
use std::net::{IpAddr, SocketAddr};
use std::time::Duration;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::time::Instant;

/// Largest server flight we are willing to buffer.
const MAX_FLIGHT_BYTES: usize = 256 * 1024;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum ProbeOutcome {
    Signed,
    ConnectFailure,
    ProtocolFailure,
}

/// One probe's evidence bundle. Certificates are referenced by `chain_ref`
/// and kept separately so identical chains are stored once.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ValidationResult {
    pub vid: u64,
    pub domain: String,
    #[serde(with = "crate::encoding::bytes32")]
    pub client_random: [u8; 32],
    pub server_random: RandomField,
    #[serde(with = "crate::encoding::bytes")]
    pub dh_params: Vec<u8>,
    pub sig_scheme: SigScheme,
    #[serde(with = "crate::encoding::bytes")]
    pub signature: Vec<u8>,
    pub chain_ref: Digest32,
    pub observed_key_hash: Option<KeyHash>,
    /// Notary clock at probe start, milliseconds since the Unix epoch.
    pub notary_wall_clock_ms: u64,
    pub outcome: ProbeOutcome,
    pub diagnostic: Option<String>,
}

impl ValidationResult {
    /// An evidence-free result for a probe that failed before any flight was parsed.
    pub fn failed(
        domain: &str,
        client_random: [u8; 32],
        started_ms: u64,
        outcome: ProbeOutcome,
        diagnostic: String,
    ) -> ValidationResult {
        ValidationResult {
            vid: 0,
            domain: domain.to_string(),
            client_random,
            server_random: RandomField::from_bytes(&[0; 32]),
            dh_params: Vec::new(),
            sig_scheme: SigScheme(0),
            signature: Vec::new(),
            chain_ref: Digest32::ZERO,
            observed_key_hash: None,
            notary_wall_clock_ms: started_ms,
            outcome,
            diagnostic: Some(diagnostic),
        }
    }

    pub fn is_signed(&self) -> bool {
        self.outcome == ProbeOutcome::Signed
    }

    /// The bytes the server signed.
    pub fn signed_params(&self) -> Vec<u8> {
        assemble_signed_params(&self.client_random, &self.server_random.to_bytes(), &self.dh_params)
            .expect("randoms are fixed-size")
    }
}

/// Why a probe did not produce signed evidence.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum ProbeFailure {
    Connect(String),
    Wire(WireError),
    BadCertificate(String),
    BadSignature,
    Unsupported(VerifyError),
}

impl std::fmt::Display for ProbeFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProbeFailure::Connect(e) => write!(f, "connect: {e}"),
            ProbeFailure::Wire(e) => write!(f, "wire: {e}"),
            ProbeFailure::BadCertificate(e) => write!(f, "certificate: {e}"),
            ProbeFailure::BadSignature => f.write_str("signature invalid"),
            ProbeFailure::Unsupported(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub result: ValidationResult,
    pub chain: Option<CertificateChain>,
    pub failure: Option<ProbeFailure>,
    /// Local clock when the server flight was complete (or the probe gave up).
    pub finished_ms: u64,
}

impl ProbeReport {
    fn failure(
        domain: &str,
        client_random: [u8; 32],
        started_ms: u64,
        finished_ms: u64,
        failure: ProbeFailure,
    ) -> ProbeReport {
        let outcome = match failure {
            ProbeFailure::Connect(_) => ProbeOutcome::ConnectFailure,
            _ => ProbeOutcome::ProtocolFailure,
        };
        ProbeReport {
            result: ValidationResult::failed(domain, client_random, started_ms, outcome, failure.to_string()),
            chain: None,
            failure: Some(failure),
            finished_ms,
        }
    }
}

/// Builds the report for a parsed server flight, verifying the signature
/// under the leaf certificate's key.
pub fn evaluate_flight(
    domain: &str,
    client_random: [u8; 32],
    flight: ServerFlight,
    started_ms: u64,
    finished_ms: u64,
) -> ProbeReport {
    let ServerFlight {
        hello,
        chain,
        key_exchange,
    } = flight;
    let mut result = ValidationResult {
        vid: 0,
        domain: domain.to_string(),
        client_random,
        server_random: hello.random,
        dh_params: key_exchange.dh_params,
        sig_scheme: key_exchange.sig_scheme,
        signature: key_exchange.signature,
        chain_ref: chain.chain_hash(),
        observed_key_hash: None,
        notary_wall_clock_ms: started_ms,
        outcome: ProbeOutcome::ProtocolFailure,
        diagnostic: None,
    };

    let failure = match certificate_spki(chain.leaf()) {
        Err(VerifyError::BadCertificate(e)) => Some(ProbeFailure::BadCertificate(e)),
        Err(e) => Some(ProbeFailure::Unsupported(e)),
        Ok(spki) => {
            result.observed_key_hash = Some(KeyHash::of_spki(&spki));
            match verify_signature(&spki, result.sig_scheme, &result.signed_params(), &result.signature) {
                Ok(true) => None,
                Ok(false) => Some(ProbeFailure::BadSignature),
                Err(e) => Some(ProbeFailure::Unsupported(e)),
            }
        }
    };

    match &failure {
        None => result.outcome = ProbeOutcome::Signed,
        Some(f) => result.diagnostic = Some(f.to_string()),
    }
    ProbeReport {
        result,
        chain: Some(chain),
        failure,
        finished_ms,
    }
}

/// Big-endian `gmt_unix_time` of the server random.
pub fn extract_server_timestamp(vr: &ValidationResult) -> u32 {
    vr.server_random.gmt_unix_time
}

/// True iff `vr` is signed evidence whose signature verifies under the leaf
/// key of `chain`, and `chain` is the one `vr` references.
pub fn verify_evidence(vr: &ValidationResult, chain: &CertificateChain) -> Result<bool, VerifyError> {
    if !vr.is_signed() || chain.chain_hash() != vr.chain_ref {
        return Ok(false);
    }
    let Ok(spki) = certificate_spki(chain.leaf()) else {
        return Ok(false);
    };
    if vr.observed_key_hash != Some(KeyHash::of_spki(&spki)) {
        return Ok(false);
    }
    verify_signature(&spki, vr.sig_scheme, &vr.signed_params(), &vr.signature)
}

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub cipher_suites: Vec<u16>,
    /// Connection attempts per probe before reporting a connect failure.
    pub attempts: u32,
    pub initial_backoff: Duration,
    pub send_sni: bool,
    pub default_port: u16,
    /// Fixed addresses for domains. Unlisted domains are resolved on every probe.
    pub pinned: BTreeMap<String, SocketAddr>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            cipher_suites: DEFAULT_SUITES.to_vec(),
            attempts: 3,
            initial_backoff: Duration::from_millis(100),
            send_sni: true,
            default_port: 443,
            pinned: BTreeMap::new(),
        }
    }
}

/// Something that can run a half-handshake and report evidence.
pub trait Prober: Send + Sync {
    fn probe(
        &self,
        domain: &str,
        client_random: [u8; 32],
        deadline: Duration,
    ) -> impl Future<Output = ProbeReport> + Send;
}

/// Probes real TCP endpoints.
#[derive(Clone)]
pub struct TlsProber {
    pub config: ProbeConfig,
    pub clock: crate::clock::SharedClock,
}

impl TlsProber {
    pub fn new(config: ProbeConfig, clock: crate::clock::SharedClock) -> TlsProber {
        TlsProber { config, clock }
    }
}

impl Prober for TlsProber {
    fn probe(
        &self,
        domain: &str,
        client_random: [u8; 32],
        deadline: Duration,
    ) -> impl Future<Output = ProbeReport> + Send {
        let (host, port) = split_host_port(domain, self.config.default_port);
        let domain = domain.to_string();
        async move {
            probe_target(&domain, &host, port, client_random, deadline, &self.config, self.clock.as_ref()).await
        }
    }
}

/// Splits `host:port` (or `[v6]:port`), falling back to `default_port`.
pub fn split_host_port(domain: &str, default_port: u16) -> (String, u16) {
    if let Some(rest) = domain.strip_prefix('[') {
        if let Some((host, tail)) = rest.split_once(']') {
            let port = tail.strip_prefix(':').and_then(|p| p.parse().ok()).unwrap_or(default_port);
            return (host.to_string(), port);
        }
    }
    match domain.rsplit_once(':') {
        Some((host, port)) if !host.contains(':') => match port.parse() {
            Ok(p) => (host.to_string(), p),
            Err(_) => (domain.to_string(), default_port),
        },
        _ => (domain.to_string(), default_port),
    }
}

/// Runs one half-handshake against `domain:port`.
pub async fn probe_once(
    domain: &str,
    port: u16,
    client_random: [u8; 32],
    deadline: Duration,
    config: &ProbeConfig,
    clock: &dyn Clock,
) -> ProbeReport {
    probe_target(domain, domain, port, client_random, deadline, config, clock).await
}

async fn probe_target(
    domain: &str,
    host: &str,
    port: u16,
    client_random: [u8; 32],
    deadline: Duration,
    config: &ProbeConfig,
    clock: &dyn Clock,
) -> ProbeReport {
    let started_ms = clock.now_ms();
    let deadline_at = Instant::now() + deadline;

    let mut hello = ClientHello::new(client_random, config.cipher_suites.clone());
    if config.send_sni && host.parse::<IpAddr>().is_err() {
        hello.server_name = Some(host.to_string());
    }
    let hello = match hello.encode() {
        Ok(h) => h,
        Err(e) => {
            return ProbeReport::failure(domain, client_random, started_ms, clock.now_ms(), ProbeFailure::Wire(e))
        }
    };

    let mut backoff = config.initial_backoff;
    let attempts = config.attempts.max(1);
    let mut last_error = String::from("no attempt made");
    for attempt in 0..attempts {
        let target = config.pinned.get(domain).copied();
        match tokio::time::timeout_at(deadline_at, attempt_once(host, port, target, &hello)).await {
            Err(_) => {
                last_error = format!("deadline of {deadline:?} exceeded");
                break;
            }
            Ok(Attempt::Flight(flight)) => {
                return evaluate_flight(domain, client_random, flight, started_ms, clock.now_ms());
            }
            Ok(Attempt::Protocol(e)) => {
                return ProbeReport::failure(domain, client_random, started_ms, clock.now_ms(), ProbeFailure::Wire(e));
            }
            Ok(Attempt::Network(e)) => {
                last_error = e;
                if attempt + 1 < attempts {
                    let wake = (Instant::now() + backoff).min(deadline_at);
                    tokio::time::sleep_until(wake).await;
                    backoff *= 2;
                }
            }
        }
    }
    ProbeReport::failure(
        domain,
        client_random,
        started_ms,
        clock.now_ms(),
        ProbeFailure::Connect(last_error),
    )
}

enum Attempt {
    Flight(ServerFlight),
    Protocol(WireError),
    Network(String),
}

async fn attempt_once(host: &str, port: u16, pinned: Option<SocketAddr>, hello: &[u8]) -> Attempt {
    let connect = match pinned {
        Some(addr) => TcpStream::connect(addr).await,
        None => TcpStream::connect((host, port)).await,
    };
    let mut stream = match connect {
        Ok(s) => s,
        Err(e) => return Attempt::Network(e.to_string()),
    };
    let _ = stream.set_nodelay(true);
    if let Err(e) = stream.write_all(hello).await {
        return Attempt::Network(e.to_string());
    }

    let mut buf = Vec::with_capacity(8 * 1024);
    let mut chunk = [0u8; 8 * 1024];
    let outcome = loop {
        let n = match stream.read(&mut chunk).await {
            Ok(0) => break Attempt::Network("connection closed before ServerHelloDone".into()),
            Ok(n) => n,
            Err(e) => break Attempt::Network(e.to_string()),
        };
        buf.extend_from_slice(&chunk[..n]);
        match decode_server_flight(&buf) {
            Ok(flight) => break Attempt::Flight(flight),
            Err(WireError::Truncated) if buf.len() < MAX_FLIGHT_BYTES => continue,
            Err(WireError::Truncated) => break Attempt::Protocol(WireError::MalformedLength("server flight")),
            Err(e) => break Attempt::Protocol(e),
        }
    };
    // Abortive close: the kernel sends RST instead of FIN and drops the state.
    let _ = stream.set_zero_linger();
    drop(stream);
    outcome
}
