//! Controllable local TLS 1.2 servers for end-to-end tests.
//!
//! A test server performs the server half of a DHE_RSA handshake through
//! ServerHelloDone and nothing more. Profiles control the signing key, clock
//! skew, outage windows and scripted key changes. Every handshake and every
//! connection is logged so tests can assert on what the prober actually did.

use crate::clock::SharedClock;
use crate::crypto::{KeyHash, SigScheme};
use crate::probe::{evaluate_flight, ProbeConfig, ProbeFailure, ProbeReport, Prober};
use crate::wire::{
    assemble_signed_params, count_handshake_messages, decode_server_flight, encode_alert,
    CertificateChain, ClientHello, DhParams, RandomField, ServerFlight, ServerHello,
    ServerKeyExchangeMsg, WireError, DHE_RSA_SUITES,
};
use parking_lot::Mutex;
use rand::{Rng, RngCore};
use rsa::pkcs1v15::SigningKey;
use rsa::pkcs8::EncodePublicKey;
use rsa::signature::{SignatureEncoding, Signer};
use rsa::{BigUint, RsaPrivateKey};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::ops::Range;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Duration;
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;
use x509_cert::builder::{Builder, CertificateBuilder, Profile};
use x509_cert::der::{Decode, Encode};
use x509_cert::name::Name;
use x509_cert::serial_number::SerialNumber;
use x509_cert::spki::SubjectPublicKeyInfoOwned;
use x509_cert::time::Validity;

/// RFC 7919 ffdhe2048 prime.
const FFDHE2048_P: &str = concat!(
    "FFFFFFFFFFFFFFFFADF85458A2BB4A9AAFDC5620273D3CF1D8B9C583CE2D3695A9E13641146433FB",
    "CC939DCE249B3EF97D2FE363630C75D8F681B202AEC4617AD3DF1ED5D5FD65612433F51F5F066ED0",
    "856365553DED1AF3B557135E7F57C935984F0C70E0E68B77E2A689DAF3EFE8721DF158A136ADE735",
    "30ACCA4F483A797ABC0AB182B324FB61D108A94BB2C8E3FBB96ADAB760D7F4681D4F42A3DE394DF4",
    "AE56EDE76372BB190B07A7C8EE0A6D709E02FCE1CDF7E2ECC03404CD28342F619172FE9CE98583FF",
    "8E4F1232EEF28183C3FE3B1B4C6FAD733BB5FCBC2EC22005C58EF1837D1683B2C6F34A26C1B2EFFA",
    "886B423861285C97FFFFFFFFFFFFFFFF"
);

const DEFAULT_KEY_BITS: usize = 2048;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TestbedError {
    #[error("unknown key id {0:?}")]
    UnknownKey(String),
    #[error("profile has no active key")]
    NoActiveKey,
    #[error("io: {0}")]
    Io(String),
}

/// A key pair with a certificate chain `[leaf, ca]` for it.
pub struct Credential {
    pub id: String,
    key: RsaPrivateKey,
    pub chain: CertificateChain,
    pub key_hash: KeyHash,
    pub spki_der: Vec<u8>,
}

impl std::fmt::Debug for Credential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Credential")
            .field("id", &self.id)
            .field("key_hash", &self.key_hash)
            .finish()
    }
}

struct Authority {
    key: RsaPrivateKey,
    cert_der: Vec<u8>,
    name: Name,
}

fn test_authority() -> &'static Authority {
    static CA: OnceLock<Authority> = OnceLock::new();
    CA.get_or_init(|| {
        let key = RsaPrivateKey::new(&mut rand::thread_rng(), DEFAULT_KEY_BITS).expect("ca keygen");
        let name = Name::from_str("CN=keynotary test authority").expect("ca name");
        let spki = spki_of(&key);
        let signer = SigningKey::<Sha256>::new(key.clone());
        let cert = CertificateBuilder::new(
            Profile::Root,
            SerialNumber::from(1u32),
            Validity::from_now(Duration::from_secs(10 * 365 * 86_400)).expect("validity"),
            name.clone(),
            spki,
            &signer,
        )
        .expect("ca builder")
        .build::<rsa::pkcs1v15::Signature>()
        .expect("ca cert");
        Authority {
            key,
            cert_der: cert.to_der().expect("ca der"),
            name,
        }
    })
}

fn spki_of(key: &RsaPrivateKey) -> SubjectPublicKeyInfoOwned {
    let der = key.to_public_key().to_public_key_der().expect("spki der");
    SubjectPublicKeyInfoOwned::from_der(der.as_bytes()).expect("spki parse")
}

impl Credential {
    /// Generates a fresh RSA key and a leaf certificate for `id` issued by the
    /// process-wide test authority.
    pub fn generate(id: &str, bits: usize) -> Credential {
        let key = RsaPrivateKey::new(&mut rand::thread_rng(), bits).expect("rsa keygen");
        let ca = test_authority();
        let spki = spki_of(&key);
        let spki_der = spki.to_der().expect("spki der");
        let subject = Name::from_str(&format!("CN={}", sanitize_cn(id))).expect("subject");
        let signer = SigningKey::<Sha256>::new(ca.key.clone());
        let serial = rand::thread_rng().gen_range(2u32..u32::MAX);
        let leaf = CertificateBuilder::new(
            Profile::Leaf {
                issuer: ca.name.clone(),
                enable_key_agreement: false,
                enable_key_encipherment: true,
            },
            SerialNumber::from(serial),
            Validity::from_now(Duration::from_secs(365 * 86_400)).expect("validity"),
            subject,
            spki,
            &signer,
        )
        .expect("leaf builder")
        .build::<rsa::pkcs1v15::Signature>()
        .expect("leaf cert");
        let chain = CertificateChain::new(vec![leaf.to_der().expect("leaf der"), ca.cert_der.clone()])
            .expect("non-empty chain");
        Credential {
            id: id.to_string(),
            key,
            chain,
            key_hash: KeyHash::of_spki(&spki_der),
            spki_der,
        }
    }

    pub fn sign(&self, message: &[u8]) -> Vec<u8> {
        SigningKey::<Sha256>::new(self.key.clone()).sign(message).to_vec()
    }
}

fn sanitize_cn(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '-' })
        .collect()
}

/// A cached 2048-bit credential for `id`. Repeated calls return the same key.
pub fn credential(id: &str) -> Arc<Credential> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<Credential>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(c) = cache.lock().get(id) {
        return c.clone();
    }
    let fresh = Arc::new(Credential::generate(id, DEFAULT_KEY_BITS));
    cache.lock().entry(id.to_string()).or_insert(fresh).clone()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum KeyExchangeMode {
    /// DHE_RSA with a signed ServerKeyExchange.
    #[default]
    Dhe,
    /// Plain RSA key transport: no ServerKeyExchange is sent.
    RsaOnly,
}

#[derive(Clone, Debug)]
pub struct ServerProfile {
    pub keys: Vec<Arc<Credential>>,
    pub active_key: String,
    pub clock_skew_secs: i64,
    /// Clock intervals (ms since epoch) during which connections are dropped.
    pub outages: Vec<Range<u64>>,
    /// `(from_epoch, key_id)`: from the given handshake count on, sign with that key.
    pub key_schedule: Vec<(u64, String)>,
    /// Sign with this key while still presenting the active key's chain.
    pub signing_override: Option<Arc<Credential>>,
    pub mode: KeyExchangeMode,
    /// Maximum record payload, to exercise split records.
    pub fragment: usize,
    pub drop_all: bool,
}

impl ServerProfile {
    pub fn new(key: Arc<Credential>) -> ServerProfile {
        ServerProfile {
            active_key: key.id.clone(),
            keys: vec![key],
            clock_skew_secs: 0,
            outages: Vec::new(),
            key_schedule: Vec::new(),
            signing_override: None,
            mode: KeyExchangeMode::Dhe,
            fragment: 1 << 14,
            drop_all: false,
        }
    }

    pub fn with_key(mut self, key: Arc<Credential>) -> Self {
        if !self.keys.iter().any(|k| k.id == key.id) {
            self.keys.push(key);
        }
        self
    }

    pub fn with_skew(mut self, secs: i64) -> Self {
        self.clock_skew_secs = secs;
        self
    }

    fn key(&self, id: &str) -> Option<&Arc<Credential>> {
        self.keys.iter().find(|k| k.id == id)
    }

    /// Key in force at handshake `epoch`.
    pub fn key_at(&self, epoch: u64) -> Result<Arc<Credential>, TestbedError> {
        let id = self
            .key_schedule
            .iter()
            .filter(|(from, _)| *from <= epoch)
            .max_by_key(|(from, _)| *from)
            .map(|(_, id)| id.as_str())
            .unwrap_or(&self.active_key);
        self.key(id).cloned().ok_or_else(|| TestbedError::UnknownKey(id.to_string()))
    }

    fn in_outage(&self, now_ms: u64) -> bool {
        self.drop_all || self.outages.iter().any(|w| w.contains(&now_ms))
    }
}

/// One completed server flight.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HandshakeRecord {
    pub epoch: u64,
    pub key_id: String,
    pub key_hash: KeyHash,
    /// Unskewed clock when the flight was signed.
    pub true_time_ms: u64,
    pub stamped_secs: u32,
    pub client_random: [u8; 32],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloseKind {
    Reset,
    Fin,
    Timeout,
    Dropped,
}

/// What one TCP connection carried from the client.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConnectionRecord {
    pub client_hellos: usize,
    /// Bytes the client sent after receiving the server flight.
    pub post_flight_bytes: usize,
    pub post_flight_messages: usize,
    pub close: CloseKind,
}

pub enum ServerReply {
    Flight(Vec<u8>),
    Alert(Vec<u8>),
    Drop,
}

/// The network-independent part of a test server.
pub struct ServerCore {
    profile: Mutex<ServerProfile>,
    clock: SharedClock,
    epoch: AtomicU64,
    handshakes: Mutex<Vec<HandshakeRecord>>,
    connections: Mutex<Vec<ConnectionRecord>>,
}

impl ServerCore {
    pub fn new(profile: ServerProfile, clock: SharedClock) -> Arc<ServerCore> {
        Arc::new(ServerCore {
            profile: Mutex::new(profile),
            clock,
            epoch: AtomicU64::new(0),
            handshakes: Mutex::new(Vec::new()),
            connections: Mutex::new(Vec::new()),
        })
    }

    /// Answers a raw ClientHello record stream.
    pub fn respond(&self, hello_bytes: &[u8]) -> ServerReply {
        let hello = match ClientHello::decode(hello_bytes) {
            Ok(h) => h,
            Err(_) => return ServerReply::Alert(encode_alert(50)),
        };
        // The profile lock is held while the flight is built so a concurrent
        // key change never yields a chain from one key and a signature from another.
        let profile = self.profile.lock();
        let now_ms = self.clock.now_ms();
        if profile.in_outage(now_ms) {
            return ServerReply::Drop;
        }
        let Some(suite) = hello.cipher_suites.iter().copied().find(|s| DHE_RSA_SUITES.contains(s)) else {
            return ServerReply::Alert(encode_alert(40));
        };
        let offers = |s: SigScheme| hello.signature_algorithms.is_empty() || hello.signature_algorithms.contains(&s);
        if !offers(SigScheme::RSA_PKCS1_SHA256) {
            return ServerReply::Alert(encode_alert(40));
        }

        let epoch = self.epoch.fetch_add(1, Ordering::SeqCst);
        let key = match profile.key_at(epoch) {
            Ok(k) => k,
            Err(_) => return ServerReply::Alert(encode_alert(80)),
        };
        let stamped = (now_ms / 1000) as i64 + profile.clock_skew_secs;
        let mut random_bytes = [0u8; 28];
        rand::thread_rng().fill_bytes(&mut random_bytes);
        let server_random = RandomField {
            gmt_unix_time: stamped.clamp(0, u32::MAX as i64) as u32,
            random_bytes,
        };
        let hello_out = ServerHello {
            random: server_random,
            session_id: Vec::new(),
            cipher_suite: suite,
        };

        let bytes = match profile.mode {
            KeyExchangeMode::RsaOnly => ServerFlight {
                hello: ServerHello {
                    cipher_suite: 0x009C,
                    ..hello_out
                },
                chain: key.chain.clone(),
                key_exchange: placeholder_key_exchange(),
            }
            .encode_without_key_exchange(profile.fragment),
            KeyExchangeMode::Dhe => {
                let dh_params = ephemeral_dh().encode();
                let signed = assemble_signed_params(&hello.random, &server_random.to_bytes(), &dh_params)
                    .expect("fixed-size randoms");
                let signer = profile.signing_override.as_ref().unwrap_or(&key);
                let flight = ServerFlight {
                    hello: hello_out,
                    chain: key.chain.clone(),
                    key_exchange: ServerKeyExchangeMsg {
                        dh_params,
                        sig_scheme: SigScheme::RSA_PKCS1_SHA256,
                        signature: signer.sign(&signed),
                    },
                };
                flight.encode(profile.fragment)
            }
        };

        self.handshakes.lock().push(HandshakeRecord {
            epoch,
            key_id: key.id.clone(),
            key_hash: key.key_hash,
            true_time_ms: now_ms,
            stamped_secs: server_random.gmt_unix_time,
            client_random: hello.random,
        });
        ServerReply::Flight(bytes)
    }

    pub fn handshakes(&self) -> Vec<HandshakeRecord> {
        self.handshakes.lock().clone()
    }

    pub fn connections(&self) -> Vec<ConnectionRecord> {
        self.connections.lock().clone()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch.load(Ordering::SeqCst)
    }

    pub fn with_profile<R>(&self, f: impl FnOnce(&mut ServerProfile) -> R) -> R {
        f(&mut self.profile.lock())
    }

    /// From handshake `at_epoch` on, sign with `key_id`.
    pub fn script_key_change(&self, at_epoch: u64, key_id: &str) -> Result<(), TestbedError> {
        let mut p = self.profile.lock();
        if p.key(key_id).is_none() {
            return Err(TestbedError::UnknownKey(key_id.to_string()));
        }
        p.key_schedule.push((at_epoch, key_id.to_string()));
        Ok(())
    }
}

fn placeholder_key_exchange() -> ServerKeyExchangeMsg {
    ServerKeyExchangeMsg {
        dh_params: Vec::new(),
        sig_scheme: SigScheme(0),
        signature: Vec::new(),
    }
}

fn ephemeral_dh() -> DhParams {
    static P: OnceLock<BigUint> = OnceLock::new();
    let p = P.get_or_init(|| BigUint::parse_bytes(FFDHE2048_P.as_bytes(), 16).expect("prime"));
    let mut x = [0u8; 32];
    rand::thread_rng().fill_bytes(&mut x);
    let g = BigUint::from(2u32);
    let ys = g.modpow(&BigUint::from_bytes_be(&x), p);
    DhParams {
        p: p.to_bytes_be(),
        g: g.to_bytes_be(),
        ys: ys.to_bytes_be(),
    }
}

/// A running loopback server. Dropping the handle stops it.
pub struct TestServer {
    core: Arc<ServerCore>,
    addr: SocketAddr,
    task: JoinHandle<()>,
}

impl Drop for TestServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

impl std::ops::Deref for TestServer {
    type Target = ServerCore;

    fn deref(&self) -> &ServerCore {
        &self.core
    }
}

impl TestServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// `127.0.0.1:port`, usable wherever a domain is expected.
    pub fn domain(&self) -> String {
        self.addr.to_string()
    }

    pub fn core(&self) -> Arc<ServerCore> {
        self.core.clone()
    }
}

/// Binds a loopback listener and serves `profile` until the handle is dropped.
pub async fn spawn(profile: ServerProfile, clock: SharedClock) -> Result<TestServer, TestbedError> {
    let listener = TcpListener::bind("127.0.0.1:0")
        .await
        .map_err(|e| TestbedError::Io(e.to_string()))?;
    spawn_on(listener, profile, clock)
}

/// Serves `profile` on an already bound listener.
pub fn spawn_on(listener: TcpListener, profile: ServerProfile, clock: SharedClock) -> Result<TestServer, TestbedError> {
    if profile.key(&profile.active_key).is_none() {
        return Err(TestbedError::NoActiveKey);
    }
    let addr = listener.local_addr().map_err(|e| TestbedError::Io(e.to_string()))?;
    let core = ServerCore::new(profile, clock);
    let served = core.clone();
    let task = tokio::spawn(async move {
        while let Ok((stream, _)) = listener.accept().await {
            let core = served.clone();
            tokio::spawn(async move {
                let record = serve_connection(&core, stream).await;
                core.connections.lock().push(record);
            });
        }
    });
    Ok(TestServer { core, addr, task })
}

async fn serve_connection(core: &ServerCore, mut stream: TcpStream) -> ConnectionRecord {
    let dropped = ConnectionRecord {
        client_hellos: 0,
        post_flight_bytes: 0,
        post_flight_messages: 0,
        close: CloseKind::Dropped,
    };
    if core.profile.lock().in_outage(core.clock.now_ms()) {
        let _ = stream.set_zero_linger();
        return dropped;
    }

    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let reply = loop {
        let read = tokio::time::timeout(Duration::from_secs(5), stream.read(&mut chunk)).await;
        match read {
            Ok(Ok(n)) if n > 0 => buf.extend_from_slice(&chunk[..n]),
            _ => return ConnectionRecord { close: CloseKind::Timeout, ..dropped },
        }
        match ClientHello::decode(&buf) {
            Err(WireError::Truncated) if buf.len() < 64 * 1024 => continue,
            _ => break core.respond(&buf),
        }
    };
    let client_hellos = count_handshake_messages(&buf);
    match reply {
        ServerReply::Drop => {
            let _ = stream.set_zero_linger();
            return ConnectionRecord { client_hellos, ..dropped };
        }
        ServerReply::Alert(bytes) | ServerReply::Flight(bytes) => {
            if stream.write_all(&bytes).await.is_err() {
                return ConnectionRecord { client_hellos, close: CloseKind::Reset, ..dropped };
            }
        }
    }

    let mut after = Vec::new();
    let close = loop {
        match tokio::time::timeout(Duration::from_secs(2), stream.read(&mut chunk)).await {
            Ok(Ok(0)) => break CloseKind::Fin,
            Ok(Ok(n)) => after.extend_from_slice(&chunk[..n]),
            Ok(Err(e)) if e.kind() == std::io::ErrorKind::ConnectionReset => break CloseKind::Reset,
            Ok(Err(_)) => break CloseKind::Reset,
            Err(_) => break CloseKind::Timeout,
        }
    };
    ConnectionRecord {
        client_hellos,
        post_flight_bytes: after.len(),
        post_flight_messages: count_handshake_messages(&after),
        close,
    }
}

/// Probes test servers in memory, bypassing TCP but running the same
/// ClientHello encoding, flight decoding and verification as a real probe.
#[derive(Clone, Default)]
pub struct TestbedProber {
    servers: Arc<Mutex<BTreeMap<String, Arc<ServerCore>>>>,
    pub config: ProbeConfig,
}

impl TestbedProber {
    pub fn new() -> TestbedProber {
        TestbedProber::default()
    }

    pub fn register(&self, domain: &str, core: Arc<ServerCore>) {
        self.servers.lock().insert(domain.to_string(), core);
    }

    pub fn server(&self, domain: &str) -> Option<Arc<ServerCore>> {
        self.servers.lock().get(domain).cloned()
    }
}

impl Prober for TestbedProber {
    fn probe(
        &self,
        domain: &str,
        client_random: [u8; 32],
        _deadline: Duration,
    ) -> impl std::future::Future<Output = ProbeReport> + Send {
        let server = self.server(domain);
        let suites = self.config.cipher_suites.clone();
        let domain = domain.to_string();
        async move {
            let Some(core) = server else {
                return connect_failure(&domain, client_random, 0, "no such test server");
            };
            let started_ms = core.clock.now_ms();
            let hello = match ClientHello::new(client_random, suites).encode() {
                Ok(h) => h,
                Err(e) => return connect_failure(&domain, client_random, started_ms, &e.to_string()),
            };
            let bytes = match core.respond(&hello) {
                ServerReply::Drop => return connect_failure(&domain, client_random, started_ms, "connection dropped"),
                ServerReply::Alert(b) | ServerReply::Flight(b) => b,
            };
            let finished_ms = core.clock.now_ms();
            match decode_server_flight(&bytes) {
                Ok(flight) => evaluate_flight(&domain, client_random, flight, started_ms, finished_ms),
                Err(e) => {
                    let mut report = connect_failure(&domain, client_random, started_ms, "");
                    report.result.outcome = crate::probe::ProbeOutcome::ProtocolFailure;
                    report.result.diagnostic = Some(format!("wire: {e}"));
                    report.failure = Some(ProbeFailure::Wire(e));
                    report.finished_ms = finished_ms;
                    report
                }
            }
        }
    }
}

fn connect_failure(domain: &str, client_random: [u8; 32], started_ms: u64, why: &str) -> ProbeReport {
    ProbeReport {
        result: crate::probe::ValidationResult::failed(
            domain,
            client_random,
            started_ms,
            crate::probe::ProbeOutcome::ConnectFailure,
            format!("connect: {why}"),
        ),
        chain: None,
        failure: Some(ProbeFailure::Connect(why.to_string())),
        finished_ms: started_ms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;

    #[test]
    fn key_schedule_selects_latest_entry() {
        let a = credential("sched-a");
        let b = credential("sched-b");
        let mut p = ServerProfile::new(a.clone()).with_key(b.clone());
        p.key_schedule = vec![(5, "sched-b".into()), (7, "sched-a".into())];
        assert_eq!(p.key_at(0).unwrap().id, "sched-a");
        assert_eq!(p.key_at(5).unwrap().id, "sched-b");
        assert_eq!(p.key_at(6).unwrap().id, "sched-b");
        assert_eq!(p.key_at(7).unwrap().id, "sched-a");
    }

    #[test]
    fn unknown_key_change_is_rejected() {
        let core = ServerCore::new(ServerProfile::new(credential("sched-a")), VirtualClock::new(0));
        assert_eq!(
            core.script_key_change(1, "nope"),
            Err(TestbedError::UnknownKey("nope".into()))
        );
    }

    #[test]
    fn dh_share_is_below_prime() {
        let dh = ephemeral_dh();
        assert_eq!(dh.p.len(), 256);
        assert!(BigUint::from_bytes_be(&dh.ys) < BigUint::from_bytes_be(&dh.p));
    }

    #[test]
    fn credential_cache_is_stable() {
        let a = credential("cache-check");
        let b = credential("cache-check");
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(a.chain.certificates().len(), 2);
        assert_eq!(
            KeyHash::of_spki(&crate::crypto::certificate_spki(a.chain.leaf()).unwrap()),
            a.key_hash
        );
    }
}
