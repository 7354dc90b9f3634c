//! TLS 1.2 record and handshake codec for the messages a half-handshake needs:
//! ClientHello, ServerHello, Certificate, ServerKeyExchange (DHE) and
//! ServerHelloDone, plus the `Random` and `signed_params` structures.
//!
//! Only what the notary touches is modelled. Unknown extensions are skipped on
//! decode and nothing past ServerHelloDone is ever parsed.

use crate::crypto::{sha256, Digest32, SigScheme};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TLS12: u16 = 0x0303;
/// Record-layer version used on ClientHello records for middlebox compatibility.
const HELLO_RECORD_VERSION: u16 = 0x0301;
const MAX_FRAGMENT: usize = 1 << 14;
const MAX_CIPHERTEXT: usize = MAX_FRAGMENT + 2048;

pub mod content_type {
    pub const CHANGE_CIPHER_SPEC: u8 = 20;
    pub const ALERT: u8 = 21;
    pub const HANDSHAKE: u8 = 22;
}

pub mod handshake_type {
    pub const CLIENT_HELLO: u8 = 1;
    pub const SERVER_HELLO: u8 = 2;
    pub const CERTIFICATE: u8 = 11;
    pub const SERVER_KEY_EXCHANGE: u8 = 12;
    pub const CERTIFICATE_REQUEST: u8 = 13;
    pub const SERVER_HELLO_DONE: u8 = 14;
    pub const CLIENT_KEY_EXCHANGE: u8 = 16;
}

mod ext {
    pub const SERVER_NAME: u16 = 0;
    pub const SIGNATURE_ALGORITHMS: u16 = 13;
    pub const RENEGOTIATION_INFO: u16 = 0xff01;
}

/// Cipher suites whose key exchange is DHE_RSA.
pub const DHE_RSA_SUITES: &[u16] = &[
    0x0016, 0x0033, 0x0039, 0x0045, 0x0067, 0x006B, 0x0088, 0x009E, 0x009F, 0xC07C, 0xC07D,
    0xC09E, 0xC09F, 0xC0A2, 0xC0A3, 0xCCAA,
];

/// Cipher suites whose key exchange is DHE_DSS.
pub const DHE_DSS_SUITES: &[u16] = &[
    0x0013, 0x0032, 0x0038, 0x0040, 0x0044, 0x0087, 0x006A, 0x00A2, 0x00A3,
];

/// Suites offered by default. DSS is left out because DSA signatures cannot be
/// verified by this crate.
pub const DEFAULT_SUITES: &[u16] = &[0x009E, 0x009F, 0xCCAA, 0x0067, 0x006B, 0x0033, 0x0039];

pub fn is_dhe_suite(suite: u16) -> bool {
    DHE_RSA_SUITES.contains(&suite) || DHE_DSS_SUITES.contains(&suite)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("input truncated")]
    Truncated,
    #[error("malformed length in {0}")]
    MalformedLength(&'static str),
    #[error("unexpected message: expected {expected}, found {found}")]
    UnexpectedMessageType { expected: &'static str, found: String },
    #[error("alert received (level {level}, description {description})")]
    Alert { level: u8, description: u8 },
    #[error("cipher suite list is empty")]
    EmptyCipherSuites,
    #[error("cipher suite {0:#06x} is not a DHE_RSA or DHE_DSS suite")]
    NonDheSuite(u16),
    #[error("random must be exactly 32 bytes, got {0}")]
    BadRandomLength(usize),
    #[error("certificate chain is empty")]
    EmptyChain,
    #[error("{0} must not be empty")]
    Empty(&'static str),
}

/// The `Random` structure: big-endian `gmt_unix_time` then 28 opaque bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct RandomField {
    pub gmt_unix_time: u32,
    pub random_bytes: [u8; 28],
}

impl RandomField {
    pub fn from_bytes(b: &[u8; 32]) -> RandomField {
        let mut random_bytes = [0u8; 28];
        random_bytes.copy_from_slice(&b[4..]);
        RandomField {
            gmt_unix_time: u32::from_be_bytes([b[0], b[1], b[2], b[3]]),
            random_bytes,
        }
    }

    pub fn from_slice(b: &[u8]) -> Result<RandomField, WireError> {
        let arr: &[u8; 32] = b.try_into().map_err(|_| WireError::BadRandomLength(b.len()))?;
        Ok(Self::from_bytes(arr))
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        out[..4].copy_from_slice(&self.gmt_unix_time.to_be_bytes());
        out[4..].copy_from_slice(&self.random_bytes);
        out
    }
}

impl Serialize for RandomField {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        crate::encoding::bytes32::serialize(&self.to_bytes(), ser)
    }
}

impl<'de> Deserialize<'de> for RandomField {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        crate::encoding::bytes32::deserialize(de).map(|b| RandomField::from_bytes(&b))
    }
}

/// Finite-field DH parameters as they appear inside ServerKeyExchange.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct DhParams {
    pub p: Vec<u8>,
    pub g: Vec<u8>,
    pub ys: Vec<u8>,
}

impl DhParams {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + self.p.len() + self.g.len() + self.ys.len());
        put_vec16(&mut out, &self.p);
        put_vec16(&mut out, &self.g);
        put_vec16(&mut out, &self.ys);
        out
    }

    /// Parses `ServerDHParams` from the front of `buf`, returning the number of
    /// bytes consumed.
    pub fn parse(buf: &[u8]) -> Result<(DhParams, usize), WireError> {
        let mut r = Reader::new(buf, WireError::MalformedLength("ServerDHParams"));
        let p = r.vec16()?.to_vec();
        let g = r.vec16()?.to_vec();
        let ys = r.vec16()?.to_vec();
        if p.is_empty() || g.is_empty() || ys.is_empty() {
            return Err(WireError::MalformedLength("ServerDHParams"));
        }
        Ok((DhParams { p, g, ys }, r.pos))
    }
}

/// The byte string a server signs in ServerKeyExchange:
/// `client_random ++ server_random ++ ServerDHParams`, with no extra framing.
pub fn assemble_signed_params(
    client_random: &[u8],
    server_random: &[u8],
    dh_params: &[u8],
) -> Result<Vec<u8>, WireError> {
    if client_random.len() != 32 {
        return Err(WireError::BadRandomLength(client_random.len()));
    }
    if server_random.len() != 32 {
        return Err(WireError::BadRandomLength(server_random.len()));
    }
    let mut out = Vec::with_capacity(64 + dh_params.len());
    out.extend_from_slice(client_random);
    out.extend_from_slice(server_random);
    out.extend_from_slice(dh_params);
    Ok(out)
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ClientHello {
    pub random: [u8; 32],
    pub session_id: Vec<u8>,
    pub cipher_suites: Vec<u16>,
    pub server_name: Option<String>,
    pub signature_algorithms: Vec<SigScheme>,
}

impl ClientHello {
    pub fn new(random: [u8; 32], cipher_suites: Vec<u16>) -> ClientHello {
        ClientHello {
            random,
            session_id: Vec::new(),
            cipher_suites,
            server_name: None,
            signature_algorithms: SigScheme::SUPPORTED.to_vec(),
        }
    }

    /// Encodes the hello as a single handshake record.
    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        if self.cipher_suites.is_empty() {
            return Err(WireError::EmptyCipherSuites);
        }
        if let Some(bad) = self.cipher_suites.iter().find(|s| !is_dhe_suite(**s)) {
            return Err(WireError::NonDheSuite(*bad));
        }
        if self.session_id.len() > 32 {
            return Err(WireError::MalformedLength("session_id"));
        }

        let mut body = Vec::with_capacity(128);
        body.extend_from_slice(&TLS12.to_be_bytes());
        body.extend_from_slice(&self.random);
        put_vec8(&mut body, &self.session_id);
        let suites: Vec<u8> = self.cipher_suites.iter().flat_map(|s| s.to_be_bytes()).collect();
        put_vec16(&mut body, &suites);
        put_vec8(&mut body, &[0]);

        let mut exts = Vec::new();
        if let Some(name) = &self.server_name {
            let mut entry = vec![0u8];
            put_vec16(&mut entry, name.as_bytes());
            let mut list = Vec::new();
            put_vec16(&mut list, &entry);
            put_extension(&mut exts, ext::SERVER_NAME, &list);
        }
        if !self.signature_algorithms.is_empty() {
            let algs: Vec<u8> = self
                .signature_algorithms
                .iter()
                .flat_map(|s| s.0.to_be_bytes())
                .collect();
            let mut data = Vec::new();
            put_vec16(&mut data, &algs);
            put_extension(&mut exts, ext::SIGNATURE_ALGORITHMS, &data);
        }
        put_extension(&mut exts, ext::RENEGOTIATION_INFO, &[0]);
        put_vec16(&mut body, &exts);

        let msg = handshake_message(handshake_type::CLIENT_HELLO, &body);
        Ok(write_records(content_type::HANDSHAKE, HELLO_RECORD_VERSION, &msg, MAX_FRAGMENT))
    }

    /// Decodes a ClientHello from the start of a record stream.
    pub fn decode(bytes: &[u8]) -> Result<ClientHello, WireError> {
        let hs = collect_handshake_bytes(bytes)?;
        let mut stream = Reader::new(&hs, WireError::Truncated);
        let (ty, body) = stream.handshake()?;
        if ty != handshake_type::CLIENT_HELLO {
            return Err(unexpected("ClientHello", ty));
        }
        let mut r = Reader::new(body, WireError::MalformedLength("ClientHello"));
        let version = r.u16()?;
        if version != TLS12 {
            return Err(WireError::UnexpectedMessageType {
                expected: "TLS 1.2 ClientHello",
                found: format!("version {version:#06x}"),
            });
        }
        let random: [u8; 32] = r.bytes(32)?.try_into().expect("32 bytes");
        let session_id = r.vec8()?.to_vec();
        let suites = r.vec16()?;
        if suites.len() % 2 != 0 {
            return Err(WireError::MalformedLength("cipher_suites"));
        }
        let cipher_suites = suites
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect();
        r.vec8()?;

        let mut server_name = None;
        let mut signature_algorithms = Vec::new();
        if !r.is_empty() {
            let exts = r.vec16()?;
            let mut er = Reader::new(exts, WireError::MalformedLength("extensions"));
            while !er.is_empty() {
                let ty = er.u16()?;
                let data = er.vec16()?;
                let mut dr = Reader::new(data, WireError::MalformedLength("extension"));
                match ty {
                    ext::SERVER_NAME => {
                        let list = dr.vec16()?;
                        let mut lr = Reader::new(list, WireError::MalformedLength("server_name"));
                        while !lr.is_empty() {
                            let name_type = lr.u8()?;
                            let name = lr.vec16()?;
                            if name_type == 0 && server_name.is_none() {
                                server_name = Some(String::from_utf8_lossy(name).into_owned());
                            }
                        }
                    }
                    ext::SIGNATURE_ALGORITHMS => {
                        let algs = dr.vec16()?;
                        if algs.len() % 2 != 0 {
                            return Err(WireError::MalformedLength("signature_algorithms"));
                        }
                        signature_algorithms = algs
                            .chunks_exact(2)
                            .map(|c| SigScheme(u16::from_be_bytes([c[0], c[1]])))
                            .collect();
                    }
                    _ => {}
                }
            }
        }

        Ok(ClientHello {
            random,
            session_id,
            cipher_suites,
            server_name,
            signature_algorithms,
        })
    }
}

/// Encodes a ClientHello carrying `random` verbatim and offering `cipher_suites`.
pub fn encode_client_hello(random: &[u8], cipher_suites: &[u16]) -> Result<Vec<u8>, WireError> {
    let random: [u8; 32] = random
        .try_into()
        .map_err(|_| WireError::BadRandomLength(random.len()))?;
    ClientHello::new(random, cipher_suites.to_vec()).encode()
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ServerHello {
    pub random: RandomField,
    pub session_id: Vec<u8>,
    pub cipher_suite: u16,
}

impl ServerHello {
    fn encode_body(&self) -> Vec<u8> {
        let mut body = Vec::with_capacity(72);
        body.extend_from_slice(&TLS12.to_be_bytes());
        body.extend_from_slice(&self.random.to_bytes());
        put_vec8(&mut body, &self.session_id);
        body.extend_from_slice(&self.cipher_suite.to_be_bytes());
        body.push(0);
        body
    }

    fn decode_body(body: &[u8]) -> Result<ServerHello, WireError> {
        let mut r = Reader::new(body, WireError::MalformedLength("ServerHello"));
        let version = r.u16()?;
        if version != TLS12 {
            return Err(WireError::UnexpectedMessageType {
                expected: "TLS 1.2 ServerHello",
                found: format!("version {version:#06x}"),
            });
        }
        let random = RandomField::from_slice(r.bytes(32)?)?;
        let session_id = r.vec8()?.to_vec();
        let cipher_suite = r.u16()?;
        r.u8()?;
        if !r.is_empty() {
            r.vec16()?;
        }
        Ok(ServerHello {
            random,
            session_id,
            cipher_suite,
        })
    }
}

/// An ordered, non-empty list of DER certificates (leaf first) and the
/// SHA-256 digest of their concatenation.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(try_from = "ChainRepr", into = "ChainRepr")]
pub struct CertificateChain {
    certificates: Vec<Vec<u8>>,
    chain_hash: Digest32,
}

#[derive(Serialize, Deserialize)]
struct ChainRepr {
    #[serde(with = "crate::encoding::bytes_list")]
    certificates: Vec<Vec<u8>>,
}

impl TryFrom<ChainRepr> for CertificateChain {
    type Error = WireError;

    fn try_from(r: ChainRepr) -> Result<Self, WireError> {
        CertificateChain::new(r.certificates)
    }
}

impl From<CertificateChain> for ChainRepr {
    fn from(c: CertificateChain) -> ChainRepr {
        ChainRepr {
            certificates: c.certificates,
        }
    }
}

impl CertificateChain {
    pub fn new(certificates: Vec<Vec<u8>>) -> Result<CertificateChain, WireError> {
        if certificates.is_empty() {
            return Err(WireError::EmptyChain);
        }
        let chain_hash = Self::hash_of(&certificates);
        Ok(CertificateChain {
            certificates,
            chain_hash,
        })
    }

    pub fn hash_of(certificates: &[Vec<u8>]) -> Digest32 {
        sha256(&certificates.concat())
    }

    pub fn certificates(&self) -> &[Vec<u8>] {
        &self.certificates
    }

    pub fn leaf(&self) -> &[u8] {
        &self.certificates[0]
    }

    pub fn chain_hash(&self) -> Digest32 {
        self.chain_hash
    }

    /// Total DER bytes across all certificates.
    pub fn der_len(&self) -> usize {
        self.certificates.iter().map(Vec::len).sum()
    }

    fn encode_body(&self) -> Vec<u8> {
        let mut list = Vec::with_capacity(self.der_len() + 3 * self.certificates.len());
        for cert in &self.certificates {
            put_vec24(&mut list, cert);
        }
        let mut body = Vec::with_capacity(list.len() + 3);
        put_vec24(&mut body, &list);
        body
    }

    fn decode_body(body: &[u8]) -> Result<CertificateChain, WireError> {
        let mut r = Reader::new(body, WireError::MalformedLength("Certificate"));
        let list = r.vec24()?;
        let mut lr = Reader::new(list, WireError::MalformedLength("certificate_list"));
        let mut certs = Vec::new();
        while !lr.is_empty() {
            certs.push(lr.vec24()?.to_vec());
        }
        CertificateChain::new(certs)
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ServerKeyExchangeMsg {
    /// Raw `ServerDHParams` bytes exactly as received.
    pub dh_params: Vec<u8>,
    pub sig_scheme: SigScheme,
    pub signature: Vec<u8>,
}

impl ServerKeyExchangeMsg {
    fn encode_body(&self) -> Vec<u8> {
        let mut body = Vec::with_capacity(self.dh_params.len() + 4 + self.signature.len());
        body.extend_from_slice(&self.dh_params);
        body.extend_from_slice(&self.sig_scheme.0.to_be_bytes());
        put_vec16(&mut body, &self.signature);
        body
    }

    fn decode_body(body: &[u8]) -> Result<ServerKeyExchangeMsg, WireError> {
        let (_, used) = DhParams::parse(body)?;
        let mut r = Reader::new(&body[used..], WireError::MalformedLength("ServerKeyExchange"));
        let sig_scheme = SigScheme(r.u16()?);
        let signature = r.vec16()?.to_vec();
        if signature.is_empty() {
            return Err(WireError::Empty("signature"));
        }
        Ok(ServerKeyExchangeMsg {
            dh_params: body[..used].to_vec(),
            sig_scheme,
            signature,
        })
    }
}

/// The server's first flight, up to and including ServerHelloDone.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ServerFlight {
    pub hello: ServerHello,
    pub chain: CertificateChain,
    pub key_exchange: ServerKeyExchangeMsg,
}

impl ServerFlight {
    /// Encodes the flight, packing handshake messages into records of at most
    /// `fragment` bytes each.
    pub fn encode(&self, fragment: usize) -> Vec<u8> {
        let mut hs = handshake_message(handshake_type::SERVER_HELLO, &self.hello.encode_body());
        hs.extend(handshake_message(handshake_type::CERTIFICATE, &self.chain.encode_body()));
        hs.extend(handshake_message(
            handshake_type::SERVER_KEY_EXCHANGE,
            &self.key_exchange.encode_body(),
        ));
        hs.extend(handshake_message(handshake_type::SERVER_HELLO_DONE, &[]));
        write_records(content_type::HANDSHAKE, TLS12, &hs, fragment.clamp(1, MAX_FRAGMENT))
    }

    /// Encodes the flight of an RSA key-transport server, which has no
    /// ServerKeyExchange. `key_exchange` is ignored.
    pub fn encode_without_key_exchange(&self, fragment: usize) -> Vec<u8> {
        let mut hs = handshake_message(handshake_type::SERVER_HELLO, &self.hello.encode_body());
        hs.extend(handshake_message(handshake_type::CERTIFICATE, &self.chain.encode_body()));
        hs.extend(handshake_message(handshake_type::SERVER_HELLO_DONE, &[]));
        write_records(content_type::HANDSHAKE, TLS12, &hs, fragment.clamp(1, MAX_FRAGMENT))
    }
}

/// Parses the server flight from a record stream.
///
/// Returns `Truncated` while the stream does not yet contain ServerHelloDone,
/// so callers reading from a socket can retry with more bytes.
pub fn decode_server_flight(bytes: &[u8]) -> Result<ServerFlight, WireError> {
    let hs = collect_handshake_bytes(bytes)?;
    let mut stream = Reader::new(&hs, WireError::Truncated);

    let (ty, body) = stream.handshake()?;
    if ty != handshake_type::SERVER_HELLO {
        return Err(unexpected("ServerHello", ty));
    }
    let hello = ServerHello::decode_body(body)?;

    let (ty, body) = stream.handshake()?;
    if ty != handshake_type::CERTIFICATE {
        return Err(unexpected("Certificate", ty));
    }
    let chain = CertificateChain::decode_body(body)?;

    let (ty, body) = stream.handshake()?;
    if ty != handshake_type::SERVER_KEY_EXCHANGE {
        return Err(unexpected("ServerKeyExchange", ty));
    }
    if !is_dhe_suite(hello.cipher_suite) {
        return Err(WireError::UnexpectedMessageType {
            expected: "DHE ServerKeyExchange",
            found: format!("key exchange for suite {:#06x}", hello.cipher_suite),
        });
    }
    let key_exchange = ServerKeyExchangeMsg::decode_body(body)?;

    loop {
        let (ty, _) = stream.handshake()?;
        match ty {
            handshake_type::CERTIFICATE_REQUEST => continue,
            handshake_type::SERVER_HELLO_DONE => break,
            other => return Err(unexpected("ServerHelloDone", other)),
        }
    }

    Ok(ServerFlight {
        hello,
        chain,
        key_exchange,
    })
}

/// Counts complete handshake messages in a client-to-server record stream.
/// Used by the test server to check that nothing follows the ClientHello.
pub fn count_handshake_messages(bytes: &[u8]) -> usize {
    let Ok(hs) = collect_handshake_bytes_lenient(bytes) else {
        return 0;
    };
    let mut r = Reader::new(&hs, WireError::Truncated);
    let mut n = 0;
    while r.handshake().is_ok() {
        n += 1;
    }
    n
}

/// Encodes a fatal alert record.
pub fn encode_alert(description: u8) -> Vec<u8> {
    write_records(content_type::ALERT, TLS12, &[2, description], MAX_FRAGMENT)
}

fn unexpected(expected: &'static str, found: u8) -> WireError {
    WireError::UnexpectedMessageType {
        expected,
        found: format!("handshake type {found}"),
    }
}

/// Concatenates handshake record payloads. A trailing partial record yields
/// `Truncated`; alerts and other content types are errors.
fn collect_handshake_bytes(bytes: &[u8]) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(bytes.len());
    let mut r = Reader::new(bytes, WireError::Truncated);
    while !r.is_empty() {
        let ty = r.u8()?;
        let version = r.u16()?;
        if version >> 8 != 0x03 {
            return Err(WireError::UnexpectedMessageType {
                expected: "TLS record",
                found: format!("record version {version:#06x}"),
            });
        }
        let len = r.u16()? as usize;
        if len > MAX_CIPHERTEXT {
            return Err(WireError::MalformedLength("record"));
        }
        let payload = r.bytes(len)?;
        match ty {
            content_type::HANDSHAKE => out.extend_from_slice(payload),
            content_type::ALERT => {
                if payload.len() != 2 {
                    return Err(WireError::MalformedLength("alert"));
                }
                return Err(WireError::Alert {
                    level: payload[0],
                    description: payload[1],
                });
            }
            other => {
                return Err(WireError::UnexpectedMessageType {
                    expected: "handshake record",
                    found: format!("content type {other}"),
                })
            }
        }
    }
    Ok(out)
}

fn collect_handshake_bytes_lenient(bytes: &[u8]) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    let mut r = Reader::new(bytes, WireError::Truncated);
    while !r.is_empty() {
        let ty = r.u8()?;
        r.u16()?;
        let len = r.u16()? as usize;
        let payload = r.bytes(len)?;
        if ty == content_type::HANDSHAKE {
            out.extend_from_slice(payload);
        }
    }
    Ok(out)
}

fn handshake_message(ty: u8, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 4);
    out.push(ty);
    put_vec24(&mut out, body);
    out
}

fn write_records(ty: u8, version: u16, payload: &[u8], fragment: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 5 * (payload.len() / fragment + 1));
    for chunk in payload.chunks(fragment) {
        out.push(ty);
        out.extend_from_slice(&version.to_be_bytes());
        out.extend_from_slice(&(chunk.len() as u16).to_be_bytes());
        out.extend_from_slice(chunk);
    }
    out
}

fn put_vec8(out: &mut Vec<u8>, data: &[u8]) {
    out.push(data.len() as u8);
    out.extend_from_slice(data);
}

fn put_vec16(out: &mut Vec<u8>, data: &[u8]) {
    out.extend_from_slice(&(data.len() as u16).to_be_bytes());
    out.extend_from_slice(data);
}

fn put_vec24(out: &mut Vec<u8>, data: &[u8]) {
    let len = data.len() as u32;
    out.extend_from_slice(&len.to_be_bytes()[1..]);
    out.extend_from_slice(data);
}

fn put_extension(out: &mut Vec<u8>, ty: u16, data: &[u8]) {
    out.extend_from_slice(&ty.to_be_bytes());
    put_vec16(out, data);
}

/// Bounds-checked cursor. `short` is the error reported when a read would run
/// past the end: `Truncated` for streams, `MalformedLength` inside a message
/// whose declared length is already known to be complete.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    short: WireError,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], short: WireError) -> Self {
        Reader { buf, pos: 0, short }
    }

    fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or_else(|| self.short.clone())?;
        if end > self.buf.len() {
            return Err(self.short.clone());
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        let b = self.bytes(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u24(&mut self) -> Result<usize, WireError> {
        let b = self.bytes(3)?;
        Ok(((b[0] as usize) << 16) | ((b[1] as usize) << 8) | b[2] as usize)
    }

    fn vec8(&mut self) -> Result<&'a [u8], WireError> {
        let n = self.u8()? as usize;
        self.bytes(n)
    }

    fn vec16(&mut self) -> Result<&'a [u8], WireError> {
        let n = self.u16()? as usize;
        self.bytes(n)
    }

    fn vec24(&mut self) -> Result<&'a [u8], WireError> {
        let n = self.u24()?;
        self.bytes(n)
    }

    fn handshake(&mut self) -> Result<(u8, &'a [u8]), WireError> {
        let ty = self.u8()?;
        let body = self.vec24()?;
        Ok((ty, body))
    }
}
