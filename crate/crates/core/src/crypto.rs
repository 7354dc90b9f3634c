//! Digests, key identities and signature verification for handshake evidence.

use rsa::pkcs8::DecodePublicKey;
use rsa::signature::Verifier;
use rsa::RsaPublicKey;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256, Sha384, Sha512};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;
use x509_cert::der::{Decode, Encode};

/// A 32-byte SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest32(pub [u8; 32]);

impl Digest32 {
    pub const ZERO: Digest32 = Digest32([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// First four hex digits followed by an ellipsis, for compact display.
    pub fn short(&self) -> String {
        format!("{}…", &self.to_hex()[..4])
    }
}

impl fmt::Debug for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest32({})", self.to_hex())
    }
}

impl fmt::Display for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for Digest32 {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Digest32(out))
    }
}

impl Serialize for Digest32 {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        crate::encoding::bytes32::serialize(&self.0, ser)
    }
}

impl<'de> Deserialize<'de> for Digest32 {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        crate::encoding::bytes32::deserialize(de).map(Digest32)
    }
}

pub fn sha256(data: &[u8]) -> Digest32 {
    Digest32(Sha256::digest(data).into())
}

/// Hash of a DER-encoded SubjectPublicKeyInfo. Whitelists are sets of these.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeyHash(pub Digest32);

impl KeyHash {
    pub fn of_spki(spki_der: &[u8]) -> KeyHash {
        KeyHash(sha256(spki_der))
    }

    pub fn short(&self) -> String {
        self.0.short()
    }
}

impl fmt::Debug for KeyHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyHash({})", self.0.to_hex())
    }
}

impl fmt::Display for KeyHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

impl FromStr for KeyHash {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(KeyHash)
    }
}

/// TLS 1.2 SignatureAndHashAlgorithm, packed as `hash << 8 | signature`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SigScheme(pub u16);

impl SigScheme {
    pub const RSA_PKCS1_SHA1: SigScheme = SigScheme(0x0201);
    pub const RSA_PKCS1_SHA256: SigScheme = SigScheme(0x0401);
    pub const RSA_PKCS1_SHA384: SigScheme = SigScheme(0x0501);
    pub const RSA_PKCS1_SHA512: SigScheme = SigScheme(0x0601);
    pub const RSA_PSS_RSAE_SHA256: SigScheme = SigScheme(0x0804);
    pub const RSA_PSS_RSAE_SHA384: SigScheme = SigScheme(0x0805);
    pub const RSA_PSS_RSAE_SHA512: SigScheme = SigScheme(0x0806);
    pub const DSA_SHA256: SigScheme = SigScheme(0x0402);
    pub const ECDSA_SHA256: SigScheme = SigScheme(0x0403);

    /// Schemes `verify_signature` can check, in client preference order.
    pub const SUPPORTED: [SigScheme; 7] = [
        SigScheme::RSA_PKCS1_SHA256,
        SigScheme::RSA_PSS_RSAE_SHA256,
        SigScheme::RSA_PKCS1_SHA384,
        SigScheme::RSA_PSS_RSAE_SHA384,
        SigScheme::RSA_PKCS1_SHA512,
        SigScheme::RSA_PSS_RSAE_SHA512,
        SigScheme::RSA_PKCS1_SHA1,
    ];

    pub fn is_supported(self) -> bool {
        Self::SUPPORTED.contains(&self)
    }
}

impl fmt::Debug for SigScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SigScheme({:#06x})", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VerifyError {
    #[error("unsupported signature scheme {0:?}")]
    UnsupportedSignatureScheme(SigScheme),
    #[error("unsupported public key: {0}")]
    UnsupportedKey(String),
    #[error("malformed certificate: {0}")]
    BadCertificate(String),
}

/// Extracts the DER-encoded SubjectPublicKeyInfo from a DER certificate.
pub fn certificate_spki(cert_der: &[u8]) -> Result<Vec<u8>, VerifyError> {
    let cert = x509_cert::Certificate::from_der(cert_der)
        .map_err(|e| VerifyError::BadCertificate(e.to_string()))?;
    cert.tbs_certificate
        .subject_public_key_info
        .to_der()
        .map_err(|e| VerifyError::BadCertificate(e.to_string()))
}

/// Checks `signature` over `message` under the key in `spki_der`.
///
/// `Ok(false)` means the signature is wrong; `Err` means the combination of
/// key type and scheme cannot be checked at all.
pub fn verify_signature(
    spki_der: &[u8],
    scheme: SigScheme,
    message: &[u8],
    signature: &[u8],
) -> Result<bool, VerifyError> {
    if !scheme.is_supported() {
        return Err(VerifyError::UnsupportedSignatureScheme(scheme));
    }
    let key = RsaPublicKey::from_public_key_der(spki_der)
        .map_err(|e| VerifyError::UnsupportedKey(e.to_string()))?;

    macro_rules! check {
        ($module:ident, $hash:ty) => {{
            let Ok(sig) = rsa::$module::Signature::try_from(signature) else {
                return Ok(false);
            };
            rsa::$module::VerifyingKey::<$hash>::new(key)
                .verify(message, &sig)
                .is_ok()
        }};
    }

    Ok(match scheme {
        SigScheme::RSA_PKCS1_SHA1 => check!(pkcs1v15, sha1::Sha1),
        SigScheme::RSA_PKCS1_SHA256 => check!(pkcs1v15, Sha256),
        SigScheme::RSA_PKCS1_SHA384 => check!(pkcs1v15, Sha384),
        SigScheme::RSA_PKCS1_SHA512 => check!(pkcs1v15, Sha512),
        SigScheme::RSA_PSS_RSAE_SHA256 => check!(pss, Sha256),
        SigScheme::RSA_PSS_RSAE_SHA384 => check!(pss, Sha384),
        SigScheme::RSA_PSS_RSAE_SHA512 => check!(pss, Sha512),
        other => return Err(VerifyError::UnsupportedSignatureScheme(other)),
    })
}
