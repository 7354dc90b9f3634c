//! Evidence storage with certificate-chain deduplication.
//!
//! Records reference chains by hash. Each distinct chain is stored once in a
//! content-addressed chain store, no matter how many records point to it.
//!
//! On disk a store directory holds:
//!
//! * `chains.bin`: the chain store.
//! * `service-<id>.bin`: one append-only record log per service.
//!
//! Both files start with a 4-byte magic (`KNCS` or `KNVR`) and a version
//! byte, followed by frames. Each frame is a big-endian `u32` length and a
//! CBOR item. Chain frames hold a `CertificateChain`. Record frames hold a
//! `StoredValidation`.

use super::{Evidence, StoredValidation};
use crate::contract::ServiceId;
use crate::crypto::Digest32;
use crate::timesource::ChainLookup;
use crate::wire::CertificateChain;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

pub const STORE_VERSION: u8 = 1;
const CHAIN_MAGIC: &[u8; 4] = b"KNCS";
const RECORD_MAGIC: &[u8; 4] = b"KNVR";
const FRAME_HEADER: u64 = 4;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("record references chain {0} which is neither supplied nor stored")]
    UnresolvedChain(Digest32),
    #[error("service {service_id} already has a record for vid {vid}")]
    DuplicateVid { service_id: ServiceId, vid: u64 },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A stored record with every chain it references inlined, so it can be
/// verified without access to the store.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct AuditRecord {
    pub record: StoredValidation,
    pub chains: Vec<CertificateChain>,
}

/// Byte counts for one service's evidence.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct StorageReport {
    pub validations: u64,
    /// Size if every record carried its own chains.
    pub bytes_naive: u64,
    /// Record frames plus each referenced chain once.
    pub bytes_dedup: u64,
}

impl StorageReport {
    pub fn ratio(&self) -> f64 {
        if self.bytes_dedup == 0 {
            return 1.0;
        }
        self.bytes_naive as f64 / self.bytes_dedup as f64
    }
}

struct ChainEntry {
    chain: CertificateChain,
    refs: u64,
    frame_bytes: u64,
    /// CBOR size of the chain when inlined in an audit record.
    inline_bytes: u64,
}

#[derive(Default)]
struct ServiceLog {
    records: BTreeMap<u64, Arc<StoredValidation>>,
    frame_bytes: u64,
    naive_bytes: u64,
    chains: BTreeSet<Digest32>,
    file: Option<File>,
}

#[derive(Default)]
struct Inner {
    services: BTreeMap<ServiceId, ServiceLog>,
    chains: BTreeMap<Digest32, ChainEntry>,
    chain_file: Option<File>,
}

pub struct EvidenceStore {
    inner: RwLock<Inner>,
    dir: Option<PathBuf>,
}

impl Default for EvidenceStore {
    fn default() -> Self {
        EvidenceStore::in_memory()
    }
}

impl EvidenceStore {
    pub fn in_memory() -> EvidenceStore {
        EvidenceStore {
            inner: RwLock::new(Inner::default()),
            dir: None,
        }
    }

    /// Opens (or creates) a store directory and loads its contents.
    pub fn open(dir: impl AsRef<Path>) -> Result<EvidenceStore, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|source| StoreError::Io {
            path: dir.clone(),
            source,
        })?;
        let mut inner = Inner::default();

        let chain_path = dir.join("chains.bin");
        let (chain_file, frames) = open_log(&chain_path, CHAIN_MAGIC)?;
        for frame in frames {
            let chain: CertificateChain = decode(&chain_path, &frame)?;
            inner.chains.insert(
                chain.chain_hash(),
                ChainEntry {
                    chain,
                    refs: 0,
                    frame_bytes: FRAME_HEADER + frame.len() as u64,
                    inline_bytes: frame.len() as u64,
                },
            );
        }
        inner.chain_file = Some(chain_file);

        let entries = std::fs::read_dir(&dir).map_err(|source| StoreError::Io {
            path: dir.clone(),
            source,
        })?;
        let mut service_files = Vec::new();
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(id) = name
                .strip_prefix("service-")
                .and_then(|s| s.strip_suffix(".bin"))
                .and_then(|s| s.parse::<ServiceId>().ok())
            {
                service_files.push((id, entry.path()));
            }
        }
        service_files.sort();
        for (id, path) in service_files {
            let (file, frames) = open_log(&path, RECORD_MAGIC)?;
            let mut log = ServiceLog::default();
            for frame in frames {
                let record: StoredValidation = decode(&path, &frame)?;
                inner.index_record(&mut log, record, FRAME_HEADER + frame.len() as u64, &path)?;
            }
            log.file = Some(file);
            inner.services.insert(id, log);
        }
        Ok(EvidenceStore {
            inner: RwLock::new(inner),
            dir: Some(dir),
        })
    }

    /// Appends `record`. Chains it references must be in `chains` or already stored.
    pub fn append(&self, record: StoredValidation, chains: &[CertificateChain]) -> Result<(), StoreError> {
        let mut inner = self.inner.write();
        let inner = &mut *inner;
        if inner
            .services
            .get(&record.service_id)
            .is_some_and(|s| s.records.contains_key(&record.vid))
        {
            return Err(StoreError::DuplicateVid {
                service_id: record.service_id,
                vid: record.vid,
            });
        }
        let refs = record.evidence.chain_refs();
        for r in &refs {
            if !inner.chains.contains_key(r) && !chains.iter().any(|c| c.chain_hash() == *r) {
                return Err(StoreError::UnresolvedChain(*r));
            }
        }
        for chain in chains.iter().filter(|c| refs.contains(&c.chain_hash())) {
            let hash = chain.chain_hash();
            if inner.chains.contains_key(&hash) {
                continue;
            }
            let body = cbor(chain);
            if let Some(dir) = &self.dir {
                let path = dir.join("chains.bin");
                let file = inner.chain_file.as_mut().expect("open store has a chain file");
                write_frame(file, &path, &body)?;
            }
            inner.chains.insert(
                hash,
                ChainEntry {
                    chain: chain.clone(),
                    refs: 0,
                    frame_bytes: FRAME_HEADER + body.len() as u64,
                    inline_bytes: body.len() as u64,
                },
            );
        }

        let body = cbor(&record);
        let mut log = inner.services.remove(&record.service_id).unwrap_or_default();
        let result = (|| {
            if let Some(dir) = &self.dir {
                let path = dir.join(format!("service-{}.bin", record.service_id));
                if log.file.is_none() {
                    log.file = Some(open_log(&path, RECORD_MAGIC)?.0);
                }
                write_frame(log.file.as_mut().expect("just opened"), &path, &body)?;
            }
            let path = PathBuf::new();
            inner.index_record(&mut log, record.clone(), FRAME_HEADER + body.len() as u64, &path)
        })();
        inner.services.insert(record.service_id, log);
        result
    }

    pub fn get(&self, service_id: ServiceId, vid: u64) -> Option<Arc<StoredValidation>> {
        self.inner.read().services.get(&service_id)?.records.get(&vid).cloned()
    }

    /// The record for `vid` with its chains inlined.
    pub fn audit_record(&self, service_id: ServiceId, vid: u64) -> Option<AuditRecord> {
        let inner = self.inner.read();
        let record = inner.services.get(&service_id)?.records.get(&vid)?.clone();
        Some(inner.inline(&record))
    }

    pub fn records(&self, service_id: ServiceId) -> Vec<Arc<StoredValidation>> {
        self.inner
            .read()
            .services
            .get(&service_id)
            .map(|s| s.records.values().cloned().collect())
            .unwrap_or_default()
    }

    pub fn services(&self) -> Vec<ServiceId> {
        self.inner.read().services.keys().copied().collect()
    }

    pub fn latest_vid(&self, service_id: ServiceId) -> Option<u64> {
        self.inner
            .read()
            .services
            .get(&service_id)?
            .records
            .keys()
            .next_back()
            .copied()
    }

    pub fn chain(&self, hash: &Digest32) -> Option<CertificateChain> {
        self.inner.read().chains.get(hash).map(|e| e.chain.clone())
    }

    pub fn chain_count(&self) -> usize {
        self.inner.read().chains.len()
    }

    /// Number of records referencing `hash`.
    pub fn chain_refs(&self, hash: &Digest32) -> u64 {
        self.inner.read().chains.get(hash).map_or(0, |e| e.refs)
    }

    pub fn chain_store_bytes(&self) -> u64 {
        self.inner.read().chains.values().map(|e| e.frame_bytes).sum()
    }

    pub fn storage_report(&self, service_id: ServiceId) -> StorageReport {
        let inner = self.inner.read();
        let Some(log) = inner.services.get(&service_id) else {
            return StorageReport::default();
        };
        let chain_bytes: u64 = log.chains.iter().map(|h| inner.chains[h].frame_bytes).sum();
        StorageReport {
            validations: log.records.len() as u64,
            bytes_naive: log.naive_bytes,
            bytes_dedup: log.frame_bytes + chain_bytes,
        }
    }
}

impl ChainLookup for EvidenceStore {
    fn lookup(&self, chain_ref: &Digest32) -> Option<CertificateChain> {
        self.chain(chain_ref)
    }
}

impl Inner {
    fn inline(&self, record: &StoredValidation) -> AuditRecord {
        let mut chains: Vec<CertificateChain> = Vec::new();
        for r in record.evidence.chain_refs() {
            if !chains.iter().any(|c| c.chain_hash() == r) {
                chains.push(self.chains[&r].chain.clone());
            }
        }
        AuditRecord {
            record: record.clone(),
            chains,
        }
    }

    fn index_record(
        &mut self,
        log: &mut ServiceLog,
        record: StoredValidation,
        frame_bytes: u64,
        path: &Path,
    ) -> Result<(), StoreError> {
        let refs = record.evidence.chain_refs();
        let mut inline = 0;
        for r in &refs {
            let entry = self.chains.get_mut(r).ok_or_else(|| StoreError::Format {
                path: path.to_path_buf(),
                message: format!("vid {} references missing chain {r}", record.vid),
            })?;
            entry.refs += 1;
            inline += entry.inline_bytes;
            log.chains.insert(*r);
        }
        log.frame_bytes += frame_bytes;
        log.naive_bytes += frame_bytes + inline;
        log.records.insert(record.vid, Arc::new(record));
        Ok(())
    }
}

impl Evidence {
    /// Distinct chain references, in first-use order.
    pub fn chain_refs(&self) -> Vec<Digest32> {
        let mut out: Vec<Digest32> = Vec::new();
        let mut push = |d: Digest32| {
            if d != Digest32::ZERO && !out.contains(&d) {
                out.push(d);
            }
        };
        match self {
            Evidence::Probe(vr) => push(vr.chain_ref),
            Evidence::Timestamped(tv) => tv.chain_refs().into_iter().for_each(push),
            Evidence::TimeSourceFailure { main, .. } => {
                if let Some(vr) = main {
                    push(vr.chain_ref)
                }
            }
        }
        out
    }
}

fn cbor<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = Vec::new();
    ciborium::into_writer(value, &mut out).expect("in-memory CBOR encoding");
    out
}

fn decode<T: for<'de> Deserialize<'de>>(path: &Path, bytes: &[u8]) -> Result<T, StoreError> {
    ciborium::from_reader(bytes).map_err(|e| format_err(path, e))
}

fn format_err(path: &Path, e: impl std::fmt::Display) -> StoreError {
    StoreError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_frame(file: &mut File, path: &Path, body: &[u8]) -> Result<(), StoreError> {
    let io = |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut frame = Vec::with_capacity(body.len() + 4);
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(body);
    file.write_all(&frame).map_err(io)?;
    file.flush().map_err(io)
}

/// Opens a log for appending, writing the header if the file is new, and
/// returns the frames already present. A torn trailing frame is ignored.
fn open_log(path: &Path, magic: &[u8; 4]) -> Result<(File, Vec<Vec<u8>>), StoreError> {
    let io = |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = OpenOptions::new()
        .read(true)
        .append(true)
        .create(true)
        .open(path)
        .map_err(io)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(io)?;
    if bytes.is_empty() {
        let mut header = magic.to_vec();
        header.push(STORE_VERSION);
        file.write_all(&header).map_err(io)?;
        return Ok((file, Vec::new()));
    }
    if bytes.len() < 5 || &bytes[..4] != magic {
        return Err(format_err(path, "bad magic"));
    }
    if bytes[4] != STORE_VERSION {
        return Err(format_err(path, format!("unsupported version {}", bytes[4])));
    }
    let mut frames = Vec::new();
    let mut pos = 5;
    while pos + 4 <= bytes.len() {
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        if pos + 4 + len > bytes.len() {
            break;
        }
        frames.push(bytes[pos + 4..pos + 4 + len].to_vec());
        pos += 4 + len;
    }
    if pos < bytes.len() {
        file.set_len(pos as u64).map_err(io)?;
    }
    Ok((file, frames))
}
