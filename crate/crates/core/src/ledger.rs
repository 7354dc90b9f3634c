//! A deterministic, block-ordered ledger running the notary contract.
//!
//! Transactions are queued by `submit` and executed only by `mine`, in
//! submission order. Block height is the contract clock. Readers get immutable
//! snapshots and never block writers.
//!
//! A ledger may be backed by a log file with one JSON object per line:
//!
//! ```text
//! {"entry":"genesis","contract":{..},"accounts":{"alice":500}}
//! {"entry":"mint","account":"alice","amount":100}
//! {"entry":"submit","id":0,"tx":{"sender":"alice","value":100,"call":{"method":"request",..}}}
//! {"entry":"block","height":1,"parent":0,"tx_ids":[0]}
//! ```
//!
//! Replaying a log from the top reproduces the ledger exactly. Several
//! processes may share one log: every mutation takes an exclusive file lock
//! and first catches up with lines appended by others.

use crate::contract::{Abort, AccountId, Call, ContractConfig, ContractState, Effects, Event};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

pub type TxId = u64;

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct LedgerTransaction {
    pub sender: AccountId,
    pub value: u64,
    pub call: Call,
}

impl LedgerTransaction {
    pub fn new(sender: impl Into<AccountId>, value: u64, call: Call) -> LedgerTransaction {
        LedgerTransaction {
            sender: sender.into(),
            value,
            call,
        }
    }
}

impl From<String> for AccountId {
    fn from(s: String) -> Self {
        AccountId(s)
    }
}

impl From<&AccountId> for AccountId {
    fn from(a: &AccountId) -> Self {
        a.clone()
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum TxOutcome {
    Executed { events: Vec<Event> },
    Aborted { reason: Abort },
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Receipt {
    pub tx_id: TxId,
    pub height: u64,
    pub index: usize,
    pub outcome: TxOutcome,
}

impl Receipt {
    pub fn events(&self) -> &[Event] {
        match &self.outcome {
            TxOutcome::Executed { events } => events,
            TxOutcome::Aborted { .. } => &[],
        }
    }

    pub fn abort(&self) -> Option<&Abort> {
        match &self.outcome {
            TxOutcome::Aborted { reason } => Some(reason),
            TxOutcome::Executed { .. } => None,
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub parent: Option<u64>,
    pub transactions: Vec<(TxId, LedgerTransaction)>,
    pub receipts: Vec<Receipt>,
    /// Events from end-of-block housekeeping.
    pub block_events: Vec<Event>,
}

/// Ledger state as of the latest mined block.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Snapshot {
    pub height: u64,
    pub accounts: BTreeMap<AccountId, u64>,
    pub contract: ContractState,
}

impl Snapshot {
    pub fn balance(&self, account: &AccountId) -> u64 {
        self.accounts.get(account).copied().unwrap_or(0)
    }

    /// Sum of all balances plus value held by the contract.
    pub fn total_supply(&self) -> u64 {
        self.accounts.values().sum::<u64>() + self.contract.escrow
    }

    /// Canonical bytes: identical states give identical bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("snapshot serializes")
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Genesis {
    pub contract: ContractConfig,
    pub accounts: BTreeMap<AccountId, u64>,
}

impl Genesis {
    pub fn new(contract: ContractConfig) -> Genesis {
        let mut accounts = BTreeMap::new();
        accounts.insert(contract.owner.clone(), 0);
        Genesis { contract, accounts }
    }

    pub fn with_account(mut self, account: impl Into<AccountId>, balance: u64) -> Genesis {
        self.accounts.insert(account.into(), balance);
        self
    }
}

/// One line of the block log.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "snake_case")]
pub enum LogEntry {
    Genesis(Genesis),
    Mint { account: AccountId, amount: u64 },
    Submit { id: TxId, tx: LedgerTransaction },
    Block { height: u64, parent: Option<u64>, tx_ids: Vec<TxId> },
}

/// A contract event with its position on the ledger.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub height: u64,
    pub tx_id: Option<TxId>,
    pub event: Event,
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("unknown sender {0}")]
    UnknownSender(AccountId),
    #[error("log {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("log line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("log already exists at {0}")]
    Exists(PathBuf),
}

struct Inner {
    state: Arc<Snapshot>,
    pending: Vec<(TxId, LedgerTransaction)>,
    next_tx: TxId,
    blocks: Vec<Arc<Block>>,
    receipts: BTreeMap<TxId, Receipt>,
    events: Vec<LoggedEvent>,
    log: Vec<LogEntry>,
    file: Option<LogFile>,
}

struct LogFile {
    path: PathBuf,
    handle: File,
    /// Bytes of the file already applied.
    offset: u64,
    lines: usize,
}

pub struct Ledger {
    inner: Mutex<Inner>,
    snapshot: RwLock<Arc<Snapshot>>,
}

impl Ledger {
    /// An in-memory ledger at height 0.
    pub fn new(genesis: Genesis) -> Ledger {
        let inner = Inner::from_genesis(genesis);
        let snapshot = RwLock::new(inner.state.clone());
        Ledger {
            inner: Mutex::new(inner),
            snapshot,
        }
    }

    /// Creates a new log file holding only the genesis entry.
    pub fn create(path: impl AsRef<Path>, genesis: Genesis) -> Result<Ledger, LedgerError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| LedgerError::Io { path: path.clone(), source };
        let mut handle = OpenOptions::new()
            .read(true)
            .append(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    LedgerError::Exists(path.clone())
                } else {
                    io(e)
                }
            })?;
        let line = entry_line(&LogEntry::Genesis(genesis.clone()));
        handle.write_all(line.as_bytes()).map_err(io)?;
        handle.sync_data().map_err(io)?;
        let ledger = Ledger::new(genesis);
        ledger.inner.lock().file = Some(LogFile {
            path,
            handle,
            offset: line.len() as u64,
            lines: 1,
        });
        Ok(ledger)
    }

    /// Opens an existing log file and replays it.
    pub fn open(path: impl AsRef<Path>) -> Result<Ledger, LedgerError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| LedgerError::Io { path: path.clone(), source };
        let handle = OpenOptions::new().read(true).append(true).open(&path).map_err(io)?;
        handle.lock_shared().map_err(io)?;
        let read = read_entries(&handle, 0, 0);
        let _ = handle.unlock();
        let (entries, offset) = read.map_err(|e| e.with_path(&path))?;
        let mut iter = entries.into_iter();
        let genesis = match iter.next() {
            Some(LogEntry::Genesis(g)) => g,
            _ => {
                return Err(LedgerError::Corrupt {
                    line: 1,
                    message: "first entry must be genesis".into(),
                })
            }
        };
        let mut inner = Inner::from_genesis(genesis);
        let mut lines = 1;
        for entry in iter {
            lines += 1;
            inner.apply(entry, lines)?;
        }
        inner.file = Some(LogFile {
            path,
            handle,
            offset,
            lines,
        });
        let snapshot = RwLock::new(inner.state.clone());
        Ok(Ledger {
            inner: Mutex::new(inner),
            snapshot,
        })
    }

    /// Rebuilds a ledger from log entries, without a backing file.
    pub fn replay(entries: &[LogEntry]) -> Result<Ledger, LedgerError> {
        let Some(LogEntry::Genesis(genesis)) = entries.first() else {
            return Err(LedgerError::Corrupt {
                line: 1,
                message: "first entry must be genesis".into(),
            });
        };
        let mut inner = Inner::from_genesis(genesis.clone());
        for (i, entry) in entries[1..].iter().enumerate() {
            inner.apply(entry.clone(), i + 2)?;
        }
        let snapshot = RwLock::new(inner.state.clone());
        Ok(Ledger {
            inner: Mutex::new(inner),
            snapshot,
        })
    }

    /// Credits `amount` to `account`, creating it if needed. Test setup only.
    pub fn mint(&self, account: impl Into<AccountId>, amount: u64) -> Result<(), LedgerError> {
        let entry = LogEntry::Mint {
            account: account.into(),
            amount,
        };
        self.mutate(|inner| {
            inner.apply_logged(entry)?;
            Ok(())
        })
    }

    /// Queues `tx` for the next block.
    pub fn submit(&self, tx: LedgerTransaction) -> Result<TxId, LedgerError> {
        self.mutate(|inner| {
            if !inner.state.accounts.contains_key(&tx.sender) {
                return Err(LedgerError::UnknownSender(tx.sender.clone()));
            }
            let id = inner.next_tx;
            inner.apply_logged(LogEntry::Submit { id, tx })?;
            Ok(id)
        })
    }

    /// Executes all pending transactions in a new block.
    pub fn mine(&self) -> Result<Arc<Block>, LedgerError> {
        self.mutate(|inner| {
            let entry = LogEntry::Block {
                height: inner.state.height + 1,
                parent: Some(inner.state.height),
                tx_ids: inner.pending.iter().map(|(id, _)| *id).collect(),
            };
            inner.apply_logged(entry)?;
            Ok(inner.blocks.last().expect("just mined").clone())
        })
    }

    /// Mines `n` blocks.
    pub fn mine_n(&self, n: u64) -> Result<(), LedgerError> {
        for _ in 0..n {
            self.mine()?;
        }
        Ok(())
    }

    /// Applies entries appended to the log by other processes.
    pub fn refresh(&self) -> Result<(), LedgerError> {
        let mut inner = self.inner.lock();
        if inner.file.is_none() {
            return Ok(());
        }
        let path = inner.file.as_ref().expect("checked").path.clone();
        let io = |source| LedgerError::Io { path: path.clone(), source };
        let locked = inner.file.as_ref().expect("checked").handle.try_clone().map_err(io)?;
        locked.lock_shared().map_err(io)?;
        let result = inner.catch_up();
        let _ = locked.unlock();
        result?;
        *self.snapshot.write() = inner.state.clone();
        Ok(())
    }

    fn mutate<R>(&self, f: impl FnOnce(&mut Inner) -> Result<R, LedgerError>) -> Result<R, LedgerError> {
        let mut inner = self.inner.lock();
        let locked = match &inner.file {
            Some(file) => {
                let io = |source| LedgerError::Io { path: file.path.clone(), source };
                let h = file.handle.try_clone().map_err(io)?;
                h.lock().map_err(io)?;
                Some(h)
            }
            None => None,
        };
        let result = inner.catch_up().and_then(|_| f(&mut inner));
        if let Some(h) = locked {
            let _ = h.unlock();
        }
        *self.snapshot.write() = inner.state.clone();
        result
    }

    /// State as of the latest mined block.
    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().clone()
    }

    pub fn height(&self) -> u64 {
        self.snapshot().height
    }

    pub fn receipt(&self, tx: TxId) -> Option<Receipt> {
        self.inner.lock().receipts.get(&tx).cloned()
    }

    pub fn pending(&self) -> Vec<(TxId, LedgerTransaction)> {
        self.inner.lock().pending.clone()
    }

    pub fn block(&self, height: u64) -> Option<Arc<Block>> {
        self.inner.lock().blocks.get(height as usize).cloned()
    }

    /// Blocks with height ≥ `from`.
    pub fn blocks_from(&self, from: u64) -> Vec<Arc<Block>> {
        let inner = self.inner.lock();
        inner.blocks.iter().skip(from as usize).cloned().collect()
    }

    /// Events from blocks with height ≥ `from`, in ledger order.
    pub fn events_from(&self, from: u64) -> Vec<LoggedEvent> {
        let inner = self.inner.lock();
        let start = inner.events.partition_point(|e| e.height < from);
        inner.events[start..].to_vec()
    }

    /// Every entry applied so far, in order.
    pub fn log(&self) -> Vec<LogEntry> {
        self.inner.lock().log.clone()
    }

    pub fn path(&self) -> Option<PathBuf> {
        self.inner.lock().file.as_ref().map(|f| f.path.clone())
    }
}

impl Inner {
    fn from_genesis(genesis: Genesis) -> Inner {
        let state = Snapshot {
            height: 0,
            accounts: genesis.accounts.clone(),
            contract: ContractState::new(genesis.contract.clone()),
        };
        let block0 = Block {
            height: 0,
            parent: None,
            transactions: Vec::new(),
            receipts: Vec::new(),
            block_events: Vec::new(),
        };
        Inner {
            state: Arc::new(state),
            pending: Vec::new(),
            next_tx: 0,
            blocks: vec![Arc::new(block0)],
            receipts: BTreeMap::new(),
            events: Vec::new(),
            log: vec![LogEntry::Genesis(genesis)],
            file: None,
        }
    }

    /// Applies a new entry and appends it to the log file, if any.
    fn apply_logged(&mut self, entry: LogEntry) -> Result<(), LedgerError> {
        let line = entry_line(&entry);
        let next_line = self.log.len() + 1;
        self.apply(entry, next_line)?;
        if let Some(file) = &mut self.file {
            let io = |source| LedgerError::Io { path: file.path.clone(), source };
            file.handle.write_all(line.as_bytes()).map_err(io)?;
            file.handle.flush().map_err(io)?;
            file.offset += line.len() as u64;
            file.lines += 1;
        }
        Ok(())
    }

    fn catch_up(&mut self) -> Result<(), LedgerError> {
        let Some(file) = &self.file else {
            return Ok(());
        };
        let path = file.path.clone();
        let (entries, offset) = read_entries(&file.handle, file.offset, file.lines).map_err(|e| e.with_path(&path))?;
        let mut line = file.lines;
        for entry in entries {
            line += 1;
            self.apply(entry, line)?;
        }
        let file = self.file.as_mut().expect("checked");
        file.offset = offset;
        file.lines = line;
        Ok(())
    }

    fn apply(&mut self, entry: LogEntry, line: usize) -> Result<(), LedgerError> {
        let corrupt = |message: String| LedgerError::Corrupt { line, message };
        match &entry {
            LogEntry::Genesis(_) => return Err(corrupt("duplicate genesis".into())),
            LogEntry::Mint { account, amount } => {
                let state = Arc::make_mut(&mut self.state);
                *state.accounts.entry(account.clone()).or_insert(0) += amount;
            }
            LogEntry::Submit { id, tx } => {
                if *id != self.next_tx {
                    return Err(corrupt(format!("expected tx id {}, found {id}", self.next_tx)));
                }
                if !self.state.accounts.contains_key(&tx.sender) {
                    return Err(corrupt(format!("unknown sender {}", tx.sender)));
                }
                self.next_tx += 1;
                self.pending.push((*id, tx.clone()));
            }
            LogEntry::Block { height, parent, tx_ids } => {
                if *height != self.state.height + 1 || *parent != Some(self.state.height) {
                    return Err(corrupt(format!("block {height} does not extend {}", self.state.height)));
                }
                let included: Vec<(TxId, LedgerTransaction)> = {
                    let mut by_id: BTreeMap<TxId, LedgerTransaction> = std::mem::take(&mut self.pending).into_iter().collect();
                    let mut out = Vec::with_capacity(tx_ids.len());
                    for id in tx_ids {
                        let tx = by_id.remove(id).ok_or_else(|| corrupt(format!("tx {id} is not pending")))?;
                        out.push((*id, tx));
                    }
                    self.pending = by_id.into_iter().collect();
                    out
                };
                self.execute_block(*height, included);
            }
        }
        self.log.push(entry);
        Ok(())
    }

    fn execute_block(&mut self, height: u64, transactions: Vec<(TxId, LedgerTransaction)>) {
        let state = Arc::make_mut(&mut self.state);
        state.height = height;
        let mut receipts = Vec::with_capacity(transactions.len());
        for (index, (tx_id, tx)) in transactions.iter().enumerate() {
            let outcome = match execute_tx(state, tx, height) {
                Ok(events) => TxOutcome::Executed { events },
                Err(reason) => TxOutcome::Aborted { reason },
            };
            let receipt = Receipt {
                tx_id: *tx_id,
                height,
                index,
                outcome,
            };
            for event in receipt.events() {
                self.events.push(LoggedEvent {
                    height,
                    tx_id: Some(*tx_id),
                    event: event.clone(),
                });
            }
            self.receipts.insert(*tx_id, receipt.clone());
            receipts.push(receipt);
        }
        let housekeeping = state.contract.on_block(height);
        pay_out(&mut state.accounts, &housekeeping);
        for event in &housekeeping.events {
            self.events.push(LoggedEvent {
                height,
                tx_id: None,
                event: event.clone(),
            });
        }
        self.blocks.push(Arc::new(Block {
            height,
            parent: Some(height - 1),
            transactions,
            receipts,
            block_events: housekeeping.events,
        }));
    }
}

fn execute_tx(state: &mut Snapshot, tx: &LedgerTransaction, height: u64) -> Result<Vec<Event>, Abort> {
    let balance = state.balance(&tx.sender);
    if balance < tx.value {
        return Err(Abort::InsufficientBalance {
            balance,
            value: tx.value,
        });
    }
    *state.accounts.get_mut(&tx.sender).expect("sender exists") -= tx.value;
    state.contract.escrow += tx.value;
    match state.contract.execute(&tx.sender, tx.value, &tx.call, height) {
        Ok(effects) => {
            pay_out(&mut state.accounts, &effects);
            Ok(effects.events)
        }
        Err(abort) => {
            state.contract.escrow -= tx.value;
            *state.accounts.get_mut(&tx.sender).expect("sender exists") += tx.value;
            Err(abort)
        }
    }
}

fn pay_out(accounts: &mut BTreeMap<AccountId, u64>, effects: &Effects) {
    for (account, amount) in &effects.payouts {
        *accounts.entry(account.clone()).or_insert(0) += amount;
    }
}

fn entry_line(entry: &LogEntry) -> String {
    let mut line = serde_json::to_string(entry).expect("log entry serializes");
    line.push('\n');
    line
}

struct ReadError {
    line: usize,
    message: String,
    io: Option<std::io::Error>,
}

impl ReadError {
    fn with_path(self, path: &Path) -> LedgerError {
        match self.io {
            Some(source) => LedgerError::Io {
                path: path.to_path_buf(),
                source,
            },
            None => LedgerError::Corrupt {
                line: self.line,
                message: self.message,
            },
        }
    }
}

/// Reads complete lines starting at byte `offset`. A trailing partial line is
/// left for the next read.
fn read_entries(file: &File, offset: u64, lines_before: usize) -> Result<(Vec<LogEntry>, u64), ReadError> {
    let io = |e: std::io::Error| ReadError {
        line: lines_before,
        message: e.to_string(),
        io: Some(e),
    };
    let mut handle = file.try_clone().map_err(io)?;
    handle.seek(SeekFrom::Start(offset)).map_err(io)?;
    let mut reader = BufReader::new(handle);
    let mut entries = Vec::new();
    let mut pos = offset;
    let mut buf = String::new();
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(io)?;
        if n == 0 || !buf.ends_with('\n') {
            break;
        }
        let line = lines_before + entries.len() + 1;
        let entry = serde_json::from_str(buf.trim_end()).map_err(|e| ReadError {
            line,
            message: e.to_string(),
            io: None,
        })?;
        entries.push(entry);
        pos += n as u64;
    }
    Ok((entries, pos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn genesis() -> Genesis {
        Genesis::new(ContractConfig::new("notary"))
            .with_account("alice", 1_000)
            .with_account("notary", 5_000)
    }

    fn request(fee: u64) -> LedgerTransaction {
        LedgerTransaction::new(
            "alice",
            fee,
            Call::Request {
                domain: "example.org".into(),
                whitelist: BTreeSet::new(),
                fee,
                time_source: None,
            },
        )
    }

    #[test]
    fn empty_mine_advances_height() {
        let l = Ledger::new(genesis());
        assert_eq!(l.height(), 0);
        let b = l.mine().unwrap();
        assert_eq!((b.height, b.parent), (1, Some(0)));
        assert_eq!(l.height(), 1);
    }

    #[test]
    fn unknown_sender_rejected_at_submit() {
        let l = Ledger::new(genesis());
        let err = l.submit(LedgerTransaction::new("mallory", 0, Call::Timeout { request_id: 0 }));
        assert!(matches!(err, Err(LedgerError::UnknownSender(_))));
    }

    #[test]
    fn overdraft_aborts_and_refunds() {
        let l = Ledger::new(genesis());
        let id = l.submit(request(2_000)).unwrap();
        l.mine().unwrap();
        assert!(matches!(
            l.receipt(id).unwrap().abort(),
            Some(Abort::InsufficientBalance { .. })
        ));
        assert_eq!(l.snapshot().balance(&"alice".into()), 1_000);
        assert_eq!(l.snapshot().contract.pending.len(), 0);
    }

    #[test]
    fn same_block_executes_in_submission_order() {
        let l = Ledger::new(genesis());
        let a = l.submit(request(10)).unwrap();
        let b = l.submit(request(20)).unwrap();
        l.mine().unwrap();
        assert_eq!(l.receipt(a).unwrap().index, 0);
        assert_eq!(l.receipt(b).unwrap().index, 1);
        let c = &l.snapshot().contract;
        assert_eq!(c.pending[&0].request.fee, 10);
        assert_eq!(c.pending[&1].request.fee, 20);
    }

    #[test]
    fn readers_keep_their_snapshot() {
        let l = Ledger::new(genesis());
        let before = l.snapshot();
        l.submit(request(10)).unwrap();
        l.mine().unwrap();
        assert_eq!(before.height, 0);
        assert_eq!(l.snapshot().height, 1);
    }

    #[test]
    fn file_log_survives_reopen_and_is_shared() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let a = Ledger::create(&path, genesis()).unwrap();
        a.submit(request(10)).unwrap();
        a.mine().unwrap();

        let b = Ledger::open(&path).unwrap();
        assert_eq!(b.snapshot().to_bytes(), a.snapshot().to_bytes());
        b.submit(request(30)).unwrap();
        b.mine().unwrap();

        a.refresh().unwrap();
        assert_eq!(a.height(), 2);
        assert_eq!(a.snapshot().to_bytes(), b.snapshot().to_bytes());
        assert!(matches!(Ledger::create(&path, genesis()), Err(LedgerError::Exists(_))));
    }

    #[test]
    fn replay_matches_original() {
        let l = Ledger::new(genesis());
        l.mint("bob", 7).unwrap();
        l.submit(request(10)).unwrap();
        l.mine().unwrap();
        l.submit(LedgerTransaction::new("notary", 1_000, Call::Accept { request_id: 0 })).unwrap();
        l.mine_n(3).unwrap();
        let copy = Ledger::replay(&l.log()).unwrap();
        assert_eq!(copy.snapshot().to_bytes(), l.snapshot().to_bytes());
        assert_eq!(copy.events_from(0), l.events_from(0));
    }
}
