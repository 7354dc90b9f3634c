//! Process exit codes. These values are part of the interface and do not change.
//!
//! | Code | Meaning |
//! |---|---|
//! | 0 | success; audit verdict `Consistent` |
//! | 1 | runtime failure (I/O, corrupt files, unexpected errors) |
//! | 2 | usage error (bad flags or arguments) |
//! | 3 | notary unreachable over the direct interface |
//! | 4 | the ledger rejected a transaction |
//! | 5 | unknown service, request or query |
//! | 6 | gave up waiting for blocks |
//! | 10 | verdict `EvidenceContradictsState` |
//! | 11 | verdict `EvidenceMissing` |
//! | 12 | verdict `SlaBreach` |

use keynotary::auditor::{AuditError, SourceError, VerdictKind};
use keynotary::ledger::LedgerError;
use std::process::ExitCode;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Code(pub u8);

impl Code {
    pub const OK: Code = Code(0);
    pub const RUNTIME: Code = Code(1);
    pub const USAGE: Code = Code(2);
    pub const UNREACHABLE: Code = Code(3);
    pub const REJECTED: Code = Code(4);
    pub const UNKNOWN: Code = Code(5);
    pub const GAVE_UP: Code = Code(6);
    pub const CONTRADICTS: Code = Code(10);
    pub const MISSING: Code = Code(11);
    pub const SLA_BREACH: Code = Code(12);

    pub fn for_verdict(kind: VerdictKind) -> Code {
        match kind {
            VerdictKind::Consistent => Code::OK,
            VerdictKind::EvidenceContradictsState => Code::CONTRADICTS,
            VerdictKind::EvidenceMissing => Code::MISSING,
            VerdictKind::SlaBreach => Code::SLA_BREACH,
        }
    }
}

impl From<Code> for ExitCode {
    fn from(c: Code) -> ExitCode {
        ExitCode::from(c.0)
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: Code,
    pub message: String,
}

impl CliError {
    pub fn new(code: Code, message: impl Into<String>) -> CliError {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> CliError {
        CliError::new(Code::RUNTIME, message)
    }

    pub fn usage(message: impl Into<String>) -> CliError {
        CliError::new(Code::USAGE, message)
    }
}

impl From<LedgerError> for CliError {
    fn from(e: LedgerError) -> CliError {
        let code = match e {
            LedgerError::UnknownSender(_) => Code::REJECTED,
            _ => Code::RUNTIME,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<AuditError> for CliError {
    fn from(e: AuditError) -> CliError {
        let code = match &e {
            AuditError::Source(SourceError::Unreachable(_)) => Code::UNREACHABLE,
            AuditError::Source(SourceError::UnknownService(_)) | AuditError::UnknownService(_) => Code::UNKNOWN,
            AuditError::Rejected { .. } => Code::REJECTED,
            AuditError::EmptyRange => Code::USAGE,
            AuditError::Ledger(_) => Code::RUNTIME,
        };
        CliError::new(code, e.to_string())
    }
}
