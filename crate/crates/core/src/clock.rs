//! Wall-clock abstraction so schedulers and test servers can run on virtual time.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

pub trait Clock: Send + Sync {
    /// Milliseconds since the Unix epoch.
    fn now_ms(&self) -> u64;

    fn now_secs(&self) -> u64 {
        self.now_ms() / 1000
    }
}

pub type SharedClock = Arc<dyn Clock>;

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// A manually driven clock. Every read additionally advances it by `step_ms`,
/// which models time passing between observations.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now_ms: AtomicU64,
    step_ms: AtomicU64,
}

impl VirtualClock {
    pub fn new(start_ms: u64) -> Arc<VirtualClock> {
        Arc::new(VirtualClock {
            now_ms: AtomicU64::new(start_ms),
            step_ms: AtomicU64::new(0),
        })
    }

    pub fn set_step(&self, step_ms: u64) {
        self.step_ms.store(step_ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.now_ms.fetch_add(ms, Ordering::SeqCst);
    }

    pub fn set(&self, ms: u64) {
        self.now_ms.store(ms, Ordering::SeqCst);
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> u64 {
        let step = self.step_ms.load(Ordering::SeqCst);
        self.now_ms.fetch_add(step, Ordering::SeqCst)
    }
}
