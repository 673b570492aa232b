//! Per-thread counters for the layout conversions and driver entries.
//!
//! Conversions and driver entries always happen on the calling thread, so
//! thread-local counters stay exact even when tests run concurrently.
//! Kernel-level events (phases, multiply-accumulates) cross worker threads
//! and are observed through [`crate::kernels::Probe`] instead.

use std::cell::Cell;

thread_local! {
    static PACKS: Cell<u64> = const { Cell::new(0) };
    static UNPACKS: Cell<u64> = const { Cell::new(0) };
    static DRIVER_RUNS: Cell<u64> = const { Cell::new(0) };
}

/// Snapshot of the calling thread's counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub packs: u64,
    pub unpacks: u64,
    pub driver_runs: u64,
}

impl Counters {
    pub fn now() -> Self {
        Counters {
            packs: PACKS.with(Cell::get),
            unpacks: UNPACKS.with(Cell::get),
            driver_runs: DRIVER_RUNS.with(Cell::get),
        }
    }

    /// Events recorded since `earlier`.
    pub fn since(earlier: Counters) -> Self {
        let now = Self::now();
        Counters {
            packs: now.packs - earlier.packs,
            unpacks: now.unpacks - earlier.unpacks,
            driver_runs: now.driver_runs - earlier.driver_runs,
        }
    }
}

pub(crate) fn record_pack() {
    PACKS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn record_unpack() {
    UNPACKS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn record_driver_run() {
    DRIVER_RUNS.with(|c| c.set(c.get() + 1));
}
