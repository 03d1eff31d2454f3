//! Per-thread activity counters used to audit which pipeline stages compute
//! gradients.

use std::cell::Cell;

thread_local! {
    static BACKWARD_CALLS: Cell<u64> = const { Cell::new(0) };
    static PRUNING_RUNS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn record_backward() {
    BACKWARD_CALLS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn record_pruning_run() {
    PRUNING_RUNS.with(|c| c.set(c.get() + 1));
}

/// Number of backward passes run on the current thread.
pub fn backward_calls() -> u64 {
    BACKWARD_CALLS.with(Cell::get)
}

/// Number of pruning runs started on the current thread.
pub fn pruning_runs() -> u64 {
    PRUNING_RUNS.with(Cell::get)
}
