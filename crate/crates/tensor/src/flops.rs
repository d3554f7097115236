//! Per-thread arithmetic operation counter.
//!
//! Kernels that matter for complexity measurements report the number of
//! floating point operations they perform. The count is thread local so
//! concurrent tapes do not interfere.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

pub fn record(ops: u64) {
    COUNTER.with(|c| c.set(c.get().wrapping_add(ops)));
}

pub fn reset() {
    COUNTER.with(|c| c.set(0));
}

pub fn read() -> u64 {
    COUNTER.with(|c| c.get())
}

/// Runs `f` and returns its result together with the operations it counted.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = read();
    let out = f();
    (out, read().wrapping_sub(before))
}
