//! Thread-local multiply-accumulate counter.
//!
//! Every kernel in [`crate::tensor`] reports the MACs it performs here, which
//! lets tests compare closed-form cost predictions against what a run did.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add(n: usize) {
    MACS.with(|c| c.set(c.get() + n as u64));
}

/// Current counter value for this thread.
pub fn current() -> u64 {
    MACS.with(Cell::get)
}

/// Runs `f` and returns its result with the MACs it performed.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let start = current();
    let out = f();
    (out, current() - start)
}
