//! Multiply-accumulate tally for instrumented runs.
//!
//! Kernels report the MACs they perform; [`measure`] returns the tally of a
//! closure on the current thread.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub fn add(n: u64) {
    MACS.with(|m| m.set(m.get().wrapping_add(n)));
}

pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = MACS.with(|m| m.get());
    let out = f();
    let after = MACS.with(|m| m.get());
    (out, after.wrapping_sub(before))
}
