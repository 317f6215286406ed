//! Per-thread estimate of bytes held by live tapes.
//!
//! This is an engine-side counter, not an OS measurement: it counts the
//! value buffers of tape nodes and nothing else. Tapes never leave the
//! thread that built them, so a thread-local count is exact for that thread
//! and unaffected by work running elsewhere.

use std::cell::Cell;

thread_local! {
    static CURRENT: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn alloc(bytes: usize) {
    let now = CURRENT.with(|c| {
        c.set(c.get() + bytes);
        c.get()
    });
    PEAK.with(|p| p.set(p.get().max(now)));
}

pub(crate) fn free(bytes: usize) {
    CURRENT.with(|c| c.set(c.get().saturating_sub(bytes)));
}

pub fn current_bytes() -> usize {
    CURRENT.with(Cell::get)
}

pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Resets this thread's peak to its current level.
pub fn reset_peak() {
    PEAK.with(|p| p.set(current_bytes()));
}
