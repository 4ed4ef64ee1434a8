//! High-water-mark accounting for tensor storage.
//!
//! Counters are per thread: bytes are charged to the thread that allocates a
//! buffer and credited to the thread that frees it. Single-threaded
//! measurements (the benchmark harness) are exact; cross-thread frees only
//! skew the counters of the threads involved.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
}

pub(crate) fn charge(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes as isize;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn release(bytes: usize) {
    LIVE.with(|live| live.set(live.get() - bytes as isize));
}

/// Bytes of tensor storage currently alive on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(|live| live.get().max(0) as usize)
}

/// Highest value of [`live_bytes`] since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(|peak| peak.get().max(0) as usize)
}

/// Restarts peak tracking from the current live total.
pub fn reset_peak() {
    let live = LIVE.with(|live| live.get());
    PEAK.with(|peak| peak.set(live));
}
