//! Per-thread accounting of live tensor bytes.
//!
//! Benchmarks run single-threaded, so the high-water mark observed on the
//! calling thread is the peak tensor footprint of the measured forward pass.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn on_alloc(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK.with(|peak| peak.set(peak.get().max(now)));
    });
}

pub(crate) fn on_free(bytes: usize) {
    // Tensors may be dropped on a thread other than the one that allocated them.
    LIVE.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Bytes currently held by live tensors created on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// Highest value of [`live_bytes`] since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Resets the high-water mark to the current live byte count.
pub fn reset_peak() {
    let live = live_bytes();
    PEAK.with(|peak| peak.set(live));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn peak_tracks_high_water_mark() {
        reset_peak();
        let base = live_bytes();
        {
            let _a = Tensor::zeros(&[100]);
            let _b = Tensor::zeros(&[50]);
            assert_eq!(live_bytes(), base + 1200);
        }
        assert_eq!(live_bytes(), base);
        assert_eq!(peak_bytes(), base + 1200);
    }
}
