//! Opt-in allocation high-water gauge.
//!
//! A binary that wants measured peak-memory columns in its bench reports
//! installs [`CountingAlloc`] as its global allocator:
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: seedmatch::bench::alloc_gauge::CountingAlloc = CountingAlloc;
//! ```
//!
//! Without it, [`peak_bytes`] reports `None` and bench rows carry no
//! measured peak — the analytic columns never depend on the gauge.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

/// System-allocator wrapper that tracks live bytes and their high-water
/// mark. Sound to install process-wide; the two relaxed atomics are the
/// only overhead.
pub struct CountingAlloc;

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let live = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(live, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

/// Resets the high-water mark to the currently live footprint.
pub fn reset_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
}

/// Peak live bytes since the last [`reset_peak`], or `None` when no
/// [`CountingAlloc`] is installed (the counters never move then — and any
/// program with the gauge installed has allocated long before measuring).
pub fn peak_bytes() -> Option<u64> {
    let peak = PEAK.load(Ordering::Relaxed);
    (peak > 0).then_some(peak as u64)
}
