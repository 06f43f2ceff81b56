//! Per-thread heap accounting for measuring transient memory of a computation.
//!
//! Install [`CountingAlloc`] as the global allocator of a binary or test crate:
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: dfres_core::memory::CountingAlloc = dfres_core::memory::CountingAlloc;
//! ```
//!
//! [`measure_peak`] then reports the largest number of bytes the closure held
//! above its starting point. Counters are thread-local, so concurrent tests do
//! not disturb each other.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;

thread_local! {
    static LIVE: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
}

pub struct CountingAlloc;

fn record(delta: isize) {
    let _ = LIVE.try_with(|live| {
        let now = live.get() + delta;
        live.set(now);
        let _ = PEAK.try_with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            record(layout.size() as isize);
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            record(layout.size() as isize);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        record(-(layout.size() as isize));
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            record(new_size as isize - layout.size() as isize);
        }
        p
    }
}

/// Bytes currently attributed to this thread.
pub fn live_bytes() -> isize {
    LIVE.with(Cell::get)
}

/// Runs `f` and returns its result with the peak extra heap it used on this thread.
///
/// Returns 0 bytes when [`CountingAlloc`] is not the global allocator.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let start = live_bytes();
    PEAK.with(|p| p.set(start));
    let out = f();
    let peak = PEAK.with(Cell::get);
    (out, (peak - start).max(0) as usize)
}

/// True when allocations on this thread are being counted.
pub fn is_counting() -> bool {
    let before = live_bytes();
    let probe = std::hint::black_box(vec![0u8; 64]);
    let during = live_bytes();
    drop(probe);
    during != before
}
