//! Per-thread heap accounting.
//!
//! Install [`TrackingAllocator`] as the `#[global_allocator]` of a binary or
//! test target to measure the peak bytes a computation allocates. Counters are
//! thread-local, so concurrent tests do not disturb each other; memory freed
//! on a different thread than it was allocated on is not attributed back.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;

thread_local! {
    static CURRENT: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
}

pub struct TrackingAllocator;

fn record(delta: isize) {
    let _ = CURRENT.try_with(|cur| {
        let now = cur.get() + delta;
        cur.set(now);
        let _ = PEAK.try_with(|p| {
            if now > p.get() {
                p.set(now);
            }
        });
    });
}

// SAFETY: all allocation is delegated to `System`; bookkeeping touches only
// const-initialized thread-locals, which never allocate.
unsafe impl GlobalAlloc for TrackingAllocator {
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

/// Live bytes attributed to this thread.
pub fn current_bytes() -> isize {
    CURRENT.with(Cell::get)
}

/// Runs `f` and returns its result with the peak number of bytes it held
/// above the level at entry (zero unless a [`TrackingAllocator`] is installed).
pub fn measure_peak<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = current_bytes();
    let saved_peak = PEAK.with(Cell::get);
    PEAK.with(|p| p.set(base));
    let out = f();
    let peak = PEAK.with(Cell::get);
    PEAK.with(|p| p.set(saved_peak.max(peak)));
    (out, (peak - base).max(0) as usize)
}
