mod common;

use common::*;
use psilora::{lorsum_project, AlsConfig, LowRankSum, LowRankTerm};
use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicUsize, Ordering};

struct Tracking;

static PEAK: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static ARMED: Cell<bool> = const { Cell::new(false) };
}

fn note(size: usize) {
    if ARMED.with(|a| a.get()) {
        PEAK.fetch_max(size, Ordering::Relaxed);
    }
}

unsafe impl GlobalAlloc for Tracking {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        note(layout.size());
        unsafe { System.alloc(layout) }
    }
    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        note(layout.size());
        unsafe { System.alloc_zeroed(layout) }
    }
    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        note(new_size);
        unsafe { System.realloc(ptr, layout, new_size) }
    }
    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) }
    }
}

#[global_allocator]
static GLOBAL: Tracking = Tracking;

fn tracked<R>(f: impl FnOnce() -> R) -> (R, usize) {
    PEAK.store(0, Ordering::Relaxed);
    ARMED.with(|a| a.set(true));
    let out = f();
    ARMED.with(|a| a.set(false));
    (out, PEAK.load(Ordering::Relaxed))
}

#[test]
fn lorsum_never_allocates_a_dense_buffer() {
    let d = 4096;
    let r = 8;
    let mut g = rng(1, "alloc");
    let anchor = LowRankTerm::new(1.0, gauss(&mut g, d, r), gauss(&mut g, d, r));
    let step = LowRankTerm::new(-0.1, gauss(&mut g, d, r), gauss(&mut g, d, r));
    let mom = LowRankTerm::new(-0.05, gauss(&mut g, d, 4), gauss(&mut g, d, 4));
    let total_rank = 8 + 8 + 4;
    let sum = LowRankSum::new(vec![anchor, step, mom]).unwrap();

    let (out, peak) = tracked(|| lorsum_project(&sum, &AlsConfig::proximal(3, 1e-3)));
    let (u, v) = out.unwrap();
    assert_eq!((u.shape(), v.shape()), ((d, r), (d, r)));
    let cap = d * total_rank * std::mem::size_of::<f64>();
    assert!(peak > 0);
    assert!(peak <= cap, "peak allocation {peak} bytes exceeds {cap}");
}
