//! Worker-thread cap for batch-parallel kernels.
//!
//! Kernels may split disjoint output ranges across up to `thread_cap()`
//! threads. Every output element is always computed by exactly one thread
//! with a fixed reduction order, so results are bit-identical for any cap.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREAD_CAP: AtomicUsize = AtomicUsize::new(1);

/// Caps worker parallelism. `0` is treated as 1.
pub fn set_thread_cap(n: usize) {
    THREAD_CAP.store(n.max(1), Ordering::Relaxed);
}

pub fn thread_cap() -> usize {
    THREAD_CAP.load(Ordering::Relaxed)
}

/// Runs `f(row, out_row)` for every row of a `rows x row_len` output buffer,
/// splitting contiguous row ranges over at most `thread_cap()` threads.
pub(crate) fn for_each_row<F>(rows: usize, row_len: usize, out: &mut [f32], f: F)
where
    F: Fn(usize, &mut [f32]) + Sync,
{
    assert_eq!(out.len(), rows * row_len);
    let cap = thread_cap().min(rows.max(1));
    if cap <= 1 || rows <= 1 {
        for (r, chunk) in out.chunks_mut(row_len.max(1)).enumerate() {
            f(r, chunk);
        }
        return;
    }
    let per = rows.div_ceil(cap);
    std::thread::scope(|scope| {
        let mut rest = out;
        let mut start = 0;
        while start < rows {
            let take = per.min(rows - start);
            let (head, tail) = rest.split_at_mut(take * row_len);
            rest = tail;
            let fr = &f;
            scope.spawn(move || {
                for (i, chunk) in head.chunks_mut(row_len.max(1)).enumerate() {
                    fr(start + i, chunk);
                }
            });
            start += take;
        }
    });
}

/// Runs two independent closures, on two threads when the cap allows.
pub(crate) fn join<A, B, RA, RB>(a: A, b: B) -> (RA, RB)
where
    A: FnOnce() -> RA + Send,
    B: FnOnce() -> RB + Send,
    RA: Send,
    RB: Send,
{
    if thread_cap() >= 2 {
        std::thread::scope(|scope| {
            let hb = scope.spawn(b);
            let ra = a();
            (ra, hb.join().expect("worker thread panicked"))
        })
    } else {
        (a(), b())
    }
}
