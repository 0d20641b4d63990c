use std::cell::Cell;

thread_local! {
    static MATMUL_MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-add counter for matrix products issued from the current thread.
///
/// Only `batched_matmul` and `matmul` report here; convolutions are not
/// counted. The count never decreases, so a region's cost is the difference
/// between two readings.
pub struct FlopCounter;

impl FlopCounter {
    pub fn current() -> u64 {
        MATMUL_MACS.with(Cell::get)
    }

    /// Runs `f` and returns its result with the multiply-adds it issued.
    pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
        let start = Self::current();
        let out = f();
        (out, Self::current() - start)
    }

    pub(crate) fn add(macs: u64) {
        MATMUL_MACS.with(|c| c.set(c.get() + macs));
    }
}
