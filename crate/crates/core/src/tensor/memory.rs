//! Process-wide accounting of live tensor storage.
//!
//! Every tensor buffer is wrapped in a [`Storage`] that adds its byte size to
//! a global counter on creation and subtracts it on drop. The high-water mark
//! is what the benchmark reports as the peak working set.

use std::ops::Deref;
use std::sync::atomic::{AtomicUsize, Ordering};

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

/// Bytes currently held by tensor storage.
pub fn live_bytes() -> usize {
    LIVE.load(Ordering::Relaxed)
}

/// Highest value of [`live_bytes`] since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

pub fn reset_peak() {
    PEAK.store(LIVE.load(Ordering::Relaxed), Ordering::Relaxed);
}

fn acquire(bytes: usize) {
    let now = LIVE.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

fn release(bytes: usize) {
    LIVE.fetch_sub(bytes, Ordering::Relaxed);
}

/// Immutable element buffer backing a tensor.
pub struct Storage<T> {
    data: Vec<T>,
}

impl<T> Storage<T> {
    pub fn new(data: Vec<T>) -> Self {
        acquire(std::mem::size_of_val(data.as_slice()));
        Storage { data }
    }
}

impl<T> Deref for Storage<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T> Drop for Storage<T> {
    fn drop(&mut self) {
        release(std::mem::size_of_val(self.data.as_slice()));
    }
}

/// Temporary buffers (im2col columns and the like) that should count toward
/// the working set without becoming tensors.
pub(crate) struct Scratch<T> {
    pub(crate) buf: Vec<T>,
}

impl<T: Clone> Scratch<T> {
    pub(crate) fn new(len: usize, fill: T) -> Self {
        let buf = vec![fill; len];
        acquire(std::mem::size_of_val(buf.as_slice()));
        Scratch { buf }
    }
}

impl<T> Drop for Scratch<T> {
    fn drop(&mut self) {
        release(std::mem::size_of_val(self.buf.as_slice()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_tracks_allocation() {
        reset_peak();
        let before = peak_bytes();
        let s = Storage::new(vec![0u8; 1 << 20]);
        assert!(peak_bytes() >= before + (1 << 20) || peak_bytes() >= 1 << 20);
        drop(s);
    }
}
