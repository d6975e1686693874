//! Byte accounting for tensor storage.
//!
//! Every tensor buffer reports its size here on creation and release, so the
//! live byte count and its high-water mark are known at any point. Counters
//! are per thread: a model and its graph live on the thread that runs them,
//! and concurrent runs on other threads do not disturb each other's numbers.

use std::cell::Cell;
use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static TRACKING: Cell<bool> = const { Cell::new(false) };
}

fn record_alloc(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

fn record_free(bytes: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Bytes currently held by tensor buffers on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// Enable peak tracking and start a fresh region at the current live size.
pub fn start_tracking() {
    TRACKING.with(|t| t.set(true));
    reset_peak();
}

pub fn stop_tracking() {
    TRACKING.with(|t| t.set(false));
}

/// Start a new region: the high-water mark drops to the current live size.
pub fn reset_peak() {
    let live = live_bytes();
    PEAK.with(|p| p.set(live));
}

/// High-water mark of live tensor bytes since the last reset.
pub fn peak_memory_probe() -> Result<usize> {
    if !TRACKING.with(Cell::get) {
        return Err(Error::Measurement(
            "peak memory tracking was not enabled before the measured region".into(),
        ));
    }
    Ok(PEAK.with(Cell::get))
}

/// Heap storage whose size is reported to the thread's byte counters.
#[derive(Debug)]
pub struct Buffer<T> {
    data: Vec<T>,
}

impl<T> Buffer<T> {
    pub fn from_vec(mut data: Vec<T>) -> Self {
        data.shrink_to_fit();
        record_alloc(std::mem::size_of_val(data.as_slice()));
        Buffer { data }
    }

    pub fn into_vec(mut self) -> Vec<T> {
        record_free(std::mem::size_of_val(self.data.as_slice()));
        std::mem::take(&mut self.data)
    }

    pub fn byte_len(&self) -> usize {
        std::mem::size_of_val(self.data.as_slice())
    }
}

impl<T: Clone> Clone for Buffer<T> {
    fn clone(&self) -> Self {
        Buffer::from_vec(self.data.clone())
    }
}

impl<T> Drop for Buffer<T> {
    fn drop(&mut self) {
        record_free(std::mem::size_of_val(self.data.as_slice()));
    }
}

impl<T> Deref for Buffer<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T> DerefMut for Buffer<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}
