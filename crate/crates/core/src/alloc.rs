//! Counting accounting for tensor buffers.
//!
//! Every [`Buffer`] registers its byte size with a per-thread counter on
//! creation and releases it on drop. The counter keeps a high-water mark and
//! an optional cap; allocations that would push usage above the cap fail with
//! [`Error::Capacity`] instead of allocating. Timed benchmark runs are single
//! threaded, so per-thread accounting is exact for them and keeps concurrent
//! test threads from observing each other.

use std::cell::Cell;
use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

thread_local! {
    static IN_USE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static CAP: Cell<usize> = const { Cell::new(usize::MAX) };
}

const ELEM: usize = std::mem::size_of::<f64>();

pub fn in_use() -> usize {
    IN_USE.with(Cell::get)
}

pub fn peak() -> usize {
    PEAK.with(Cell::get)
}

/// Resets the high-water mark to the current usage.
pub fn reset_peak() {
    PEAK.with(|p| p.set(in_use()));
}

/// Caps tensor memory on this thread; `None` removes the cap.
pub fn set_cap(cap: Option<usize>) {
    CAP.with(|c| c.set(cap.unwrap_or(usize::MAX)));
}

pub fn cap() -> Option<usize> {
    let c = CAP.with(Cell::get);
    (c != usize::MAX).then_some(c)
}

/// Restores the previous cap when dropped.
pub struct CapGuard(usize);

pub fn cap_scope(cap: usize) -> CapGuard {
    let prev = CAP.with(|c| c.replace(cap));
    CapGuard(prev)
}

impl Drop for CapGuard {
    fn drop(&mut self) {
        CAP.with(|c| c.set(self.0));
    }
}

fn register(len: usize) -> Result<()> {
    let bytes = len * ELEM;
    let used = in_use();
    let cap = CAP.with(Cell::get);
    if used.saturating_add(bytes) > cap {
        return Err(Error::Capacity {
            requested: bytes,
            in_use: used,
            cap,
        });
    }
    IN_USE.with(|u| u.set(used + bytes));
    PEAK.with(|p| p.set(p.get().max(used + bytes)));
    Ok(())
}

fn release(len: usize) {
    IN_USE.with(|u| u.set(u.get().saturating_sub(len * ELEM)));
}

/// Tracked storage for tensor values.
#[derive(Debug)]
pub struct Buffer(Vec<f64>);

impl Buffer {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        register(data.len())?;
        Ok(Buffer(data))
    }

    pub fn zeros(len: usize) -> Result<Self> {
        register(len)?;
        Ok(Buffer(vec![0.0; len]))
    }

    pub fn try_clone(&self) -> Result<Self> {
        Buffer::new(self.0.clone())
    }

    pub fn into_vec(mut self) -> Vec<f64> {
        let v = std::mem::take(&mut self.0);
        release(v.len());
        v
    }
}

impl Clone for Buffer {
    fn clone(&self) -> Self {
        // Clones bypass the cap; they only happen outside timed regions.
        let len = self.0.len();
        IN_USE.with(|u| u.set(u.get() + len * ELEM));
        PEAK.with(|p| p.set(p.get().max(in_use())));
        Buffer(self.0.clone())
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        release(self.0.len());
    }
}

impl Deref for Buffer {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Buffer {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl PartialEq for Buffer {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}
