//! Deliberate backward-rule corruption for gradient-checker sensitivity tests.
//!
//! A fault is process-global and only consulted inside backward rules, so
//! forward values are never affected.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Fault {
    None = 0,
    /// Drops the normalization term from the softmax backward rule.
    SoftmaxBackward = 1,
}

static ACTIVE: AtomicU8 = AtomicU8::new(Fault::None as u8);

pub fn inject(fault: Fault) {
    ACTIVE.store(fault as u8, Ordering::SeqCst);
}

pub fn clear() {
    inject(Fault::None);
}

pub fn active() -> Fault {
    match ACTIVE.load(Ordering::Relaxed) {
        1 => Fault::SoftmaxBackward,
        _ => Fault::None,
    }
}
