//! Fault-injection hooks used by the self-test to prove that its checks can
//! fail. Nothing outside the self-test should flip these.

use std::sync::atomic::{AtomicBool, Ordering};

static CORRUPT_SOFTMAX: AtomicBool = AtomicBool::new(false);

/// When set, every softmax output is scaled away from a probability vector.
pub fn set_softmax_corruption(on: bool) {
    CORRUPT_SOFTMAX.store(on, Ordering::SeqCst);
}

pub(crate) fn softmax_corrupted() -> bool {
    CORRUPT_SOFTMAX.load(Ordering::Relaxed)
}
