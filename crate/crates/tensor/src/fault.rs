//! Deliberate backward-rule faults for mutation testing of gradient checks.
//!
//! While a [`SignFlip`] guard is alive on the current thread, the backward
//! rule of the chosen primitive returns the negated gradient for its first
//! differentiable input. A gradient checker that fails to notice is broken.

use std::cell::Cell;

use crate::OpKind;

thread_local! {
    static FLIPPED: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Restores the previous fault state when dropped.
#[must_use = "the fault is removed as soon as the guard is dropped"]
pub struct SignFlip {
    previous: Option<OpKind>,
}

pub fn inject_sign_flip(kind: OpKind) -> SignFlip {
    let previous = FLIPPED.with(|f| f.replace(Some(kind)));
    SignFlip { previous }
}

impl Drop for SignFlip {
    fn drop(&mut self) {
        FLIPPED.with(|f| f.set(self.previous));
    }
}

pub(crate) fn flipped(kind: OpKind) -> bool {
    FLIPPED.with(|f| f.get() == Some(kind))
}
