//! Deliberate gradient faults, used to prove the gradient checker catches
//! broken backward rules. State is per thread.

use std::cell::Cell;

thread_local! {
    static RELU_BACKWARD_FLIPPED: Cell<bool> = const { Cell::new(false) };
}

/// Faults that can be injected into backward rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negate the relu derivative.
    ReluBackwardSignFlip,
}

pub fn inject(fault: Fault) {
    match fault {
        Fault::ReluBackwardSignFlip => RELU_BACKWARD_FLIPPED.with(|c| c.set(true)),
    }
}

pub fn clear() {
    RELU_BACKWARD_FLIPPED.with(|c| c.set(false));
}

pub(crate) fn relu_backward_flipped() -> bool {
    RELU_BACKWARD_FLIPPED.with(Cell::get)
}
