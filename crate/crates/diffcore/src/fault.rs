//! Backward-rule fault injection for negative-control verification runs.
//!
//! When a fault is armed for an [`OpKind`], that op's backward rule scales its
//! parent gradients by [`FAULT_FACTOR`]. Gradient checks must then fail and
//! name the op. The switch is thread-local so parallel test threads never see
//! each other's faults.

use std::cell::Cell;

use crate::graph::OpKind;

pub const FAULT_FACTOR: f64 = 1.5;

thread_local! {
    static ARMED: Cell<Option<OpKind>> = const { Cell::new(None) };
}

pub fn inject_backward_fault(kind: Option<OpKind>) {
    ARMED.with(|a| a.set(kind));
}

pub fn armed() -> Option<OpKind> {
    ARMED.with(|a| a.get())
}

/// Disarms on drop.
pub struct FaultGuard(());

impl FaultGuard {
    pub fn arm(kind: OpKind) -> Self {
        inject_backward_fault(Some(kind));
        FaultGuard(())
    }
}

impl Drop for FaultGuard {
    fn drop(&mut self) {
        inject_backward_fault(None);
    }
}

pub(crate) fn factor(kind: OpKind) -> f64 {
    if armed() == Some(kind) {
        FAULT_FACTOR
    } else {
        1.0
    }
}
