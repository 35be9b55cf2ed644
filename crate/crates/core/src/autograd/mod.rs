//! Tape-recorded reverse-mode automatic differentiation.
//!
//! Every differentiable op records a [`GradNode`] holding its
//! vector-Jacobian product and version-pinned saved inputs. `backward`
//! walks the recorded graph in reverse topological order, accumulates
//! leaf gradients, and consumes the graph (releasing saved storage)
//! unless asked to retain it.
//!
//! Mutation safety: saved tensors pin the storage version they were
//! recorded at; unpacking one after an in-place op has moved the version
//! fails with `VersionMismatch` instead of silently using stale data.

mod custom;
mod engine;
mod gradcheck;
mod node;

pub use custom::{apply_custom, BackwardContext, CustomFunction, FunctionContext};
pub use engine::{accumulate_grad, backward, backward_with};
pub use gradcheck::{
    gradcheck, gradcheck_cases, run_gradcheck_case, run_gradcheck_suite, GradcheckCase,
    GradcheckOptions, GradcheckReport,
};
pub use node::{AutogradMeta, Edge, GradNode, NodePayload, SavedCtx, SavedTensor, VjpFn};

use std::cell::Cell;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether ops on the calling thread record the tape.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Run `f` with tape recording suspended on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = GradModeGuard::disable();
    f()
}

/// RAII grad-mode switch; restores the previous mode on drop.
pub(crate) struct GradModeGuard {
    previous: bool,
}

impl GradModeGuard {
    pub(crate) fn disable() -> Self {
        GradModeGuard {
            previous: GRAD_ENABLED.with(|c| c.replace(false)),
        }
    }
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.previous));
    }
}
