//! Per-rank fault injection, used by the error-containment tests and the
//! benchmark's slowdown check.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use crate::error::{ErrorClass, MpError, Result};

/// Idiomatic operations that can be armed with a fault.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ApiOp {
    CommRank,
    CommSize,
    CommDup,
    CommSplit,
    Send,
    Recv,
    Isend,
    Irecv,
    Wait,
    Barrier,
    Bcast,
    Reduce,
    Allreduce,
    Gather,
    Gatherv,
}

impl ApiOp {
    pub const ALL: [ApiOp; 15] = [
        ApiOp::CommRank,
        ApiOp::CommSize,
        ApiOp::CommDup,
        ApiOp::CommSplit,
        ApiOp::Send,
        ApiOp::Recv,
        ApiOp::Isend,
        ApiOp::Irecv,
        ApiOp::Wait,
        ApiOp::Barrier,
        ApiOp::Bcast,
        ApiOp::Reduce,
        ApiOp::Allreduce,
        ApiOp::Gather,
        ApiOp::Gatherv,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// The next call fails with this class.
    Fail(ErrorClass),
    /// The next call panics.
    Panic,
}

#[derive(Debug, Default)]
pub struct FaultInjector {
    armed: RefCell<HashMap<ApiOp, Fault>>,
    legacy_slowdown: Cell<u32>,
}

impl FaultInjector {
    /// Arms a one-shot fault for the next call of `op` on this rank.
    pub fn arm(&self, op: ApiOp, fault: Fault) {
        self.armed.borrow_mut().insert(op, fault);
    }

    pub fn clear(&self) {
        self.armed.borrow_mut().clear();
    }

    /// Makes every legacy procedure take `factor` times as long as its
    /// delegated call by spinning afterwards. Time spent blocked waiting for
    /// other ranks is not scaled. 0 or 1 disables.
    pub fn set_legacy_slowdown(&self, factor: u32) {
        self.legacy_slowdown.set(factor);
    }

    pub fn legacy_slowdown(&self) -> u32 {
        self.legacy_slowdown.get()
    }

    pub(crate) fn check(&self, op: ApiOp) -> Result<()> {
        let fault = self.armed.borrow_mut().remove(&op);
        match fault {
            None => Ok(()),
            Some(Fault::Fail(class)) => Err(MpError::new(class, format!("injected fault in {op:?}"))),
            Some(Fault::Panic) => panic!("injected panic in {op:?}"),
        }
    }
}
