//! Strongly typed, single-completion requests.

use std::fmt;
use std::rc::Rc;

use crate::comm::CommInner;
use crate::datatype::copy_from_wire;
use crate::error::{ErrorClass, MpError, Result};
use crate::fault::ApiOp;
use crate::matching::{Rank, RequestId, Tag};
use crate::runtime::RankCore;

/// Completion record of a send or receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Status {
    pub source: Rank,
    pub tag: Tag,
    /// Elements received (or sent). Never exceeds the posted capacity.
    pub count: u64,
    /// `Success`, or `Truncate` when the message was larger than the receive.
    pub error: ErrorClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RequestKind {
    Send,
    Receive,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RequestState {
    Pending,
    Complete(Status),
    Failed(ErrorClass),
}

/// Identity and state of a request, detached from its buffer. Carried by
/// [`MpError::failed_request`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestRef {
    pub id: RequestId,
    pub kind: RequestKind,
    pub state: RequestState,
}

pub(crate) struct RecvTarget<'buf> {
    pub bytes: &'buf mut [u8],
    pub extent: usize,
}

/// An in-flight nonblocking operation.
///
/// A request moves from pending to exactly one terminal state. Waiting on a
/// terminal request returns the same result again. The receive buffer stays
/// borrowed until the request is dropped; data is copied into it when the
/// completion is first observed by [`wait`](Self::wait) or [`test`](Self::test).
pub struct Request<'buf> {
    core: Rc<RankCore>,
    _comm: Rc<CommInner>,
    id: RequestId,
    kind: RequestKind,
    target: Option<RecvTarget<'buf>>,
    outcome: Option<Result<Status>>,
}

impl fmt::Debug for Request<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Request")
            .field("id", &self.id)
            .field("kind", &self.kind)
            .field("state", &self.state())
            .finish()
    }
}

impl<'buf> Request<'buf> {
    pub(crate) fn new(
        comm: Rc<CommInner>,
        id: RequestId,
        kind: RequestKind,
        target: Option<RecvTarget<'buf>>,
    ) -> Self {
        Request {
            core: comm.core.clone(),
            _comm: comm,
            id,
            kind,
            target,
            outcome: None,
        }
    }

    /// Observes an outcome that is already available, without progressing.
    pub(crate) fn observed(mut self) -> Self {
        self.poll();
        self
    }

    pub fn id(&self) -> RequestId {
        self.id
    }

    pub fn kind(&self) -> RequestKind {
        self.kind
    }

    /// State as last observed; does not drive progress.
    pub fn state(&self) -> RequestState {
        match &self.outcome {
            None => RequestState::Pending,
            Some(Ok(s)) => RequestState::Complete(*s),
            Some(Err(e)) => RequestState::Failed(e.class),
        }
    }

    pub fn to_ref(&self) -> RequestRef {
        RequestRef { id: self.id, kind: self.kind, state: self.state() }
    }

    fn poll(&mut self) -> bool {
        if self.outcome.is_some() {
            return true;
        }
        let Some(outcome) = self.core.take_outcome(self.id) else {
            return false;
        };
        self.settle(outcome);
        true
    }

    fn settle(&mut self, outcome: Result<crate::runtime::Completion>) {
        let result = match outcome {
            Ok(c) => {
                if let Some(t) = self.target.as_mut() {
                    copy_from_wire(&c.payload, t.bytes, t.extent);
                }
                Ok(c.status)
            }
            Err(e) => {
                let class = e.class;
                Err(MpError {
                    failed_request: Some(RequestRef {
                        id: self.id,
                        kind: self.kind,
                        state: RequestState::Failed(class),
                    }),
                    ..e
                })
            }
        };
        self.outcome = Some(result);
    }

    fn result(&self) -> Result<Status> {
        self.outcome.clone().expect("terminal")
    }

    /// Non-blocking completion check. Drives progress once.
    pub fn test(&mut self) -> Result<Option<Status>> {
        if !self.poll() {
            self.core.progress();
            if !self.poll() {
                return Ok(None);
            }
        }
        self.result().map(Some)
    }

    /// Blocks until the request is terminal. Idempotent once terminal.
    pub fn wait(&mut self) -> Result<Status> {
        if let Err(e) = self.core.faults.check(ApiOp::Wait) {
            return Err(e.with_request(self.to_ref()));
        }
        if self.outcome.is_none() {
            let outcome = self.core.wait_outcome(self.id);
            self.settle(outcome);
        }
        self.result()
    }
}

impl Drop for Request<'_> {
    fn drop(&mut self) {
        if self.outcome.is_none() {
            self.core.orphan(self.id);
        }
    }
}

/// Waits for every request. On failure, returns the error of the
/// lowest-indexed failed request as soon as any request has failed.
pub fn wait_all(requests: &mut [Request<'_>]) -> Result<Vec<Status>> {
    let Some(first) = requests.first() else {
        return Ok(Vec::new());
    };
    let core = first.core.clone();
    core.faults.check(ApiOp::Wait)?;
    let deadline = core.wait_deadline();
    loop {
        let mut all_done = true;
        for r in requests.iter_mut() {
            all_done &= r.poll();
        }
        if let Some(failed) = requests.iter().find(|r| matches!(r.outcome, Some(Err(_)))) {
            return Err(failed.result().unwrap_err());
        }
        if all_done {
            return Ok(requests.iter().map(|r| r.result().expect("complete")).collect());
        }
        if core.progress() == 0 {
            core.block_for_event(deadline)?;
        }
    }
}
