//! Per-rank runtime state: match engine, request slots and progress.
//!
//! Everything here is confined to the thread that drives the rank. Only the
//! transport's inbox is filled from other threads.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::time::{Duration, Instant};

use log::{debug, warn};

use crate::datatype::DatatypeKind;
use crate::error::{ErrorClass, MpError, Result};
use crate::fault::FaultInjector;
use crate::frame::{ContextId, EnvelopeHeader, MessageEnvelope};
use crate::legacy::Registry;
use crate::matching::{MatchEngine, MatchError, MatchStats, PostedReceive, RequestId, Source, TagSelector};
use crate::request::Status;
use crate::transport::{Inbound, Transport};

/// A message about to leave this rank, as seen by a send tap.
#[derive(Debug)]
pub struct OutgoingMessage<'a> {
    pub header: EnvelopeHeader,
    pub payload: &'a [u8],
    /// Universe rank the message is routed to.
    pub route: u32,
}

/// What a send tap wants done with an outgoing message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapAction {
    Forward,
    /// Drop the message after observing it; the send still succeeds.
    Swallow,
}

pub type SendTap = Box<dyn FnMut(&OutgoingMessage<'_>) -> TapAction>;

/// A finished receive: its status and the (possibly truncated) payload.
#[derive(Debug)]
pub(crate) struct Completion {
    pub status: Status,
    pub payload: Vec<u8>,
}

enum Slot {
    Pending,
    Done(Result<Completion>),
    /// The owning request was dropped while pending; discard on completion.
    Orphaned,
}

pub(crate) struct RankCore {
    transport: Box<dyn Transport>,
    engine: RefCell<MatchEngine>,
    slots: RefCell<HashMap<RequestId, Slot>>,
    next_request: Cell<u64>,
    next_context_seq: Cell<u32>,
    finalized: Cell<bool>,
    wait_timeout: Option<Duration>,
    tap: RefCell<Option<SendTap>>,
    failed_peers: RefCell<HashMap<u32, String>>,
    sent: Cell<u64>,
    /// Total time spent blocked on the transport.
    blocked: Cell<Duration>,
    pub(crate) faults: FaultInjector,
    pub(crate) legacy: RefCell<Registry>,
}

fn unknown_context(e: MatchError) -> MpError {
    MpError::comm(e.to_string())
}

impl RankCore {
    pub(crate) fn new(transport: Box<dyn Transport>, wait_timeout: Option<Duration>) -> Self {
        RankCore {
            transport,
            engine: RefCell::new(MatchEngine::new()),
            slots: RefCell::new(HashMap::new()),
            next_request: Cell::new(1),
            next_context_seq: Cell::new(1),
            finalized: Cell::new(false),
            blocked: Cell::new(Duration::ZERO),
            wait_timeout,
            tap: RefCell::new(None),
            failed_peers: RefCell::new(HashMap::new()),
            sent: Cell::new(0),
            faults: FaultInjector::default(),
            legacy: RefCell::new(Registry::default()),
        }
    }

    pub(crate) fn universe_rank(&self) -> u32 {
        self.transport.rank()
    }

    pub(crate) fn universe_size(&self) -> u32 {
        self.transport.size()
    }

    pub(crate) fn check_live(&self) -> Result<()> {
        if self.finalized.get() {
            return Err(MpError::comm("universe has been finalized"));
        }
        Ok(())
    }

    /// Local shutdown. Pending requests fail with `ERR_COMM`; nothing is
    /// delivered afterwards.
    pub(crate) fn finalize(&self) {
        self.finalized.set(true);
        self.transport.shutdown();
        let mut slots = self.slots.borrow_mut();
        slots.retain(|_, s| !matches!(s, Slot::Orphaned));
        for s in slots.values_mut() {
            if matches!(s, Slot::Pending) {
                *s = Slot::Done(Err(MpError::comm("universe finalized with the request pending")));
            }
        }
    }

    pub(crate) fn set_tap(&self, tap: Option<SendTap>) -> Option<SendTap> {
        std::mem::replace(&mut *self.tap.borrow_mut(), tap)
    }

    // --- contexts ---

    pub(crate) fn open_context(&self, context: ContextId) -> Result<()> {
        self.engine
            .borrow_mut()
            .open_context(context)
            .map_err(|e| MpError::other(e.to_string()))
    }

    pub(crate) fn release_context(&self, context: ContextId) {
        let closed = self.engine.borrow_mut().close_context(context);
        if let Some(closed) = closed {
            if closed.unexpected > 0 {
                warn!("rank {}: {} unmatched messages discarded with {context}", self.universe_rank(), closed.unexpected);
            }
            // After finalize the posted receives have already failed.
            for p in closed.posted.into_iter().filter(|_| !self.finalized.get()) {
                self.finish(p.request, Err(MpError::comm(format!("{context} released with receive pending"))));
            }
        }
    }

    pub(crate) fn live_contexts(&self) -> usize {
        self.engine.borrow().live_contexts()
    }

    pub(crate) fn is_context_live(&self, context: ContextId) -> bool {
        self.engine.borrow().is_live(context)
    }

    pub(crate) fn context_seq(&self) -> u32 {
        self.next_context_seq.get()
    }

    pub(crate) fn set_context_seq(&self, next: u32) {
        self.next_context_seq.set(next);
    }

    pub(crate) fn match_stats(&self) -> MatchStats {
        self.engine.borrow().stats()
    }

    pub(crate) fn unexpected_len(&self, context: ContextId) -> usize {
        self.engine.borrow().unexpected_len(context)
    }

    pub(crate) fn posted_len(&self, context: ContextId) -> usize {
        self.engine.borrow().posted_len(context)
    }

    pub(crate) fn messages_sent(&self) -> u64 {
        self.sent.get()
    }

    // --- requests ---

    pub(crate) fn new_request(&self) -> RequestId {
        let id = RequestId(self.next_request.get());
        self.next_request.set(id.0 + 1);
        self.slots.borrow_mut().insert(id, Slot::Pending);
        id
    }

    /// Moves a pending slot to its terminal state. A slot completes at most once.
    pub(crate) fn finish(&self, id: RequestId, outcome: Result<Completion>) {
        let mut slots = self.slots.borrow_mut();
        match slots.get(&id) {
            Some(Slot::Pending) => {
                slots.insert(id, Slot::Done(outcome));
            }
            Some(Slot::Orphaned) => {
                slots.remove(&id);
            }
            Some(Slot::Done(_)) | None => {
                debug_assert!(false, "request {id:?} completed twice");
            }
        }
    }

    /// Takes the terminal outcome of `id`, if it has one.
    pub(crate) fn take_outcome(&self, id: RequestId) -> Option<Result<Completion>> {
        let mut slots = self.slots.borrow_mut();
        if matches!(slots.get(&id), Some(Slot::Done(_))) {
            match slots.remove(&id) {
                Some(Slot::Done(o)) => return Some(o),
                _ => unreachable!(),
            }
        }
        None
    }

    pub(crate) fn orphan(&self, id: RequestId) {
        let mut slots = self.slots.borrow_mut();
        match slots.get(&id) {
            Some(Slot::Pending) => {
                slots.insert(id, Slot::Orphaned);
            }
            Some(Slot::Done(_)) => {
                slots.remove(&id);
            }
            _ => {}
        }
    }

    pub(crate) fn pending_requests(&self) -> usize {
        self.slots.borrow().len()
    }

    // --- point to point ---

    /// Eager send: the payload is copied into the transport before returning.
    pub(crate) fn send(&self, header: EnvelopeHeader, payload: &[u8], route: u32) -> Result<()> {
        self.check_live()?;
        let action = match self.tap.borrow_mut().as_mut() {
            Some(tap) => tap(&OutgoingMessage { header, payload, route }),
            None => TapAction::Forward,
        };
        self.sent.set(self.sent.get() + 1);
        if action == TapAction::Swallow {
            return Ok(());
        }
        let envelope = MessageEnvelope { header, payload: payload.to_vec() };
        self.transport
            .send(route, envelope)
            .map_err(|e| MpError::other(format!("send to rank {route} failed: {e}")))
    }

    /// Posts a receive and returns its request id. The request may already be
    /// complete when this returns.
    pub(crate) fn post_receive(
        &self,
        context: ContextId,
        source: Source,
        tag: TagSelector,
        capacity: u64,
        dtype: DatatypeKind,
        peer: Option<u32>,
    ) -> Result<RequestId> {
        self.check_live()?;
        if !self.is_context_live(context) {
            return Err(MpError::comm(format!("unknown context {context}")));
        }
        let id = self.new_request();
        let recv = PostedReceive { request: id, source, tag, capacity, dtype, peer };
        let matched = self.engine.borrow_mut().post_receive(context, recv).map_err(unknown_context)?;
        if let Some((recv, env)) = matched {
            self.finish(recv.request, resolve(&recv, env));
        } else if let Some(p) = peer {
            // Anything the peer sent before its link went down has been delivered.
            let reason = self.failed_peers.borrow().get(&p).cloned();
            if let Some(reason) = reason {
                for r in self.engine.borrow_mut().take_posted_from(p) {
                    self.finish(r.request, Err(MpError::other(format!("link to rank {p} failed: {reason}"))));
                }
            }
        }
        Ok(id)
    }

    fn handle(&self, event: Inbound) {
        match event {
            Inbound::Frame(env) => {
                let delivered = self.engine.borrow_mut().deliver(env);
                match delivered {
                    Ok(Some((recv, env))) => self.finish(recv.request, resolve(&recv, env)),
                    Ok(None) => {}
                    Err(e) => warn!("rank {}: dropping message: {e}", self.universe_rank()),
                }
            }
            Inbound::PeerFailed { peer, reason } => {
                if reason == crate::transport::PEER_CLOSED {
                    debug!("rank {}: rank {peer} closed its link", self.universe_rank());
                } else {
                    warn!("rank {}: link to rank {peer} failed: {reason}", self.universe_rank());
                }
                let affected = self.engine.borrow_mut().take_posted_from(peer);
                for p in affected {
                    self.finish(p.request, Err(MpError::other(format!("link to rank {peer} failed: {reason}"))));
                }
                self.failed_peers.borrow_mut().insert(peer, reason);
            }
        }
    }

    /// Drains the inbox without blocking. Returns the number of events handled.
    pub(crate) fn progress(&self) -> usize {
        if self.finalized.get() {
            return 0;
        }
        let mut n = 0;
        while let Some(ev) = self.transport.try_recv() {
            self.handle(ev);
            n += 1;
        }
        n
    }

    /// Blocks, driving progress, until `id` reaches a terminal state.
    pub(crate) fn wait_outcome(&self, id: RequestId) -> Result<Completion> {
        let deadline = self.wait_timeout.map(|t| Instant::now() + t);
        loop {
            if let Some(o) = self.take_outcome(id) {
                return o;
            }
            if self.progress() > 0 {
                continue;
            }
            self.check_live()?;
            self.block_for_event(deadline)?;
        }
    }

    /// Waits for one inbound event and handles it.
    pub(crate) fn block_for_event(&self, deadline: Option<Instant>) -> Result<()> {
        let timeout = deadline.map(|d| d.saturating_duration_since(Instant::now()));
        if timeout == Some(Duration::ZERO) {
            return Err(MpError::other("timed out waiting for a message"));
        }
        let start = Instant::now();
        let ev = self.transport.recv_timeout(timeout);
        self.blocked.set(self.blocked.get() + start.elapsed());
        match ev {
            Some(ev) => {
                self.handle(ev);
                Ok(())
            }
            None if deadline.is_some() => Err(MpError::other("timed out waiting for a message")),
            None => Err(MpError::other("transport closed")),
        }
    }

    pub(crate) fn blocked_time(&self) -> Duration {
        self.blocked.get()
    }

    pub(crate) fn wait_deadline(&self) -> Option<Instant> {
        self.wait_timeout.map(|t| Instant::now() + t)
    }
}

/// Applies strict datatype matching and the truncation policy to a match.
fn resolve(recv: &PostedReceive, env: MessageEnvelope) -> Result<Completion> {
    let h = env.header;
    if h.dtype != recv.dtype {
        return Err(MpError::new(
            ErrorClass::Type,
            format!("message of {} matched a receive of {}", h.dtype, recv.dtype),
        ));
    }
    let count = h.count.min(recv.capacity);
    let mut payload = env.payload;
    payload.truncate(count as usize * h.dtype.extent());
    let error = if h.count > recv.capacity {
        ErrorClass::Truncate
    } else {
        ErrorClass::Success
    };
    Ok(Completion {
        status: Status { source: h.source, tag: h.tag, count, error },
        payload,
    })
}
