//! Envelope matching.
//!
//! Each live context owns two FIFO lists: envelopes that arrived before any
//! compatible receive (the unexpected list) and receives that were posted
//! before any compatible envelope. A new receive takes the first compatible
//! unexpected envelope; a new envelope goes to the first compatible posted
//! receive. Both scans run in arrival order, which gives non-overtaking for
//! every fixed (context, source, tag).

use std::collections::{HashMap, VecDeque};

use crate::datatype::DatatypeKind;
use crate::frame::{ContextId, EnvelopeHeader, MessageEnvelope};

/// Rank within a communicator.
pub type Rank = u32;
/// User message tag, `0..=TAG_UB`.
pub type Tag = u32;

pub const TAG_UB: Tag = 32767;

/// Source selector of a receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Any,
    Rank(Rank),
}

impl From<Rank> for Source {
    fn from(r: Rank) -> Self {
        Source::Rank(r)
    }
}

/// Tag selector of a receive. `Any` only matches user tags (`<= TAG_UB`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TagSelector {
    Any,
    Tag(Tag),
}

impl From<Tag> for TagSelector {
    fn from(t: Tag) -> Self {
        TagSelector::Tag(t)
    }
}

pub const ANY_SOURCE: Source = Source::Any;
pub const ANY_TAG: TagSelector = TagSelector::Any;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RequestId(pub u64);

/// A receive waiting in a posted list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PostedReceive {
    pub request: RequestId,
    pub source: Source,
    pub tag: TagSelector,
    pub capacity: u64,
    pub dtype: DatatypeKind,
    /// Universe rank of `source`, when it is not a wildcard.
    pub peer: Option<u32>,
}

/// Whether a receive selecting `(source, tag)` accepts `header`.
pub fn selects(source: Source, tag: TagSelector, header: &EnvelopeHeader) -> bool {
    let source_ok = match source {
        Source::Any => true,
        Source::Rank(r) => r == header.source,
    };
    let tag_ok = match tag {
        TagSelector::Any => header.tag <= TAG_UB,
        TagSelector::Tag(t) => t == header.tag,
    };
    source_ok && tag_ok
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MatchError {
    #[error("unknown context {0}")]
    UnknownContext(ContextId),
    #[error("context {0} is already live")]
    ContextInUse(ContextId),
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MatchStats {
    /// Envelopes handed to `deliver`, including dropped ones.
    pub delivered: u64,
    pub matched: u64,
    /// Dropped because their context was not live.
    pub dropped: u64,
    /// Unexpected envelopes discarded when their context closed.
    pub discarded: u64,
}

/// What remained in a context when it was closed.
#[derive(Debug, Default)]
pub struct ClosedContext {
    pub unexpected: usize,
    pub posted: Vec<PostedReceive>,
}

#[derive(Debug, Default)]
struct MatchQueue {
    unexpected: VecDeque<MessageEnvelope>,
    posted: VecDeque<PostedReceive>,
}

#[derive(Debug, Default)]
pub struct MatchEngine {
    queues: HashMap<ContextId, MatchQueue>,
    stats: MatchStats,
}

impl MatchEngine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open_context(&mut self, context: ContextId) -> Result<(), MatchError> {
        if self.queues.contains_key(&context) {
            return Err(MatchError::ContextInUse(context));
        }
        self.queues.insert(context, MatchQueue::default());
        Ok(())
    }

    pub fn close_context(&mut self, context: ContextId) -> Option<ClosedContext> {
        let q = self.queues.remove(&context)?;
        self.stats.discarded += q.unexpected.len() as u64;
        Some(ClosedContext {
            unexpected: q.unexpected.len(),
            posted: q.posted.into(),
        })
    }

    pub fn is_live(&self, context: ContextId) -> bool {
        self.queues.contains_key(&context)
    }

    /// Live-context census.
    pub fn live_contexts(&self) -> usize {
        self.queues.len()
    }

    /// Posts a receive. Returns the matched envelope if one was already waiting.
    pub fn post_receive(
        &mut self,
        context: ContextId,
        recv: PostedReceive,
    ) -> Result<Option<(PostedReceive, MessageEnvelope)>, MatchError> {
        let q = self
            .queues
            .get_mut(&context)
            .ok_or(MatchError::UnknownContext(context))?;
        match q
            .unexpected
            .iter()
            .position(|e| selects(recv.source, recv.tag, &e.header))
        {
            Some(i) => {
                let env = q.unexpected.remove(i).expect("index in range");
                self.stats.matched += 1;
                Ok(Some((recv, env)))
            }
            None => {
                q.posted.push_back(recv);
                Ok(None)
            }
        }
    }

    /// Delivers an arrived envelope. Returns the receive it completed, if any.
    pub fn deliver(
        &mut self,
        envelope: MessageEnvelope,
    ) -> Result<Option<(PostedReceive, MessageEnvelope)>, MatchError> {
        self.stats.delivered += 1;
        let context = envelope.header.context;
        let Some(q) = self.queues.get_mut(&context) else {
            self.stats.dropped += 1;
            return Err(MatchError::UnknownContext(context));
        };
        match q
            .posted
            .iter()
            .position(|p| selects(p.source, p.tag, &envelope.header))
        {
            Some(i) => {
                let recv = q.posted.remove(i).expect("index in range");
                self.stats.matched += 1;
                Ok(Some((recv, envelope)))
            }
            None => {
                q.unexpected.push_back(envelope);
                Ok(None)
            }
        }
    }

    /// Removes every posted receive that names universe rank `peer` as its source.
    pub fn take_posted_from(&mut self, peer: u32) -> Vec<PostedReceive> {
        let mut taken = Vec::new();
        for q in self.queues.values_mut() {
            let (gone, keep): (Vec<_>, Vec<_>) = q.posted.drain(..).partition(|p| p.peer == Some(peer));
            q.posted = keep.into();
            taken.extend(gone);
        }
        taken
    }

    pub fn unexpected_len(&self, context: ContextId) -> usize {
        self.queues.get(&context).map_or(0, |q| q.unexpected.len())
    }

    pub fn posted_len(&self, context: ContextId) -> usize {
        self.queues.get(&context).map_or(0, |q| q.posted.len())
    }

    pub fn unexpected_total(&self) -> usize {
        self.queues.values().map(|q| q.unexpected.len()).sum()
    }

    pub fn stats(&self) -> MatchStats {
        self.stats
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CTX: ContextId = ContextId(1);

    fn env(source: u32, tag: u32, marker: u8) -> MessageEnvelope {
        MessageEnvelope {
            header: EnvelopeHeader { context: CTX, source, dest: 0, tag, dtype: DatatypeKind::Byte, count: 1 },
            payload: vec![marker],
        }
    }

    fn recv(id: u64, source: Source, tag: TagSelector) -> PostedReceive {
        PostedReceive { request: RequestId(id), source, tag, capacity: 1, dtype: DatatypeKind::Byte, peer: None }
    }

    #[test]
    fn post_takes_first_of_two_identical_unexpected() {
        let mut m = MatchEngine::new();
        m.open_context(CTX).unwrap();
        m.deliver(env(0, 5, 1)).unwrap();
        m.deliver(env(0, 5, 2)).unwrap();
        let (_, e) = m.post_receive(CTX, recv(1, Source::Rank(0), TagSelector::Tag(5))).unwrap().unwrap();
        assert_eq!(e.payload, [1]);
        assert_eq!(m.unexpected_len(CTX), 1);
    }

    #[test]
    fn any_source_on_empty_queue_stays_posted() {
        let mut m = MatchEngine::new();
        m.open_context(CTX).unwrap();
        assert!(m.post_receive(CTX, recv(1, ANY_SOURCE, ANY_TAG)).unwrap().is_none());
        assert_eq!(m.posted_len(CTX), 1);
    }

    #[test]
    fn arrival_matches_earlier_posted_receive() {
        let mut m = MatchEngine::new();
        m.open_context(CTX).unwrap();
        m.post_receive(CTX, recv(1, ANY_SOURCE, TagSelector::Tag(1))).unwrap();
        m.post_receive(CTX, recv(2, ANY_SOURCE, ANY_TAG)).unwrap();
        let (r, _) = m.deliver(env(0, 1, 0)).unwrap().unwrap();
        assert_eq!(r.request, RequestId(1));
    }

    #[test]
    fn deliver_with_nothing_posted_goes_unexpected() {
        let mut m = MatchEngine::new();
        m.open_context(CTX).unwrap();
        assert!(m.deliver(env(2, 7, 0)).unwrap().is_none());
        assert_eq!(m.unexpected_len(CTX), 1);
    }

    #[test]
    fn wildcard_source_matches_immediately() {
        let mut m = MatchEngine::new();
        m.open_context(CTX).unwrap();
        m.post_receive(CTX, recv(9, ANY_SOURCE, TagSelector::Tag(7))).unwrap();
        assert!(m.deliver(env(2, 7, 0)).unwrap().is_some());
    }

    #[test]
    fn any_tag_skips_internal_tags() {
        let mut m = MatchEngine::new();
        m.open_context(CTX).unwrap();
        m.deliver(env(0, TAG_UB + 1, 0)).unwrap();
        assert!(m.post_receive(CTX, recv(1, ANY_SOURCE, ANY_TAG)).unwrap().is_none());
        assert!(m.post_receive(CTX, recv(2, ANY_SOURCE, TagSelector::Tag(TAG_UB + 1))).unwrap().is_some());
    }

    #[test]
    fn unknown_context_is_dropped_and_counted() {
        let mut m = MatchEngine::new();
        assert_eq!(m.deliver(env(0, 0, 0)), Err(MatchError::UnknownContext(CTX)));
        assert_eq!(m.stats().dropped, 1);
        assert!(m.post_receive(CTX, recv(1, ANY_SOURCE, ANY_TAG)).is_err());
        m.open_context(CTX).unwrap();
        assert_eq!(m.open_context(CTX), Err(MatchError::ContextInUse(CTX)));
        assert_eq!(m.live_contexts(), 1);
        m.close_context(CTX).unwrap();
        assert_eq!(m.live_contexts(), 0);
    }

    #[test]
    fn posted_receives_from_a_failed_peer_are_taken() {
        let mut m = MatchEngine::new();
        m.open_context(CTX).unwrap();
        let mut a = recv(1, Source::Rank(3), ANY_TAG);
        a.peer = Some(3);
        m.post_receive(CTX, a).unwrap();
        m.post_receive(CTX, recv(2, ANY_SOURCE, ANY_TAG)).unwrap();
        let gone = m.take_posted_from(3);
        assert_eq!(gone.len(), 1);
        assert_eq!(gone[0].request, RequestId(1));
        assert_eq!(m.posted_len(CTX), 1);
    }
}
