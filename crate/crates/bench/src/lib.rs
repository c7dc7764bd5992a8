//! Fixtures shared by the criterion benches.

use mmp_core::frame::ContextId;
use mmp_core::legacy::{self, LegacyStatus, LEGACY_COMM_WORLD};
use mmp_core::matching::{MatchEngine, PostedReceive, RequestId};
use mmp_core::transport::local_endpoints;
use mmp_core::{DatatypeKind, EnvelopeHeader, MessageEnvelope, Mode, Source, TagSelector, Universe};

/// A one-rank universe on the calling thread.
pub fn solo() -> Universe {
    let ep = local_endpoints(1).pop().expect("one endpoint");
    Universe::init(Mode::InProcess(ep)).expect("in-process universe")
}

/// Send to self and receive it back through the idiomatic surface.
pub fn idiomatic_self_exchange(u: &Universe, out: &[u8], inbox: &mut [u8]) {
    let w = u.world();
    w.send(out, 0, 1).unwrap();
    w.recv(inbox, 0, 1).unwrap();
}

/// The same exchange through the legacy surface.
pub fn legacy_self_exchange(out: &[u8], inbox: &mut [u8]) {
    let n = out.len() as i32;
    assert_eq!(legacy::legacy_send(out, n, legacy::BYTE, 0, 1, LEGACY_COMM_WORLD), legacy::SUCCESS);
    let mut st = LegacyStatus::default();
    let rc = legacy::legacy_recv(inbox, n, legacy::BYTE, 0, 1, LEGACY_COMM_WORLD, &mut st);
    assert_eq!(rc, legacy::SUCCESS);
}

pub fn envelope(context: u32, source: u32, tag: u32, payload: Vec<u8>) -> MessageEnvelope {
    let header = EnvelopeHeader {
        context: ContextId(context),
        source,
        dest: 0,
        tag,
        dtype: DatatypeKind::Byte,
        count: payload.len() as u64,
    };
    MessageEnvelope::new(header, payload).expect("consistent envelope")
}

pub fn posted(id: u64, source: Source, tag: TagSelector) -> PostedReceive {
    let peer = match source {
        Source::Rank(r) => Some(r),
        Source::Any => None,
    };
    PostedReceive { request: RequestId(id), source, tag, capacity: 64, dtype: DatatypeKind::Byte, peer }
}

/// An engine with one context holding `depth` unexpected envelopes on tags
/// that the benchmarked receive never selects.
pub fn engine_with_backlog(depth: u32) -> MatchEngine {
    let mut e = MatchEngine::new();
    e.open_context(ContextId(1)).unwrap();
    for i in 0..depth {
        e.deliver(envelope(1, i % 4, 100 + i % 50, vec![0; 8])).unwrap();
    }
    e
}
