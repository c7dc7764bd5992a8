//! Universe, groups, communicators and point-to-point operations.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::time::Duration;

use crate::datatype::{to_wire_bytes, DatatypeKind, Element};
use crate::error::{ErrorClass, MpError, Result};
use crate::fault::{ApiOp, FaultInjector};
use crate::frame::{ContextId, EnvelopeHeader};
use crate::matching::{MatchStats, Rank, Source, Tag, TagSelector, TAG_UB};
use crate::request::{Request, RequestKind, RequestRef, RequestState, RecvTarget, Status};
use crate::runtime::{Completion, RankCore, SendTap};
use crate::transport::{LocalEndpoint, TcpConfig, TcpTransport, Transport};

thread_local! {
    static CURRENT: RefCell<Option<Rc<RankCore>>> = const { RefCell::new(None) };
}

/// The rank core initialized on this thread, if any.
pub(crate) fn current_core() -> Option<Rc<RankCore>> {
    CURRENT.with(|c| c.borrow().clone())
}

pub(crate) const WORLD_CONTEXT: ContextId = ContextId(0);

/// How this rank reaches its peers.
#[derive(Debug)]
pub enum Mode {
    InProcess(LocalEndpoint),
    Tcp(TcpConfig),
}

#[derive(Debug, Clone, Default)]
pub struct Config {
    /// Upper bound on any single blocking wait; `None` waits forever.
    /// Expiry fails the wait with `ERR_OTHER`.
    pub wait_timeout: Option<Duration>,
}

/// An ordered set of universe ranks. Position in the list is the rank within
/// a communicator built on the group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    members: Vec<u32>,
}

impl Group {
    pub fn new(members: Vec<u32>) -> Result<Self> {
        let mut sorted = members.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(MpError::other("group has duplicate members"));
        }
        Ok(Group { members })
    }

    pub fn size(&self) -> u32 {
        self.members.len() as u32
    }

    pub fn members(&self) -> &[u32] {
        &self.members
    }

    /// Universe rank of group rank `rank`.
    pub fn universe_rank(&self, rank: Rank) -> Option<u32> {
        self.members.get(rank as usize).copied()
    }

    pub fn rank_of(&self, universe_rank: u32) -> Option<Rank> {
        self.members.iter().position(|&m| m == universe_rank).map(|p| p as Rank)
    }
}

pub(crate) struct CommInner {
    pub(crate) core: Rc<RankCore>,
    pub(crate) context: ContextId,
    pub(crate) group: Group,
    pub(crate) rank: Rank,
}

impl Drop for CommInner {
    fn drop(&mut self) {
        self.core.release_context(self.context);
    }
}

impl CommInner {
    pub(crate) fn size(&self) -> u32 {
        self.group.size()
    }

    pub(crate) fn check_live(&self) -> Result<()> {
        self.core.check_live()?;
        if !self.core.is_context_live(self.context) {
            return Err(MpError::comm(format!("{} has been released", self.context)));
        }
        Ok(())
    }

    pub(crate) fn check_rank(&self, rank: Rank, what: &str) -> Result<()> {
        if rank >= self.size() {
            return Err(MpError::new(
                ErrorClass::Rank,
                format!("{what} {rank} out of range for size {}", self.size()),
            ));
        }
        Ok(())
    }

    /// Sends raw payload bytes. No user-level validation of `tag`.
    pub(crate) fn send_bytes(&self, dest: Rank, tag: Tag, dtype: DatatypeKind, count: u64, payload: &[u8]) -> Result<()> {
        let header = EnvelopeHeader { context: self.context, source: self.rank, dest, tag, dtype, count };
        let route = self.group.universe_rank(dest).expect("dest checked by caller");
        self.core.send(header, payload, route)
    }

    pub(crate) fn post_bytes(&self, source: Source, tag: TagSelector, dtype: DatatypeKind, capacity: u64) -> Result<crate::matching::RequestId> {
        let peer = match source {
            Source::Rank(r) => self.group.universe_rank(r),
            Source::Any => None,
        };
        self.core.post_receive(self.context, source, tag, capacity, dtype, peer)
    }

    /// Blocking receive into an owned payload.
    pub(crate) fn recv_bytes(&self, source: Source, tag: TagSelector, dtype: DatatypeKind, capacity: u64) -> Result<Completion> {
        let id = self.post_bytes(source, tag, dtype, capacity)?;
        self.core.wait_outcome(id)
    }
}

/// A communicator: a group plus an isolated matching context.
///
/// Dropping the last owner releases the context. Communicators and the
/// requests made from them are bound to the thread of the rank that created
/// them (`!Send`).
pub struct Communicator {
    pub(crate) inner: Rc<CommInner>,
}

impl fmt::Debug for Communicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Communicator")
            .field("context", &self.inner.context)
            .field("rank", &self.inner.rank)
            .field("group", &self.inner.group.members)
            .finish()
    }
}

fn check_tag(tag: Tag) -> Result<()> {
    if tag > TAG_UB {
        return Err(MpError::new(ErrorClass::Tag, format!("tag {tag} above TAG_UB {TAG_UB}")));
    }
    Ok(())
}

fn check_tag_selector(tag: TagSelector) -> Result<()> {
    match tag {
        TagSelector::Any => Ok(()),
        TagSelector::Tag(t) => check_tag(t),
    }
}

impl Communicator {
    pub(crate) fn share(&self) -> Communicator {
        Communicator { inner: self.inner.clone() }
    }

    pub(crate) fn live(&self) -> Result<&CommInner> {
        self.inner.check_live()?;
        Ok(&self.inner)
    }

    pub(crate) fn faults(&self) -> &FaultInjector {
        &self.inner.core.faults
    }

    /// Caller's rank in this communicator.
    pub fn rank(&self) -> Result<Rank> {
        self.faults().check(ApiOp::CommRank)?;
        Ok(self.live()?.rank)
    }

    pub fn size(&self) -> Result<u32> {
        self.faults().check(ApiOp::CommSize)?;
        Ok(self.live()?.size())
    }

    pub fn group(&self) -> Result<Group> {
        Ok(self.live()?.group.clone())
    }

    pub fn context_id(&self) -> ContextId {
        self.inner.context
    }

    /// Whether both values refer to the same underlying communicator.
    pub fn same_as(&self, other: &Communicator) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Collective: a new communicator with the same group and a fresh context.
    pub fn dup(&self) -> Result<Communicator> {
        self.faults().check(ApiOp::CommDup)?;
        let rank = self.live()?.rank as i32;
        self.create(0, rank).map(|c| c.expect("non-negative color"))
    }

    /// Collective: members passing the same `color` form a new communicator,
    /// ranked by `(key, parent rank)` ascending. Negative colors fail with
    /// `ERR_OTHER` on the ranks that passed them.
    pub fn split(&self, color: i32, key: i32) -> Result<Communicator> {
        self.faults().check(ApiOp::CommSplit)?;
        self.create(color, key)?
            .ok_or_else(|| MpError::other(format!("negative color {color}")))
    }

    /// Context agreement for dup/split. Every member proposes its next free
    /// context sequence number; the maximum is taken, so the result is above
    /// any context any member has seen. The group's lowest universe rank fills
    /// the low bits, which separates disjoint groups created in one call.
    fn create(&self, color: i32, key: i32) -> Result<Option<Communicator>> {
        let c = self.live()?;
        let core = &c.core;
        let n = c.size() as usize;
        let mine = [core.context_seq() as i64, color as i64, key as i64];
        let table = allgather_triples(c, mine)?;

        let seq = table.iter().map(|t| t[0]).max().expect("non-empty") as u64;
        let bits = leader_bits(core.universe_size());
        if seq > (u32::MAX >> bits) as u64 {
            return Err(MpError::other("context id space exhausted"));
        }
        core.set_context_seq(seq as u32 + 1);

        let created = if color < 0 {
            None
        } else {
            let mut members: Vec<(i64, usize)> = (0..n)
                .filter(|&r| table[r][1] == color as i64)
                .map(|r| (table[r][2], r))
                .collect();
            members.sort_unstable();
            let universe: Vec<u32> = members
                .iter()
                .map(|&(_, r)| c.group.universe_rank(r as Rank).expect("in group"))
                .collect();
            let leader = *universe.iter().min().expect("caller is a member");
            let context = ContextId(((seq as u32) << bits) | leader);
            let rank = members.iter().position(|&(_, r)| r == c.rank as usize).expect("caller is a member") as Rank;
            core.open_context(context)?;
            Some(Communicator {
                inner: Rc::new(CommInner {
                    core: core.clone(),
                    context,
                    group: Group { members: universe },
                    rank,
                }),
            })
        };
        // Every member registers before anyone can send on the new context.
        c.barrier_internal()?;
        Ok(created)
    }

    /// Blocking eager send. The element count is the slice length.
    pub fn send<T: Element>(&self, buf: &[T], dest: Rank, tag: Tag) -> Result<()> {
        self.faults().check(ApiOp::Send)?;
        let c = self.live()?;
        c.check_rank(dest, "dest")?;
        check_tag(tag)?;
        c.send_bytes(dest, tag, T::DATATYPE.kind, buf.len() as u64, &to_wire_bytes(buf))
    }

    /// Blocking receive into `buf`; its length is the capacity.
    pub fn recv<T: Element>(
        &self,
        buf: &mut [T],
        source: impl Into<Source>,
        tag: impl Into<TagSelector>,
    ) -> Result<Status> {
        self.faults().check(ApiOp::Recv)?;
        let (source, tag) = (source.into(), tag.into());
        let id = self.post_checked::<T>(buf.len(), source, tag)?;
        let done = self.inner.core.wait_outcome(id)?;
        crate::datatype::copy_from_wire(&done.payload, bytemuck::cast_slice_mut(buf), T::DATATYPE.extent);
        Ok(done.status)
    }

    fn post_checked<T: Element>(&self, capacity: usize, source: Source, tag: TagSelector) -> Result<crate::matching::RequestId> {
        let c = self.live()?;
        if let Source::Rank(r) = source {
            c.check_rank(r, "source")?;
        }
        check_tag_selector(tag)?;
        c.post_bytes(source, tag, T::DATATYPE.kind, capacity as u64)
    }

    fn failed_request(&self, kind: RequestKind, e: MpError) -> MpError {
        let id = self.inner.core.new_request();
        self.inner.core.orphan(id);
        let class = e.class;
        e.with_request(RequestRef { id, kind, state: RequestState::Failed(class) })
    }

    /// Nonblocking send. Eager, so the returned request is already complete.
    pub fn isend<'a, T: Element>(&self, buf: &'a [T], dest: Rank, tag: Tag) -> Result<Request<'a>> {
        self.isend_detached(buf, dest, tag)
    }

    pub(crate) fn isend_detached<T: Element>(&self, buf: &[T], dest: Rank, tag: Tag) -> Result<Request<'static>> {
        let sent = self
            .faults()
            .check(ApiOp::Isend)
            .and_then(|_| {
                let c = self.live()?;
                c.check_rank(dest, "dest")?;
                check_tag(tag)?;
                c.send_bytes(dest, tag, T::DATATYPE.kind, buf.len() as u64, &to_wire_bytes(buf))?;
                Ok(c.rank)
            });
        let me = sent.map_err(|e| self.failed_request(RequestKind::Send, e))?;
        let core = &self.inner.core;
        let id = core.new_request();
        core.finish(
            id,
            Ok(Completion {
                status: Status { source: me, tag, count: buf.len() as u64, error: ErrorClass::Success },
                payload: Vec::new(),
            }),
        );
        Ok(Request::new(self.inner.clone(), id, RequestKind::Send, None).observed())
    }

    /// Nonblocking receive. `buf` stays borrowed until the request is dropped
    /// and is filled when completion is observed.
    pub fn irecv<'a, T: Element>(
        &self,
        buf: &'a mut [T],
        source: impl Into<Source>,
        tag: impl Into<TagSelector>,
    ) -> Result<Request<'a>> {
        let (source, tag) = (source.into(), tag.into());
        let id = self
            .faults()
            .check(ApiOp::Irecv)
            .and_then(|_| self.post_checked::<T>(buf.len(), source, tag))
            .map_err(|e| self.failed_request(RequestKind::Receive, e))?;
        let target = RecvTarget { bytes: bytemuck::cast_slice_mut(buf), extent: T::DATATYPE.extent };
        Ok(Request::new(self.inner.clone(), id, RequestKind::Receive, Some(target)).observed())
    }

    /// Raw-byte receive request, used by the legacy surface.
    pub(crate) unsafe fn irecv_raw(
        &self,
        ptr: *mut u8,
        len: usize,
        kind: DatatypeKind,
        source: Source,
        tag: TagSelector,
    ) -> Result<Request<'static>> {
        self.faults()
            .check(ApiOp::Irecv)
            .map_err(|e| self.failed_request(RequestKind::Receive, e))?;
        let post = (|| {
            let c = self.live()?;
            if let Source::Rank(r) = source {
                c.check_rank(r, "source")?;
            }
            check_tag_selector(tag)?;
            c.post_bytes(source, tag, kind, (len / kind.extent()) as u64)
        })();
        let id = post.map_err(|e| self.failed_request(RequestKind::Receive, e))?;
        // SAFETY: the caller guarantees `ptr..ptr+len` stays valid and
        // unaliased until the request is dropped.
        let bytes: &'static mut [u8] = if len == 0 {
            &mut []
        } else {
            unsafe { std::slice::from_raw_parts_mut(ptr, len) }
        };
        let target = RecvTarget { bytes, extent: kind.extent() };
        Ok(Request::new(self.inner.clone(), id, RequestKind::Receive, Some(target)).observed())
    }
}

/// Gathers one `[i64; 3]` from every member at rank 0 and redistributes the table.
fn allgather_triples(c: &CommInner, mine: [i64; 3]) -> Result<Vec<[i64; 3]>> {
    use crate::collectives::TAG_CREATE;
    let n = c.size() as usize;
    let encode = |vals: &[i64]| -> Vec<u8> { vals.iter().flat_map(|v| v.to_le_bytes()).collect() };
    let decode = |bytes: &[u8]| -> Vec<i64> {
        bytes.chunks_exact(8).map(|b| i64::from_le_bytes(b.try_into().unwrap())).collect()
    };
    let flat: Vec<i64> = if c.rank == 0 {
        let mut flat = mine.to_vec();
        for r in 1..n {
            let got = c.recv_bytes(Source::Rank(r as Rank), TagSelector::Tag(TAG_CREATE), DatatypeKind::Int64, 3)?;
            flat.extend(decode(&got.payload));
        }
        let bytes = encode(&flat);
        for r in 1..n {
            c.send_bytes(r as Rank, TAG_CREATE, DatatypeKind::Int64, flat.len() as u64, &bytes)?;
        }
        flat
    } else {
        c.send_bytes(0, TAG_CREATE, DatatypeKind::Int64, 3, &encode(&mine))?;
        let got = c.recv_bytes(Source::Rank(0), TagSelector::Tag(TAG_CREATE), DatatypeKind::Int64, 3 * n as u64)?;
        decode(&got.payload)
    };
    if flat.len() != 3 * n {
        return Err(MpError::other("malformed communicator-creation exchange"));
    }
    Ok(flat.chunks_exact(3).map(|t| [t[0], t[1], t[2]]).collect())
}

/// Low bits of a context id reserved for the group leader's universe rank.
fn leader_bits(universe_size: u32) -> u32 {
    (32 - universe_size.saturating_sub(1).leading_zeros()).max(1)
}

/// One rank's handle on the message-passing universe. Dropping it finalizes
/// the rank locally; [`finalize`](Self::finalize) does so collectively.
pub struct Universe {
    core: Rc<RankCore>,
    world: Communicator,
}

impl fmt::Debug for Universe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Universe")
            .field("rank", &self.core.universe_rank())
            .field("size", &self.core.universe_size())
            .finish()
    }
}

impl Universe {
    pub fn init(mode: Mode) -> Result<Universe> {
        Self::init_with(mode, Config::default())
    }

    /// Brings up this rank. Fails with `ERR_OTHER` if the thread already has a
    /// live universe or the transport cannot be established.
    pub fn init_with(mode: Mode, config: Config) -> Result<Universe> {
        if current_core().is_some() {
            return Err(MpError::other("universe already initialized on this thread"));
        }
        let transport: Box<dyn Transport> = match mode {
            Mode::InProcess(ep) => Box::new(ep),
            Mode::Tcp(cfg) => Box::new(TcpTransport::connect(&cfg)?),
        };
        let size = transport.size();
        let rank = transport.rank();
        let core = Rc::new(RankCore::new(transport, config.wait_timeout));
        core.open_context(WORLD_CONTEXT)?;
        let world = Communicator {
            inner: Rc::new(CommInner {
                core: core.clone(),
                context: WORLD_CONTEXT,
                group: Group { members: (0..size).collect() },
                rank,
            }),
        };
        core.legacy.borrow_mut().register_world(world.share());
        CURRENT.with(|c| *c.borrow_mut() = Some(core.clone()));
        Ok(Universe { core, world })
    }

    pub fn world(&self) -> &Communicator {
        &self.world
    }

    pub fn rank(&self) -> u32 {
        self.core.universe_rank()
    }

    pub fn size(&self) -> u32 {
        self.core.universe_size()
    }

    /// Live-context census of this rank.
    pub fn live_contexts(&self) -> usize {
        self.core.live_contexts()
    }

    /// Drains inbound messages without blocking.
    pub fn progress(&self) -> usize {
        self.core.progress()
    }

    pub fn match_stats(&self) -> MatchStats {
        self.core.match_stats()
    }

    /// Messages this rank has sent, including internal collective traffic.
    pub fn messages_sent(&self) -> u64 {
        self.core.messages_sent()
    }

    pub fn unexpected_len(&self, comm: &Communicator) -> usize {
        self.core.unexpected_len(comm.inner.context)
    }

    pub fn posted_len(&self, comm: &Communicator) -> usize {
        self.core.posted_len(comm.inner.context)
    }

    /// Request slots not yet observed by their owners.
    pub fn pending_requests(&self) -> usize {
        self.core.pending_requests()
    }

    /// Installs (or removes) an observer for every outgoing message.
    pub fn set_send_tap(&self, tap: Option<SendTap>) -> Option<SendTap> {
        self.core.set_tap(tap)
    }

    pub fn faults(&self) -> &FaultInjector {
        &self.core.faults
    }

    /// Collective finalize: a world barrier, then local shutdown.
    pub fn finalize(self) -> Result<()> {
        self.world.inner.barrier_internal()
    }
}

impl Drop for Universe {
    fn drop(&mut self) {
        let registry = std::mem::take(&mut *self.core.legacy.borrow_mut());
        drop(registry);
        self.core.finalize();
        CURRENT.with(|c| {
            let mut c = c.borrow_mut();
            if c.as_ref().is_some_and(|cur| Rc::ptr_eq(cur, &self.core)) {
                *c = None;
            }
        });
    }
}

/// Runs `f` on `n` in-process ranks, one thread each, and returns the results
/// in rank order. Blocking waits time out after 60 s so a stuck rank fails
/// instead of hanging the caller.
pub fn run_in_process<T, F>(n: u32, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&Universe) -> T + Sync,
{
    run_in_process_with(
        n,
        Config { wait_timeout: Some(Duration::from_secs(60)) },
        f,
    )
}

pub fn run_in_process_with<T, F>(n: u32, config: Config, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&Universe) -> T + Sync,
{
    let endpoints = crate::transport::local_endpoints(n);
    std::thread::scope(|s| {
        let handles: Vec<_> = endpoints
            .into_iter()
            .map(|ep| {
                let f = &f;
                let config = config.clone();
                std::thread::Builder::new()
                    .name(format!("mmp-rank{}", ep.rank()))
                    .spawn_scoped(s, move || {
                        let u = Universe::init_with(Mode::InProcess(ep), config).expect("in-process init");
                        f(&u)
                    })
                    .expect("spawn rank thread")
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leader_bits_cover_universe() {
        assert_eq!(leader_bits(1), 1);
        assert_eq!(leader_bits(2), 1);
        assert_eq!(leader_bits(3), 2);
        assert_eq!(leader_bits(4), 2);
        assert_eq!(leader_bits(5), 3);
        assert_eq!(leader_bits(8), 3);
        assert_eq!(leader_bits(9), 4);
    }

    #[test]
    fn group_rejects_duplicates() {
        assert!(Group::new(vec![3, 1, 3]).is_err());
        let g = Group::new(vec![3, 1, 2]).unwrap();
        assert_eq!(g.rank_of(1), Some(1));
        assert_eq!(g.universe_rank(0), Some(3));
        assert_eq!(g.universe_rank(3), None);
    }

    #[test]
    fn double_init_is_an_error() {
        let mut eps = crate::transport::local_endpoints(1);
        let u = Universe::init(Mode::InProcess(eps.pop().unwrap())).unwrap();
        let mut again = crate::transport::local_endpoints(1);
        let err = Universe::init(Mode::InProcess(again.pop().unwrap())).unwrap_err();
        assert_eq!(err.class, ErrorClass::Other);
        drop(u);
        let mut third = crate::transport::local_endpoints(1);
        assert!(Universe::init(Mode::InProcess(third.pop().unwrap())).is_ok());
    }
}
