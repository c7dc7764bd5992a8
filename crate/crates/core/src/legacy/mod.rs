//! Flat, code-returning surface in the style of the C binding.
//!
//! Every procedure returns an integer code and writes results through
//! out-parameters, which are left untouched on failure. Each one delegates to
//! the idiomatic API; errors and panics are caught and mapped to codes, so
//! nothing structured ever escapes. Procedures taking a count come in pairs:
//! a 32-bit one and a `_c` one taking 64-bit counts.
//!
//! Legacy wait consumes its handle: a second wait on the same handle returns
//! `ERR_REQUEST`. Idiomatic [`Request::wait`] is idempotent instead.

mod codes;
mod registry;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::rc::Rc;
use std::time::Instant;

pub use codes::*;
pub use registry::{HandleKind, LegacyHandle, LEGACY_COMM_WORLD};
pub(crate) use registry::Registry;

use crate::collectives::{ReductionOp, Reducible, TAG_GATHER, TAG_GATHERV};
use crate::comm::{current_core, Communicator};
use crate::datatype::{DatatypeKind, Element};
use crate::error::{ErrorClass, MpError, Result};
use crate::matching::{Rank, Source, TagSelector};
use crate::request::{Request, Status};
use crate::runtime::RankCore;
use registry::Entry;

/// Out-parameter of receive and wait.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LegacyStatus {
    pub source: i32,
    pub tag: i32,
    pub error: i32,
    pub count: i64,
}

impl From<Status> for LegacyStatus {
    fn from(s: Status) -> Self {
        LegacyStatus {
            source: s.source as i32,
            tag: s.tag as i32,
            error: error_code(s.error),
            count: s.count as i64,
        }
    }
}

fn contain(f: impl FnOnce() -> Result<()>) -> i32 {
    let start = Instant::now();
    let blocked = current_core().map(|c| c.blocked_time());
    let code = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SUCCESS,
        Ok(Err(e)) => error_code(e.class),
        Err(_) => ERR_OTHER,
    };
    if let (Some(core), Some(blocked)) = (current_core(), blocked) {
        let factor = core.faults.legacy_slowdown();
        if factor > 1 {
            // Scale only the work done by this call, not time spent waiting
            // for peers, so slowed ranks do not compound each other's delay.
            let busy = start.elapsed().saturating_sub(core.blocked_time().saturating_sub(blocked));
            let until = Instant::now() + busy * (factor - 1);
            while Instant::now() < until {
                std::hint::spin_loop();
            }
        }
    }
    code
}

fn core() -> Result<Rc<RankCore>> {
    current_core().ok_or_else(|| MpError::comm("no universe initialized on this thread"))
}

fn comm_arg(h: LegacyHandle) -> Result<Communicator> {
    let core = core()?;
    let comm = core.legacy.borrow().comm(h);
    let comm = comm.ok_or_else(|| MpError::comm(format!("handle {} is not a live communicator", h.0)))?;
    comm.live()?;
    Ok(comm)
}

fn count_arg(count: i64, len: usize) -> Result<usize> {
    if count < 0 {
        return Err(MpError::new(ErrorClass::Count, format!("negative count {count}")));
    }
    if count as u64 > len as u64 {
        return Err(MpError::new(ErrorClass::Buffer, format!("count {count} exceeds buffer of {len}")));
    }
    Ok(count as usize)
}

fn dtype_arg<T: Element>(code: i32) -> Result<()> {
    if code != T::DATATYPE.kind.code() as i32 {
        return Err(MpError::new(
            ErrorClass::Type,
            format!("datatype code {code} does not describe a {} buffer", T::DATATYPE.kind),
        ));
    }
    Ok(())
}

fn op_arg(code: i32) -> Result<ReductionOp> {
    Ok(match code {
        SUM => ReductionOp::Sum,
        PROD => ReductionOp::Prod,
        MIN => ReductionOp::Min,
        MAX => ReductionOp::Max,
        _ => return Err(MpError::other(format!("unknown reduction op {code}"))),
    })
}

/// Negative ranks and tags become values the idiomatic checks reject.
fn rank_arg(r: i32) -> Rank {
    u32::try_from(r).unwrap_or(u32::MAX)
}

fn source_arg(r: i32) -> Source {
    if r == ANY_SOURCE {
        Source::Any
    } else {
        Source::Rank(rank_arg(r))
    }
}

fn tag_selector_arg(t: i32) -> TagSelector {
    if t == ANY_TAG {
        TagSelector::Any
    } else {
        TagSelector::Tag(rank_arg(t))
    }
}

/// Registers `comm` (or finds its existing handle). Never duplicates it.
pub fn comm_to_legacy(comm: &Communicator) -> Result<LegacyHandle> {
    comm.live()?;
    let core = comm.inner.core.clone();
    let mut reg = core.legacy.borrow_mut();
    if let Some(h) = reg.find_comm(comm) {
        return Ok(h);
    }
    Ok(reg.insert(Entry::Comm(comm.share())))
}

/// The communicator behind a live handle.
pub fn comm_from_legacy(h: LegacyHandle) -> Result<Communicator> {
    comm_arg(h)
}

/// Moves a request into the legacy registry.
pub fn request_to_legacy(request: Request<'static>) -> Result<LegacyHandle> {
    let core = core()?;
    core.check_live()?;
    let h = core.legacy.borrow_mut().insert(Entry::Request(request));
    Ok(h)
}

/// Takes a request back out of the registry; the handle is freed.
pub fn request_from_legacy(h: LegacyHandle) -> Result<Request<'static>> {
    let core = core()?;
    let mut reg = core.legacy.borrow_mut();
    match reg.kind(h) {
        Some(HandleKind::Request) => match reg.remove(h) {
            Some(Entry::Request(r)) => Ok(r),
            _ => unreachable!(),
        },
        _ => Err(MpError::new(ErrorClass::Request, format!("handle {} is not a live request", h.0))),
    }
}

/// Number of live handles on this thread's rank, world included.
pub fn legacy_handle_count() -> usize {
    current_core().map_or(0, |c| c.legacy.borrow().len())
}

pub fn legacy_comm_rank(comm: LegacyHandle, rank: &mut i32) -> i32 {
    contain(|| {
        *rank = comm_arg(comm)?.rank()? as i32;
        Ok(())
    })
}

pub fn legacy_comm_size(comm: LegacyHandle, size: &mut i32) -> i32 {
    contain(|| {
        *size = comm_arg(comm)?.size()? as i32;
        Ok(())
    })
}

pub fn legacy_comm_dup(comm: LegacyHandle, newcomm: &mut LegacyHandle) -> i32 {
    contain(|| {
        let dup = comm_arg(comm)?.dup()?;
        *newcomm = comm_to_legacy(&dup)?;
        Ok(())
    })
}

pub fn legacy_comm_split(comm: LegacyHandle, color: i32, key: i32, newcomm: &mut LegacyHandle) -> i32 {
    contain(|| {
        let split = comm_arg(comm)?.split(color, key)?;
        *newcomm = comm_to_legacy(&split)?;
        Ok(())
    })
}

/// Frees a communicator handle and sets it to `NULL`. The world handle
/// cannot be freed.
pub fn legacy_comm_free(comm: &mut LegacyHandle) -> i32 {
    contain(|| {
        if *comm == LEGACY_COMM_WORLD {
            return Err(MpError::comm("the world communicator cannot be freed"));
        }
        comm_arg(*comm)?;
        let core = core()?;
        let entry = core.legacy.borrow_mut().remove(*comm);
        drop(entry);
        *comm = LegacyHandle::NULL;
        Ok(())
    })
}

fn send_impl<T: Element>(buf: &[T], count: i64, datatype: i32, dest: i32, tag: i32, comm: LegacyHandle) -> Result<()> {
    let c = comm_arg(comm)?;
    let n = count_arg(count, buf.len())?;
    dtype_arg::<T>(datatype)?;
    c.send(&buf[..n], rank_arg(dest), rank_arg(tag))
}

pub fn legacy_send<T: Element>(buf: &[T], count: i32, datatype: i32, dest: i32, tag: i32, comm: LegacyHandle) -> i32 {
    contain(|| send_impl(buf, count.into(), datatype, dest, tag, comm))
}

pub fn legacy_send_c<T: Element>(buf: &[T], count: i64, datatype: i32, dest: i32, tag: i32, comm: LegacyHandle) -> i32 {
    contain(|| send_impl(buf, count, datatype, dest, tag, comm))
}

fn completed(s: Status, out: &mut LegacyStatus) -> Result<()> {
    *out = s.into();
    if s.error == ErrorClass::Truncate {
        return Err(MpError::new(ErrorClass::Truncate, "message truncated"));
    }
    Ok(())
}

fn recv_impl<T: Element>(
    buf: &mut [T],
    count: i64,
    datatype: i32,
    source: i32,
    tag: i32,
    comm: LegacyHandle,
    status: &mut LegacyStatus,
) -> Result<()> {
    let c = comm_arg(comm)?;
    let n = count_arg(count, buf.len())?;
    dtype_arg::<T>(datatype)?;
    let s = c.recv(&mut buf[..n], source_arg(source), tag_selector_arg(tag))?;
    completed(s, status)
}

/// Blocking receive. A truncated receive returns `ERR_TRUNCATE` with `status`
/// filled in and the first `count` elements written.
pub fn legacy_recv<T: Element>(
    buf: &mut [T],
    count: i32,
    datatype: i32,
    source: i32,
    tag: i32,
    comm: LegacyHandle,
    status: &mut LegacyStatus,
) -> i32 {
    contain(|| recv_impl(buf, count.into(), datatype, source, tag, comm, status))
}

pub fn legacy_recv_c<T: Element>(
    buf: &mut [T],
    count: i64,
    datatype: i32,
    source: i32,
    tag: i32,
    comm: LegacyHandle,
    status: &mut LegacyStatus,
) -> i32 {
    contain(|| recv_impl(buf, count, datatype, source, tag, comm, status))
}

fn isend_impl<T: Element>(
    buf: &[T],
    count: i64,
    datatype: i32,
    dest: i32,
    tag: i32,
    comm: LegacyHandle,
    request: &mut LegacyHandle,
) -> Result<()> {
    let c = comm_arg(comm)?;
    let n = count_arg(count, buf.len())?;
    dtype_arg::<T>(datatype)?;
    let r = c.isend_detached(&buf[..n], rank_arg(dest), rank_arg(tag))?;
    *request = request_to_legacy(r)?;
    Ok(())
}

pub fn legacy_isend<T: Element>(
    buf: &[T],
    count: i32,
    datatype: i32,
    dest: i32,
    tag: i32,
    comm: LegacyHandle,
    request: &mut LegacyHandle,
) -> i32 {
    contain(|| isend_impl(buf, count.into(), datatype, dest, tag, comm, request))
}

pub fn legacy_isend_c<T: Element>(
    buf: &[T],
    count: i64,
    datatype: i32,
    dest: i32,
    tag: i32,
    comm: LegacyHandle,
    request: &mut LegacyHandle,
) -> i32 {
    contain(|| isend_impl(buf, count, datatype, dest, tag, comm, request))
}

#[allow(clippy::too_many_arguments)]
unsafe fn irecv_impl<T: Element>(
    buf: &mut [T],
    count: i64,
    datatype: i32,
    source: i32,
    tag: i32,
    comm: LegacyHandle,
    request: &mut LegacyHandle,
) -> Result<()> {
    let c = comm_arg(comm)?;
    let n = count_arg(count, buf.len())?;
    dtype_arg::<T>(datatype)?;
    let bytes: &mut [u8] = bytemuck::cast_slice_mut(&mut buf[..n]);
    // SAFETY: forwarded from the caller of `legacy_irecv`.
    let r = unsafe {
        c.irecv_raw(bytes.as_mut_ptr(), bytes.len(), T::DATATYPE.kind, source_arg(source), tag_selector_arg(tag))?
    };
    *request = request_to_legacy(r)?;
    Ok(())
}

/// Nonblocking receive.
///
/// # Safety
///
/// `buf` must stay valid, and must not be read or written through any other
/// path, until the returned request handle has been waited on or the
/// universe has been dropped.
pub unsafe fn legacy_irecv<T: Element>(
    buf: &mut [T],
    count: i32,
    datatype: i32,
    source: i32,
    tag: i32,
    comm: LegacyHandle,
    request: &mut LegacyHandle,
) -> i32 {
    contain(|| unsafe { irecv_impl(buf, count.into(), datatype, source, tag, comm, request) })
}

/// Big-count twin of [`legacy_irecv`].
///
/// # Safety
///
/// As for [`legacy_irecv`].
pub unsafe fn legacy_irecv_c<T: Element>(
    buf: &mut [T],
    count: i64,
    datatype: i32,
    source: i32,
    tag: i32,
    comm: LegacyHandle,
    request: &mut LegacyHandle,
) -> i32 {
    contain(|| unsafe { irecv_impl(buf, count, datatype, source, tag, comm, request) })
}

/// Waits on and frees a request handle, setting it to `NULL`. The handle is
/// freed whether or not the request succeeded.
pub fn legacy_wait(request: &mut LegacyHandle, status: &mut LegacyStatus) -> i32 {
    contain(|| {
        let mut r = request_from_legacy(*request)?;
        *request = LegacyHandle::NULL;
        let s = r.wait()?;
        completed(s, status)
    })
}

pub fn legacy_barrier(comm: LegacyHandle) -> i32 {
    contain(|| comm_arg(comm)?.barrier())
}

fn bcast_impl<T: Element>(buf: &mut [T], count: i64, datatype: i32, root: i32, comm: LegacyHandle) -> Result<()> {
    let c = comm_arg(comm)?;
    let n = count_arg(count, buf.len())?;
    dtype_arg::<T>(datatype)?;
    c.bcast(&mut buf[..n], rank_arg(root))
}

pub fn legacy_bcast<T: Element>(buf: &mut [T], count: i32, datatype: i32, root: i32, comm: LegacyHandle) -> i32 {
    contain(|| bcast_impl(buf, count.into(), datatype, root, comm))
}

pub fn legacy_bcast_c<T: Element>(buf: &mut [T], count: i64, datatype: i32, root: i32, comm: LegacyHandle) -> i32 {
    contain(|| bcast_impl(buf, count, datatype, root, comm))
}

fn my_rank(c: &Communicator) -> Result<Rank> {
    Ok(c.live()?.rank)
}

/// Runs `f` with `T` reinterpreted as the reducible type of its datatype.
fn with_reducible<T: Element>(
    send: &[T],
    recv: &mut [T],
    f: impl FnOnce(ReducibleSlices<'_>) -> Result<()>,
) -> Result<()> {
    let slices = match T::DATATYPE.kind {
        DatatypeKind::Byte => {
            return Err(MpError::new(ErrorClass::Type, "BYTE is not a reducible datatype"));
        }
        DatatypeKind::Int32 => ReducibleSlices::I32(bytemuck::cast_slice(send), bytemuck::cast_slice_mut(recv)),
        DatatypeKind::Int64 => ReducibleSlices::I64(bytemuck::cast_slice(send), bytemuck::cast_slice_mut(recv)),
        DatatypeKind::Float32 => ReducibleSlices::F32(bytemuck::cast_slice(send), bytemuck::cast_slice_mut(recv)),
        DatatypeKind::Float64 => ReducibleSlices::F64(bytemuck::cast_slice(send), bytemuck::cast_slice_mut(recv)),
    };
    f(slices)
}

enum ReducibleSlices<'a> {
    I32(&'a [i32], &'a mut [i32]),
    I64(&'a [i64], &'a mut [i64]),
    F32(&'a [f32], &'a mut [f32]),
    F64(&'a [f64], &'a mut [f64]),
}

macro_rules! dispatch {
    ($slices:expr, |$s:ident, $r:ident| $body:expr) => {
        match $slices {
            ReducibleSlices::I32($s, $r) => $body,
            ReducibleSlices::I64($s, $r) => $body,
            ReducibleSlices::F32($s, $r) => $body,
            ReducibleSlices::F64($s, $r) => $body,
        }
    };
}

fn reduce_typed<T: Reducible>(c: &Communicator, send: &[T], recv: &mut [T], op: ReductionOp, root: Rank) -> Result<()> {
    if my_rank(c)? == root {
        c.reduce_root(send, recv, op)
    } else {
        c.reduce(send, op, root)
    }
}

#[allow(clippy::too_many_arguments)]
fn reduce_impl<T: Element>(
    send: &[T],
    recv: &mut [T],
    count: i64,
    datatype: i32,
    op: i32,
    root: i32,
    comm: LegacyHandle,
) -> Result<()> {
    let c = comm_arg(comm)?;
    let n = count_arg(count, send.len())?;
    dtype_arg::<T>(datatype)?;
    let op = op_arg(op)?;
    let root = rank_arg(root);
    // A short receive buffer at the root is reported by the root side after
    // it has taken every contribution.
    let m = if my_rank(&c)? == root { n.min(recv.len()) } else { 0 };
    with_reducible(&send[..n], &mut recv[..m], |s| dispatch!(s, |s, r| reduce_typed(&c, s, r, op, root)))
}

/// Reduce to `root`. `recvbuf` is only read at the root.
pub fn legacy_reduce<T: Element>(
    sendbuf: &[T],
    recvbuf: &mut [T],
    count: i32,
    datatype: i32,
    op: i32,
    root: i32,
    comm: LegacyHandle,
) -> i32 {
    contain(|| reduce_impl(sendbuf, recvbuf, count.into(), datatype, op, root, comm))
}

pub fn legacy_reduce_c<T: Element>(
    sendbuf: &[T],
    recvbuf: &mut [T],
    count: i64,
    datatype: i32,
    op: i32,
    root: i32,
    comm: LegacyHandle,
) -> i32 {
    contain(|| reduce_impl(sendbuf, recvbuf, count, datatype, op, root, comm))
}

pub fn legacy_allreduce<T: Element>(
    sendbuf: &[T],
    recvbuf: &mut [T],
    count: i32,
    datatype: i32,
    op: i32,
    comm: LegacyHandle,
) -> i32 {
    contain(|| {
        let c = comm_arg(comm)?;
        let n = count_arg(count.into(), sendbuf.len())?;
        let m = count_arg(count.into(), recvbuf.len())?;
        dtype_arg::<T>(datatype)?;
        let op = op_arg(op)?;
        with_reducible(&sendbuf[..n], &mut recvbuf[..m], |s| dispatch!(s, |s, r| c.allreduce(s, r, op)))
    })
}

#[allow(clippy::too_many_arguments)]
fn gather_impl<T: Element>(
    send: &[T],
    sendcount: i64,
    sendtype: i32,
    recv: &mut [T],
    recvcount: i64,
    recvtype: i32,
    root: i32,
    comm: LegacyHandle,
) -> Result<()> {
    let c = comm_arg(comm)?;
    let n = count_arg(sendcount, send.len())?;
    dtype_arg::<T>(sendtype)?;
    let root = rank_arg(root);
    if my_rank(&c)? != root {
        return c.gather(&send[..n], root);
    }
    let root_args = dtype_arg::<T>(recvtype).and_then(|_| {
        if recvcount != sendcount {
            return Err(MpError::new(
                ErrorClass::Count,
                format!("recvcount {recvcount} differs from sendcount {sendcount}"),
            ));
        }
        Ok(())
    });
    if let Err(e) = root_args {
        // Contributions are already on their way; take them off the context.
        c.live()?.collect::<T>(TAG_GATHER);
        return Err(e);
    }
    let size = c.size()? as usize;
    let want = n.saturating_mul(size).min(recv.len());
    c.gather_root(&send[..n], &mut recv[..want])
}

/// Gather to `root`. The receive arguments are only read at the root.
#[allow(clippy::too_many_arguments)]
pub fn legacy_gather<T: Element>(
    sendbuf: &[T],
    sendcount: i32,
    sendtype: i32,
    recvbuf: &mut [T],
    recvcount: i32,
    recvtype: i32,
    root: i32,
    comm: LegacyHandle,
) -> i32 {
    contain(|| gather_impl(sendbuf, sendcount.into(), sendtype, recvbuf, recvcount.into(), recvtype, root, comm))
}

#[allow(clippy::too_many_arguments)]
pub fn legacy_gather_c<T: Element>(
    sendbuf: &[T],
    sendcount: i64,
    sendtype: i32,
    recvbuf: &mut [T],
    recvcount: i64,
    recvtype: i32,
    root: i32,
    comm: LegacyHandle,
) -> i32 {
    contain(|| gather_impl(sendbuf, sendcount, sendtype, recvbuf, recvcount, recvtype, root, comm))
}

#[allow(clippy::too_many_arguments)]
fn gatherv_impl<T: Element>(
    send: &[T],
    sendcount: i64,
    sendtype: i32,
    recv: &mut [T],
    recvcounts: &[i64],
    displs: &[i64],
    recvtype: i32,
    root: i32,
    comm: LegacyHandle,
) -> Result<()> {
    let c = comm_arg(comm)?;
    let n = count_arg(sendcount, send.len())?;
    dtype_arg::<T>(sendtype)?;
    let root = rank_arg(root);
    if my_rank(&c)? != root {
        return c.gatherv(&send[..n], root);
    }
    let to_u64 = |v: &[i64]| v.iter().map(|&x| u64::try_from(x).ok()).collect::<Option<Vec<u64>>>();
    let root_args = dtype_arg::<T>(recvtype).and_then(|_| match (to_u64(recvcounts), to_u64(displs)) {
        (Some(counts), Some(displs)) => Ok((counts, displs)),
        _ => Err(MpError::new(ErrorClass::Count, "negative receive count or displacement")),
    });
    match root_args {
        Ok((counts, displs)) => c.gatherv_root(&send[..n], recv, &counts, &displs),
        Err(e) => {
            c.live()?.collect::<T>(TAG_GATHERV);
            Err(e)
        }
    }
}

/// Variable gather to `root`. The receive arguments are only read at the root.
#[allow(clippy::too_many_arguments)]
pub fn legacy_gatherv<T: Element>(
    sendbuf: &[T],
    sendcount: i32,
    sendtype: i32,
    recvbuf: &mut [T],
    recvcounts: &[i32],
    displs: &[i32],
    recvtype: i32,
    root: i32,
    comm: LegacyHandle,
) -> i32 {
    contain(|| {
        let widen = |v: &[i32]| v.iter().map(|&x| i64::from(x)).collect::<Vec<_>>();
        gatherv_impl(
            sendbuf,
            sendcount.into(),
            sendtype,
            recvbuf,
            &widen(recvcounts),
            &widen(displs),
            recvtype,
            root,
            comm,
        )
    })
}

#[allow(clippy::too_many_arguments)]
pub fn legacy_gatherv_c<T: Element>(
    sendbuf: &[T],
    sendcount: i64,
    sendtype: i32,
    recvbuf: &mut [T],
    recvcounts: &[i64],
    displs: &[i64],
    recvtype: i32,
    root: i32,
    comm: LegacyHandle,
) -> i32 {
    contain(|| gatherv_impl(sendbuf, sendcount, sendtype, recvbuf, recvcounts, displs, recvtype, root, comm))
}
