//! Blocking collectives over a communicator.
//!
//! All algorithms are flat: the root talks to every other rank directly.
//! Internal traffic uses tags above `TAG_UB`, which user receives (including
//! `ANY_TAG`) never match. Reductions fold contributions in ascending rank
//! order, so floating-point results are reproducible bit for bit.

use std::fmt;

use crate::comm::{CommInner, Communicator};
use crate::datatype::{copy_from_wire, to_wire_bytes, DatatypeKind, Element};
use crate::error::{ErrorClass, MpError, Result};
use crate::fault::ApiOp;
use crate::matching::{Rank, Source, Tag, TagSelector, TAG_UB};

pub(crate) const TAG_BARRIER: Tag = TAG_UB + 1;
pub(crate) const TAG_BCAST: Tag = TAG_UB + 2;
pub(crate) const TAG_GATHER: Tag = TAG_UB + 3;
pub(crate) const TAG_GATHERV: Tag = TAG_UB + 4;
pub(crate) const TAG_REDUCE: Tag = TAG_UB + 5;
pub(crate) const TAG_ALLREDUCE: Tag = TAG_UB + 6;
pub(crate) const TAG_CREATE: Tag = TAG_UB + 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReductionOp {
    Sum,
    Prod,
    Min,
    Max,
}

impl ReductionOp {
    pub const ALL: [ReductionOp; 4] = [ReductionOp::Sum, ReductionOp::Prod, ReductionOp::Min, ReductionOp::Max];
}

impl fmt::Display for ReductionOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Element types that arithmetic reductions apply to. `u8` (BYTE) is not
/// reducible.
pub trait Reducible: Element {
    fn combine(op: ReductionOp, a: Self, b: Self) -> Self;
}

macro_rules! int_reducible {
    ($t:ty) => {
        impl Reducible for $t {
            fn combine(op: ReductionOp, a: Self, b: Self) -> Self {
                match op {
                    ReductionOp::Sum => a.wrapping_add(b),
                    ReductionOp::Prod => a.wrapping_mul(b),
                    ReductionOp::Min => a.min(b),
                    ReductionOp::Max => a.max(b),
                }
            }
        }
    };
}

macro_rules! float_reducible {
    ($t:ty) => {
        impl Reducible for $t {
            fn combine(op: ReductionOp, a: Self, b: Self) -> Self {
                match op {
                    ReductionOp::Sum => a + b,
                    ReductionOp::Prod => a * b,
                    ReductionOp::Min => {
                        if b < a {
                            b
                        } else {
                            a
                        }
                    }
                    ReductionOp::Max => {
                        if b > a {
                            b
                        } else {
                            a
                        }
                    }
                }
            }
        }
    };
}

int_reducible!(i32);
int_reducible!(i64);
float_reducible!(f32);
float_reducible!(f64);

fn count_mismatch(what: &str, rank: Rank, got: u64, want: u64) -> MpError {
    MpError::new(
        ErrorClass::Count,
        format!("{what}: rank {rank} contributed {got} elements, expected {want}"),
    )
}

fn decode<T: Element>(payload: &[u8]) -> Vec<T> {
    let mut out = vec![T::zeroed(); payload.len() / T::DATATYPE.extent];
    copy_from_wire(payload, bytemuck::cast_slice_mut(&mut out), T::DATATYPE.extent);
    out
}

impl CommInner {
    pub(crate) fn barrier_internal(&self) -> Result<()> {
        let n = self.size();
        let tag = TagSelector::Tag(TAG_BARRIER);
        if self.rank == 0 {
            for r in 1..n {
                self.recv_bytes(Source::Rank(r), tag, DatatypeKind::Byte, 0)?;
            }
            for r in 1..n {
                self.send_bytes(r, TAG_BARRIER, DatatypeKind::Byte, 0, &[])?;
            }
        } else {
            self.send_bytes(0, TAG_BARRIER, DatatypeKind::Byte, 0, &[])?;
            self.recv_bytes(Source::Rank(0), tag, DatatypeKind::Byte, 0)?;
        }
        Ok(())
    }

    fn bcast_internal<T: Element>(&self, buf: &mut [T], root: Rank, tag: Tag) -> Result<()> {
        if self.rank == root {
            let bytes = to_wire_bytes(buf);
            for r in (0..self.size()).filter(|&r| r != root) {
                self.send_bytes(r, tag, T::DATATYPE.kind, buf.len() as u64, &bytes)?;
            }
        } else {
            let got = self.recv_bytes(Source::Rank(root), TagSelector::Tag(tag), T::DATATYPE.kind, u64::MAX)?;
            if got.status.count != buf.len() as u64 {
                return Err(count_mismatch("bcast", root, got.status.count, buf.len() as u64));
            }
            copy_from_wire(&got.payload, bytemuck::cast_slice_mut(buf), T::DATATYPE.extent);
        }
        Ok(())
    }

    /// Root side of a gather: every other rank's contribution, in rank order.
    /// Drains all contributions even after an error so none are left queued.
    pub(crate) fn collect<T: Element>(&self, tag: Tag) -> Vec<(Rank, Result<Vec<u8>>)> {
        (0..self.size())
            .filter(|&r| r != self.rank)
            .map(|r| {
                let got = self
                    .recv_bytes(Source::Rank(r), TagSelector::Tag(tag), T::DATATYPE.kind, u64::MAX)
                    .map(|c| c.payload);
                (r, got)
            })
            .collect()
    }

    fn reduce_at_root<T: Reducible>(&self, send: &[T], op: ReductionOp, tag: Tag) -> Result<Vec<T>> {
        let mut contributions: Vec<Option<Vec<T>>> = vec![None; self.size() as usize];
        contributions[self.rank as usize] = Some(send.to_vec());
        let mut first_err = None;
        for (r, got) in self.collect::<T>(tag) {
            match got {
                Ok(p) => {
                    let vals = decode::<T>(&p);
                    if vals.len() != send.len() {
                        first_err.get_or_insert(count_mismatch("reduce", r, vals.len() as u64, send.len() as u64));
                    }
                    contributions[r as usize] = Some(vals);
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        let mut ranks = contributions.into_iter().map(|c| c.expect("all collected"));
        let mut acc = ranks.next().expect("non-empty");
        for c in ranks {
            for (a, b) in acc.iter_mut().zip(c) {
                *a = T::combine(op, *a, b);
            }
        }
        Ok(acc)
    }
}

impl Communicator {
    /// No rank returns before every rank has entered.
    pub fn barrier(&self) -> Result<()> {
        self.faults().check(ApiOp::Barrier)?;
        self.live()?.barrier_internal()
    }

    /// Every rank's `buf` ends equal to the root's. Lengths must agree.
    pub fn bcast<T: Element>(&self, buf: &mut [T], root: Rank) -> Result<()> {
        self.faults().check(ApiOp::Bcast)?;
        let c = self.live()?;
        c.check_rank(root, "root")?;
        c.bcast_internal(buf, root, TAG_BCAST)
    }

    /// Non-root side of a gather.
    pub fn gather<T: Element>(&self, send: &[T], root: Rank) -> Result<()> {
        self.faults().check(ApiOp::Gather)?;
        let c = self.non_root(root, "gather_root")?;
        c.send_bytes(root, TAG_GATHER, T::DATATYPE.kind, send.len() as u64, &to_wire_bytes(send))
    }

    /// Root side of a gather: rank `r`'s contribution lands at
    /// `recv[r * send.len()..]`. Every rank must contribute `send.len()` elements.
    pub fn gather_root<T: Element>(&self, send: &[T], recv: &mut [T]) -> Result<()> {
        self.faults().check(ApiOp::Gather)?;
        let c = self.live()?;
        let per = send.len();
        let need = per * c.size() as usize;
        let mut first_err = (recv.len() < need).then(|| {
            MpError::new(ErrorClass::Buffer, format!("gather needs {need} elements at root, got {}", recv.len()))
        });
        for (r, got) in c.collect::<T>(TAG_GATHER) {
            match got {
                Ok(p) if first_err.is_none() => {
                    let count = (p.len() / T::DATATYPE.extent) as u64;
                    if count != per as u64 {
                        first_err = Some(count_mismatch("gather", r, count, per as u64));
                        continue;
                    }
                    let at = r as usize * per * T::DATATYPE.extent;
                    copy_from_wire(&p, &mut bytemuck::cast_slice_mut(recv)[at..], T::DATATYPE.extent);
                }
                Ok(_) => {}
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        let at = c.rank as usize * per;
        recv[at..at + per].copy_from_slice(send);
        Ok(())
    }

    /// Non-root side of a gatherv: no counts or displacements.
    pub fn gatherv<T: Element>(&self, send: &[T], root: Rank) -> Result<()> {
        self.faults().check(ApiOp::Gatherv)?;
        let c = self.non_root(root, "gatherv_root")?;
        c.send_bytes(root, TAG_GATHERV, T::DATATYPE.kind, send.len() as u64, &to_wire_bytes(send))
    }

    /// Root side of a gatherv: rank `r`'s contribution of at most `counts[r]`
    /// elements lands at `recv[displs[r]..]`.
    pub fn gatherv_root<T: Element>(&self, send: &[T], recv: &mut [T], counts: &[u64], displs: &[u64]) -> Result<()> {
        self.faults().check(ApiOp::Gatherv)?;
        let c = self.live()?;
        let n = c.size() as usize;
        let mut first_err = None;
        if counts.len() != n || displs.len() != n {
            first_err = Some(MpError::new(
                ErrorClass::Count,
                format!("gatherv needs {n} counts and displacements, got {} and {}", counts.len(), displs.len()),
            ));
        } else if let Some(r) = (0..n).find(|&r| {
            counts[r].checked_add(displs[r]).is_none_or(|end| end > recv.len() as u64)
        }) {
            first_err = Some(MpError::new(
                ErrorClass::Buffer,
                format!("gatherv block of rank {r} ends past the receive buffer of {}", recv.len()),
            ));
        } else if send.len() as u64 > counts[c.rank as usize] {
            first_err = Some(count_mismatch("gatherv", c.rank, send.len() as u64, counts[c.rank as usize]));
        }
        for (r, got) in c.collect::<T>(TAG_GATHERV) {
            match got {
                Ok(p) if first_err.is_none() => {
                    let count = (p.len() / T::DATATYPE.extent) as u64;
                    if count > counts[r as usize] {
                        first_err = Some(count_mismatch("gatherv", r, count, counts[r as usize]));
                        continue;
                    }
                    let at = displs[r as usize] as usize * T::DATATYPE.extent;
                    copy_from_wire(&p, &mut bytemuck::cast_slice_mut(recv)[at..], T::DATATYPE.extent);
                }
                Ok(_) => {}
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        let at = displs[c.rank as usize] as usize;
        recv[at..at + send.len()].copy_from_slice(send);
        Ok(())
    }

    /// Non-root side of a reduce.
    pub fn reduce<T: Reducible>(&self, send: &[T], op: ReductionOp, root: Rank) -> Result<()> {
        self.faults().check(ApiOp::Reduce)?;
        let _ = op;
        let c = self.non_root(root, "reduce_root")?;
        c.send_bytes(root, TAG_REDUCE, T::DATATYPE.kind, send.len() as u64, &to_wire_bytes(send))
    }

    /// Root side of a reduce: `recv[i]` is the rank-ascending fold of every
    /// rank's `send[i]`.
    pub fn reduce_root<T: Reducible>(&self, send: &[T], recv: &mut [T], op: ReductionOp) -> Result<()> {
        self.faults().check(ApiOp::Reduce)?;
        let c = self.live()?;
        let short = recv.len() < send.len();
        let acc = c.reduce_at_root(send, op, TAG_REDUCE)?;
        if short {
            return Err(MpError::new(ErrorClass::Buffer, "reduce receive buffer shorter than send buffer"));
        }
        recv[..acc.len()].copy_from_slice(&acc);
        Ok(())
    }

    /// Reduce to rank 0, then broadcast. Errors detected at rank 0 are
    /// reported on every rank with the same class.
    pub fn allreduce<T: Reducible>(&self, send: &[T], recv: &mut [T], op: ReductionOp) -> Result<()> {
        self.faults().check(ApiOp::Allreduce)?;
        let c = self.live()?;
        if recv.len() != send.len() {
            // Local and symmetric: every rank passes the same lengths.
            return Err(MpError::new(ErrorClass::Buffer, "allreduce buffers differ in length"));
        }
        let status_tag = TagSelector::Tag(TAG_ALLREDUCE);
        if c.rank == 0 {
            let outcome = c.reduce_at_root(send, op, TAG_ALLREDUCE);
            let code = match &outcome {
                Ok(_) => 0i64,
                Err(e) => 1 + ErrorClass::ERRORS.iter().position(|&k| k == e.class).unwrap_or(8) as i64,
            };
            for r in 1..c.size() {
                c.send_bytes(r, TAG_ALLREDUCE, DatatypeKind::Int64, 1, &code.to_le_bytes())?;
            }
            let mut acc = outcome?;
            c.bcast_internal(&mut acc, 0, TAG_ALLREDUCE)?;
            recv.copy_from_slice(&acc);
        } else {
            c.send_bytes(0, TAG_ALLREDUCE, T::DATATYPE.kind, send.len() as u64, &to_wire_bytes(send))?;
            let got = c.recv_bytes(Source::Rank(0), status_tag, DatatypeKind::Int64, 1)?;
            let code = i64::from_le_bytes(got.payload[..8].try_into().expect("one i64"));
            if code != 0 {
                let class = ErrorClass::ERRORS[(code - 1) as usize];
                return Err(MpError::new(class, "allreduce failed at rank 0"));
            }
            c.bcast_internal(recv, 0, TAG_ALLREDUCE)?;
        }
        Ok(())
    }

    fn non_root(&self, root: Rank, root_fn: &str) -> Result<&CommInner> {
        let c = self.live()?;
        c.check_rank(root, "root")?;
        if root == c.rank {
            return Err(MpError::new(ErrorClass::Rank, format!("rank {root} is the root; call {root_fn}")));
        }
        Ok(c)
    }
}
