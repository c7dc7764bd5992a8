//! Every shim procedure against its idiomatic counterpart on randomized
//! argument vectors, valid and invalid.
//!
//! The oracle side applies the documented argument mapping (handle lookup,
//! count and datatype checks, negative ranks and tags as out-of-range
//! values), calls the idiomatic API and converts the class through the golden
//! code table. Both sides must agree on the code, every out-value and every
//! message the rank sends.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::rc::Rc;

use mmp_core::legacy::*;
use mmp_core::{
    datatype_of, run_in_process, Communicator, DatatypeKind, Element, EnvelopeHeader, ErrorClass, ReductionOp,
    Source, TagSelector, TapAction, Universe,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn golden_code(class: ErrorClass) -> i32 {
    crate::golden_codes()
        .into_iter()
        .find(|(name, _)| name == class.name())
        .map(|(_, code)| code)
        .expect("every class is in the golden table")
}

fn code(r: Result<(), ErrorClass>) -> i32 {
    r.map_or_else(golden_code, |_| 0)
}

fn class(e: mmp_core::MpError) -> ErrorClass {
    e.class
}

fn kind_code<T: Element>() -> i32 {
    match datatype_of::<T>().kind {
        DatatypeKind::Byte => 0,
        DatatypeKind::Int32 => 1,
        DatatypeKind::Int64 => 2,
        DatatypeKind::Float32 => 3,
        DatatypeKind::Float64 => 4,
    }
}

fn out_of_range(v: i32) -> u32 {
    if v < 0 {
        u32::MAX
    } else {
        v as u32
    }
}

fn source_sel(v: i32) -> Source {
    if v == -1 {
        Source::Any
    } else {
        Source::Rank(out_of_range(v))
    }
}

fn tag_sel(v: i32) -> TagSelector {
    if v == -1 {
        TagSelector::Any
    } else {
        TagSelector::Tag(out_of_range(v))
    }
}

fn op_of(code: i32) -> Option<ReductionOp> {
    ReductionOp::ALL.get(usize::try_from(code).ok()?).copied()
}

trait Sample: Element {
    fn sample(rng: &mut ChaCha8Rng) -> Self;
    fn reduce(c: &Communicator, send: &[Self], recv: &mut [Self], op: ReductionOp, root: u32, me: u32)
        -> Result<(), ErrorClass>;
    fn allreduce(c: &Communicator, send: &[Self], recv: &mut [Self], op: ReductionOp) -> Result<(), ErrorClass>;
}

impl Sample for u8 {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        rng.gen()
    }
    fn reduce(_: &Communicator, _: &[u8], _: &mut [u8], _: ReductionOp, _: u32, _: u32) -> Result<(), ErrorClass> {
        Err(ErrorClass::Type)
    }
    fn allreduce(_: &Communicator, _: &[u8], _: &mut [u8], _: ReductionOp) -> Result<(), ErrorClass> {
        Err(ErrorClass::Type)
    }
}

macro_rules! reducible_sample {
    ($t:ty, $rng:ident => $gen:expr) => {
        impl Sample for $t {
            fn sample($rng: &mut ChaCha8Rng) -> Self {
                $gen
            }
            fn reduce(
                c: &Communicator,
                send: &[Self],
                recv: &mut [Self],
                op: ReductionOp,
                root: u32,
                me: u32,
            ) -> Result<(), ErrorClass> {
                if root == me {
                    let m = send.len().min(recv.len());
                    c.reduce_root(send, &mut recv[..m], op).map_err(class)
                } else {
                    c.reduce(send, op, root).map_err(class)
                }
            }
            fn allreduce(c: &Communicator, send: &[Self], recv: &mut [Self], op: ReductionOp) -> Result<(), ErrorClass> {
                c.allreduce(send, recv, op).map_err(class)
            }
        }
    };
}

reducible_sample!(i32, rng => rng.gen_range(-50..50));
reducible_sample!(i64, rng => rng.gen());
reducible_sample!(f32, rng => rng.gen_range(-8.0..8.0));
reducible_sample!(f64, rng => rng.gen_range(-1e6..1e6));

macro_rules! typed {
    ($k:expr, $f:ident ( $($a:expr),* )) => {
        match $k {
            0 => $f::<u8>($($a),*),
            1 => $f::<i32>($($a),*),
            2 => $f::<i64>($($a),*),
            3 => $f::<f32>($($a),*),
            _ => $f::<f64>($($a),*),
        }
    };
}

type Sent = Vec<(EnvelopeHeader, Vec<u8>)>;

fn capture(u: &Universe, action: TapAction) -> Rc<RefCell<Sent>> {
    let log = Rc::new(RefCell::new(Vec::new()));
    let sink = log.clone();
    u.set_send_tap(Some(Box::new(move |m| {
        sink.borrow_mut().push((m.header, m.payload.to_vec()));
        action
    })));
    log
}

fn take(log: &Rc<RefCell<Sent>>) -> Sent {
    std::mem::take(&mut log.borrow_mut())
}

#[derive(Debug, PartialEq, Default)]
struct Obs {
    codes: Vec<i32>,
    bytes: Vec<u8>,
    status: LegacyStatus,
    values: Vec<i64>,
    sent: Sent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum H {
    World,
    Dup,
    Freed,
    Null,
    Req,
}

fn pick_h(rng: &mut ChaCha8Rng) -> H {
    match rng.gen_range(0..20) {
        0 => H::Freed,
        1 => H::Null,
        2 => H::Req,
        3..=11 => H::World,
        _ => H::Dup,
    }
}

/// Handles shared by every trial of a test. Created collectively.
struct Fixture<'u> {
    u: &'u Universe,
    dup: Communicator,
    dup_h: LegacyHandle,
    freed_h: LegacyHandle,
    req_h: LegacyHandle,
    log: Option<Rc<RefCell<Sent>>>,
}

impl<'u> Fixture<'u> {
    fn new(u: &'u Universe) -> Self {
        let dup = u.world().dup().unwrap();
        let dup_h = comm_to_legacy(&dup).unwrap();
        let mut freed_h = LegacyHandle::NULL;
        assert_eq!(legacy_comm_dup(LEGACY_COMM_WORLD, &mut freed_h), SUCCESS);
        let mut gone = freed_h;
        assert_eq!(legacy_comm_free(&mut gone), SUCCESS);
        let mut req_h = LegacyHandle::NULL;
        let buf: &'static mut [u8] = Box::leak(Box::new([0u8; 1]));
        let rc = unsafe { legacy_irecv(buf, 1, BYTE, 0, 30000, LEGACY_COMM_WORLD, &mut req_h) };
        assert_eq!(rc, SUCCESS);
        Fixture { u, dup, dup_h, freed_h, req_h, log: None }
    }

    /// Messages captured since the last call.
    fn sent(&self) -> Sent {
        self.log.as_ref().map(take).unwrap_or_default()
    }

    fn handle(&self, h: H) -> LegacyHandle {
        match h {
            H::World => LEGACY_COMM_WORLD,
            H::Dup => self.dup_h,
            H::Freed => self.freed_h,
            H::Null => LegacyHandle::NULL,
            H::Req => self.req_h,
        }
    }

    fn comm(&self, h: H) -> Option<&Communicator> {
        match h {
            H::World => Some(self.u.world()),
            H::Dup => Some(&self.dup),
            _ => None,
        }
    }

    /// Handle lookup, then count against the buffer, then datatype.
    fn pre<T: Element>(&self, h: H, count: i64, len: usize, dtype: i32) -> Result<(&Communicator, usize), ErrorClass> {
        let c = self.comm(h).ok_or(ErrorClass::Comm)?;
        if count < 0 {
            return Err(ErrorClass::Count);
        }
        if count as u64 > len as u64 {
            return Err(ErrorClass::Buffer);
        }
        if dtype != kind_code::<T>() {
            return Err(ErrorClass::Type);
        }
        Ok((c, count as usize))
    }
}

fn sample_vec<T: Sample>(rng: &mut ChaCha8Rng, len: usize) -> Vec<T> {
    (0..len).map(|_| T::sample(rng)).collect()
}

fn count_arg(rng: &mut ChaCha8Rng, len: usize, big: bool) -> i64 {
    match rng.gen_range(0..20) {
        0 => -1,
        1 => -(rng.gen_range(2..1000)),
        2 => len as i64 + rng.gen_range(1..3),
        3 if big => 1 << 33,
        _ => rng.gen_range(0..=len as i64),
    }
}

fn dtype_arg<T: Element>(rng: &mut ChaCha8Rng) -> i32 {
    if rng.gen_bool(0.85) {
        kind_code::<T>()
    } else {
        rng.gen_range(-1..7)
    }
}

fn narrow(count: i64) -> i32 {
    count.clamp(i32::MIN as i64, i32::MAX as i64) as i32
}

fn bytes<T: Element>(v: &[T]) -> Vec<u8> {
    bytemuck::cast_slice(v).to_vec()
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, xs: &[T]) -> T {
    xs[rng.gen_range(0..xs.len())]
}

fn status_of(s: mmp_core::Status) -> LegacyStatus {
    LegacyStatus { source: s.source as i32, tag: s.tag as i32, error: golden_code(s.error), count: s.count as i64 }
}

// ---- point to point, one rank talking to itself ----

fn send_trial<T: Sample>(fx: &Fixture, rng: &mut ChaCha8Rng, big: bool) -> (Obs, Obs) {
    let log = capture(fx.u, TapAction::Swallow);
    let len = rng.gen_range(0..6);
    let buf: Vec<T> = sample_vec(rng, len);
    let count = count_arg(rng, len, big);
    let dtype = dtype_arg::<T>(rng);
    let dest = pick(rng, &[0, 0, 0, 1, -1, 7]);
    let any = rng.gen_range(0..100);
    let tag = pick(rng, &[0, 5, 32767, 32768, -1, -9, any]);
    let h = pick_h(rng);

    let rc = if big {
        legacy_send_c(&buf, count, dtype, dest, tag, fx.handle(h))
    } else {
        legacy_send(&buf, narrow(count), dtype, dest, tag, fx.handle(h))
    };
    let legacy = Obs { codes: vec![rc], sent: take(&log), ..Obs::default() };

    let r = fx
        .pre::<T>(h, count, len, dtype)
        .and_then(|(c, n)| c.send(&buf[..n], out_of_range(dest), out_of_range(tag)).map_err(class));
    let oracle = Obs { codes: vec![code(r)], sent: take(&log), ..Obs::default() };
    fx.u.set_send_tap(None);
    (legacy, oracle)
}

fn isend_trial<T: Sample>(fx: &Fixture, rng: &mut ChaCha8Rng, big: bool) -> (Obs, Obs) {
    let log = capture(fx.u, TapAction::Swallow);
    let len = rng.gen_range(0..6);
    let buf: Vec<T> = sample_vec(rng, len);
    let count = count_arg(rng, len, big);
    let dtype = dtype_arg::<T>(rng);
    let dest = pick(rng, &[0, 0, 0, 1, -1]);
    let any = rng.gen_range(0..100);
    let tag = pick(rng, &[0, 5, 32768, -2, any]);
    let h = pick_h(rng);

    let mut req = LegacyHandle::NULL;
    let mut st = LegacyStatus::default();
    let rc = if big {
        legacy_isend_c(&buf, count, dtype, dest, tag, fx.handle(h), &mut req)
    } else {
        legacy_isend(&buf, narrow(count), dtype, dest, tag, fx.handle(h), &mut req)
    };
    let mut codes = vec![rc];
    if rc == SUCCESS {
        codes.push(legacy_wait(&mut req, &mut st));
        assert!(req.is_null());
    }
    let legacy = Obs { codes, status: st, sent: take(&log), ..Obs::default() };

    let mut codes = Vec::new();
    let mut status = LegacyStatus::default();
    match fx.pre::<T>(h, count, len, dtype) {
        Err(e) => codes.push(golden_code(e)),
        Ok((c, n)) => match c.isend(&buf[..n], out_of_range(dest), out_of_range(tag)) {
            Err(e) => codes.push(golden_code(e.class)),
            Ok(mut r) => {
                codes.push(0);
                let s = r.wait().unwrap();
                codes.push(0);
                status = status_of(s);
            }
        },
    }
    let oracle = Obs { codes, status, sent: take(&log), ..Obs::default() };
    fx.u.set_send_tap(None);
    (legacy, oracle)
}

/// A queued message for a receive trial, possibly of another datatype.
struct Preload {
    tag: i32,
    mismatch: bool,
    len: usize,
    seed: u64,
}

impl Preload {
    fn new<T: Sample>(rng: &mut ChaCha8Rng) -> Self {
        Preload { tag: rng.gen_range(0..100), mismatch: rng.gen_bool(0.1), len: rng.gen_range(0..6), seed: rng.gen() }
    }

    fn send<T: Sample>(&self, c: &Communicator) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        if self.mismatch {
            if datatype_of::<T>().kind == DatatypeKind::Byte {
                c.send(&sample_vec::<i32>(&mut rng, self.len), 0, self.tag as u32).unwrap();
            } else {
                c.send(&sample_vec::<u8>(&mut rng, self.len), 0, self.tag as u32).unwrap();
            }
        } else {
            c.send(&sample_vec::<T>(&mut rng, self.len), 0, self.tag as u32).unwrap();
        }
    }

    /// Takes the message off the queue if the trial left it there.
    fn drain<T: Sample>(&self, u: &Universe, c: &Communicator) -> i64 {
        u.progress();
        let left = u.unexpected_len(c) as i64;
        if left > 0 {
            let sel = TagSelector::Tag(self.tag as u32);
            if self.mismatch && datatype_of::<T>().kind == DatatypeKind::Byte {
                c.recv(&mut [0i32; 8], 0, sel).unwrap();
            } else if self.mismatch {
                c.recv(&mut [0u8; 8], 0, sel).unwrap();
            } else {
                c.recv(&mut [T::zeroed(); 8], 0, sel).unwrap();
            }
        }
        left
    }
}

struct RecvArgs {
    len: usize,
    count: i64,
    dtype: i32,
    source: i32,
    tag: i32,
    h: H,
}

impl RecvArgs {
    fn new<T: Sample>(rng: &mut ChaCha8Rng, pre: &Preload, big: bool) -> Self {
        let len = rng.gen_range(0..6);
        RecvArgs {
            len,
            count: count_arg(rng, len, big),
            dtype: dtype_arg::<T>(rng),
            source: pick(rng, &[-1, 0, 0, 1, -3]),
            tag: pick(rng, &[-1, pre.tag, pre.tag, -4, 32768]),
            h: pick_h(rng),
        }
    }
}

fn recv_trial<T: Sample>(fx: &Fixture, rng: &mut ChaCha8Rng, big: bool) -> (Obs, Obs) {
    let pre = Preload::new::<T>(rng);
    let a = RecvArgs::new::<T>(rng, &pre, big);
    let queue = fx.comm(a.h).unwrap_or(fx.u.world());

    pre.send::<T>(queue);
    let mut buf = vec![T::zeroed(); a.len];
    let mut st = LegacyStatus::default();
    let rc = if big {
        legacy_recv_c(&mut buf, a.count, a.dtype, a.source, a.tag, fx.handle(a.h), &mut st)
    } else {
        legacy_recv(&mut buf, narrow(a.count), a.dtype, a.source, a.tag, fx.handle(a.h), &mut st)
    };
    let left = pre.drain::<T>(fx.u, queue);
    let legacy = Obs { codes: vec![rc], bytes: bytes(&buf), status: st, values: vec![left], ..Obs::default() };

    pre.send::<T>(queue);
    let mut buf = vec![T::zeroed(); a.len];
    let mut status = LegacyStatus::default();
    let r = fx.pre::<T>(a.h, a.count, a.len, a.dtype).and_then(|(c, n)| {
        let s = c.recv(&mut buf[..n], source_sel(a.source), tag_sel(a.tag)).map_err(class)?;
        status = status_of(s);
        if s.error == ErrorClass::Truncate {
            return Err(ErrorClass::Truncate);
        }
        Ok(())
    });
    let left = pre.drain::<T>(fx.u, queue);
    let oracle = Obs { codes: vec![code(r)], bytes: bytes(&buf), status, values: vec![left], ..Obs::default() };
    (legacy, oracle)
}

fn irecv_trial<T: Sample>(fx: &Fixture, rng: &mut ChaCha8Rng, big: bool) -> (Obs, Obs) {
    let pre = Preload::new::<T>(rng);
    let a = RecvArgs::new::<T>(rng, &pre, big);
    let queue = fx.comm(a.h).unwrap_or(fx.u.world());

    pre.send::<T>(queue);
    let mut buf = vec![T::zeroed(); a.len];
    let mut st = LegacyStatus::default();
    let mut req = LegacyHandle::NULL;
    let rc = unsafe {
        if big {
            legacy_irecv_c(&mut buf, a.count, a.dtype, a.source, a.tag, fx.handle(a.h), &mut req)
        } else {
            legacy_irecv(&mut buf, narrow(a.count), a.dtype, a.source, a.tag, fx.handle(a.h), &mut req)
        }
    };
    let mut codes = vec![rc];
    if rc == SUCCESS {
        codes.push(legacy_wait(&mut req, &mut st));
    }
    let left = pre.drain::<T>(fx.u, queue);
    let legacy = Obs { codes, bytes: bytes(&buf), status: st, values: vec![left], ..Obs::default() };

    pre.send::<T>(queue);
    let mut buf = vec![T::zeroed(); a.len];
    let mut status = LegacyStatus::default();
    let mut codes = Vec::new();
    match fx.pre::<T>(a.h, a.count, a.len, a.dtype) {
        Err(e) => codes.push(golden_code(e)),
        Ok((c, n)) => match c.irecv(&mut buf[..n], source_sel(a.source), tag_sel(a.tag)) {
            Err(e) => codes.push(golden_code(e.class)),
            Ok(mut r) => {
                codes.push(0);
                match r.wait() {
                    Err(e) => codes.push(golden_code(e.class)),
                    Ok(s) => {
                        status = status_of(s);
                        codes.push(if s.error == ErrorClass::Truncate { golden_code(ErrorClass::Truncate) } else { 0 });
                    }
                }
            }
        },
    }
    let left = pre.drain::<T>(fx.u, queue);
    let oracle = Obs { codes, bytes: bytes(&buf), status, values: vec![left], ..Obs::default() };
    (legacy, oracle)
}

fn wait_trial(fx: &Fixture, rng: &mut ChaCha8Rng) -> (Obs, Obs) {
    let tag = rng.gen_range(0..100);
    let mut fresh = LegacyHandle::NULL;
    assert_eq!(legacy_isend(&[1i64, 2], 2, INT64, 0, tag, LEGACY_COMM_WORLD, &mut fresh), SUCCESS);
    let mut stale = LegacyHandle::NULL;
    assert_eq!(legacy_isend(&[3i64], 1, INT64, 0, tag, LEGACY_COMM_WORLD, &mut stale), SUCCESS);
    assert_eq!(legacy_wait(&mut stale.clone(), &mut LegacyStatus::default()), SUCCESS);
    let which = rng.gen_range(0..5);
    let mut h = [fresh, stale, LEGACY_COMM_WORLD, fx.dup_h, LegacyHandle::NULL][which];
    let mut st = LegacyStatus::default();
    let rc = legacy_wait(&mut h, &mut st);
    let legacy = Obs { codes: vec![rc], status: st, values: vec![h.0 as i64], ..Obs::default() };

    let oracle = if which == 0 {
        let status = LegacyStatus { source: 0, tag, error: 0, count: 2 };
        Obs { codes: vec![0], status, values: vec![0], ..Obs::default() }
    } else {
        let before = [fresh, stale, LEGACY_COMM_WORLD, fx.dup_h, LegacyHandle::NULL][which];
        Obs { codes: vec![golden_code(ErrorClass::Request)], values: vec![before.0 as i64], ..Obs::default() }
    };
    if which != 0 {
        assert_eq!(legacy_wait(&mut fresh, &mut st), SUCCESS);
    }
    for _ in 0..2 {
        fx.u.world().recv(&mut [0i64; 2], 0, tag as u32).unwrap();
    }
    (legacy, oracle)
}


fn check_all(name: &str, trials: u64, results: Vec<Vec<(Obs, Obs)>>) -> Result<Coverage, String> {
    let mut n = 0;
    for (rank, trials) in results.iter().enumerate() {
        for (t, (legacy, oracle)) in trials.iter().enumerate() {
            if legacy != oracle {
                return Err(format!("{name}: rank {rank} vector {t}: legacy {legacy:?} != oracle {oracle:?}"));
            }
            n += 1;
        }
    }
    if n < trials as usize {
        return Err(format!("{name}: only {n} vectors"));
    }
    let codes = results.iter().flatten().flat_map(|(l, _)| l.codes.iter().copied()).collect();
    Ok(Coverage { vectors: n, codes })
}

/// Vectors compared and the distinct codes the shim returned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coverage {
    pub vectors: usize,
    pub codes: BTreeSet<i32>,
}

type P2p = fn(&Fixture, &mut ChaCha8Rng) -> (Obs, Obs);

fn p2p(name: &str, trials: u64, seed: u64, f: P2p) -> Result<Coverage, String> {
    let results = run_in_process(1, |u| {
        let fx = Fixture::new(u);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name.len() as u64 * 7919);
        (0..trials).map(|_| f(&fx, &mut rng)).collect::<Vec<_>>()
    });
    check_all(name, trials, results)
}

// ---- collectives and communicator management on three ranks ----

const NP: u32 = 3;

/// Arguments all ranks agree on come from `shared`; per-rank data from `local`.
struct Rngs {
    shared: ChaCha8Rng,
    local: ChaCha8Rng,
}

type Coll = fn(&Fixture, &mut Rngs) -> (Obs, Obs);

fn collective(name: &str, trials: u64, seed: u64, f: Coll) -> Result<Coverage, String> {
    let results = run_in_process(NP, |u| {
        let mut fx = Fixture::new(u);
        fx.log = Some(capture(u, TapAction::Forward));
        let mut out = Vec::new();
        for t in 0..trials {
            let mut rngs = Rngs {
                shared: ChaCha8Rng::seed_from_u64(seed ^ t ^ (name.len() as u64) << 20),
                local: ChaCha8Rng::seed_from_u64(seed ^ t ^ (u.rank() as u64) << 40),
            };
            out.push(f(&fx, &mut rngs));
        }
        u.set_send_tap(None);
        out
    });
    check_all(name, trials, results)
}

fn root_arg(rng: &mut ChaCha8Rng) -> i32 {
    pick(rng, &[0, 1, 2, 0, 1, 2, 0, 1, 2, -1, 3])
}

fn me(fx: &Fixture) -> u32 {
    fx.u.rank()
}

fn bcast_trial<T: Sample>(fx: &Fixture, r: &mut Rngs, big: bool) -> (Obs, Obs) {
    let len = r.shared.gen_range(0..6);
    let count = count_arg(&mut r.shared, len, big);
    let dtype = dtype_arg::<T>(&mut r.shared);
    let root = root_arg(&mut r.shared);
    let h = pick_h(&mut r.shared);
    let data: Vec<T> =
        if root >= 0 && root as u32 == me(fx) { sample_vec(&mut r.local, len) } else { vec![T::zeroed(); len] };

    let mut buf = data.clone();
    let rc = if big {
        legacy_bcast_c(&mut buf, count, dtype, root, fx.handle(h))
    } else {
        legacy_bcast(&mut buf, narrow(count), dtype, root, fx.handle(h))
    };
    let legacy = Obs { codes: vec![rc], bytes: bytes(&buf), sent: fx.sent(), ..Obs::default() };

    let mut buf = data;
    let r = fx.pre::<T>(h, count, len, dtype).and_then(|(c, n)| c.bcast(&mut buf[..n], out_of_range(root)).map_err(class));
    (legacy, Obs { codes: vec![code(r)], bytes: bytes(&buf), sent: fx.sent(), ..Obs::default() })
}

fn op_arg(rng: &mut ChaCha8Rng) -> i32 {
    pick(rng, &[0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3, -1, 4])
}

fn reduce_trial<T: Sample>(fx: &Fixture, r: &mut Rngs, big: bool) -> (Obs, Obs) {
    let len = r.shared.gen_range(0..6);
    let count = count_arg(&mut r.shared, len, big);
    let dtype = dtype_arg::<T>(&mut r.shared);
    let op = op_arg(&mut r.shared);
    let root = root_arg(&mut r.shared);
    let h = pick_h(&mut r.shared);
    let rlen = if r.shared.gen_bool(0.8) { len } else { r.shared.gen_range(0..=len) };
    let send: Vec<T> = sample_vec(&mut r.local, len);

    let mut recv = vec![T::zeroed(); rlen];
    let rc = if big {
        legacy_reduce_c(&send, &mut recv, count, dtype, op, root, fx.handle(h))
    } else {
        legacy_reduce(&send, &mut recv, narrow(count), dtype, op, root, fx.handle(h))
    };
    let legacy = Obs { codes: vec![rc], bytes: bytes(&recv), sent: fx.sent(), ..Obs::default() };

    let mut recv = vec![T::zeroed(); rlen];
    let r = fx.pre::<T>(h, count, len, dtype).and_then(|(c, n)| {
        let op = op_of(op).ok_or(ErrorClass::Other)?;
        T::reduce(c, &send[..n], &mut recv, op, out_of_range(root), me(fx))
    });
    (legacy, Obs { codes: vec![code(r)], bytes: bytes(&recv), sent: fx.sent(), ..Obs::default() })
}

fn allreduce_trial<T: Sample>(fx: &Fixture, r: &mut Rngs) -> (Obs, Obs) {
    let len = r.shared.gen_range(0..6);
    let count = count_arg(&mut r.shared, len, false);
    let dtype = dtype_arg::<T>(&mut r.shared);
    let op = op_arg(&mut r.shared);
    let h = pick_h(&mut r.shared);
    let rlen = if r.shared.gen_bool(0.85) { len } else { r.shared.gen_range(0..=len) };
    let send: Vec<T> = sample_vec(&mut r.local, len);

    let mut recv = vec![T::zeroed(); rlen];
    let rc = legacy_allreduce(&send, &mut recv, narrow(count), dtype, op, fx.handle(h));
    let legacy = Obs { codes: vec![rc], bytes: bytes(&recv), sent: fx.sent(), ..Obs::default() };

    let mut recv = vec![T::zeroed(); rlen];
    // Both buffers are checked against the count before the datatype.
    let r = fx.pre::<T>(h, count, len.min(rlen), dtype).and_then(|(c, n)| {
        let op = op_of(op).ok_or(ErrorClass::Other)?;
        T::allreduce(c, &send[..n], &mut recv[..n], op)
    });
    (legacy, Obs { codes: vec![code(r)], bytes: bytes(&recv), sent: fx.sent(), ..Obs::default() })
}

fn gather_trial<T: Sample>(fx: &Fixture, r: &mut Rngs, big: bool) -> (Obs, Obs) {
    let len = r.shared.gen_range(0..5);
    let sendcount = count_arg(&mut r.shared, len, big);
    let sendtype = dtype_arg::<T>(&mut r.shared);
    let root = root_arg(&mut r.shared);
    let h = pick_h(&mut r.shared);
    let at_root = root >= 0 && root as u32 == me(fx);
    let recvcount = if r.local.gen_bool(0.9) { sendcount } else { r.local.gen_range(-1..6) };
    let recvtype = dtype_arg::<T>(&mut r.local);
    let full = (sendcount.max(0) as usize).min(len) * NP as usize;
    let rlen = if r.local.gen_bool(0.85) { full } else { r.local.gen_range(0..=full) };
    let send: Vec<T> = sample_vec(&mut r.local, len);

    let mut recv = vec![T::zeroed(); rlen];
    let rc = if big {
        legacy_gather_c(&send, sendcount, sendtype, &mut recv, recvcount, recvtype, root, fx.handle(h))
    } else {
        legacy_gather(&send, narrow(sendcount), sendtype, &mut recv, narrow(recvcount), recvtype, root, fx.handle(h))
    };
    let legacy = Obs { codes: vec![rc], bytes: bytes(&recv), sent: fx.sent(), ..Obs::default() };

    let mut recv = vec![T::zeroed(); rlen];
    let r = fx.pre::<T>(h, sendcount, len, sendtype).and_then(|(c, n)| {
        if !at_root {
            return c.gather(&send[..n], out_of_range(root)).map_err(class);
        }
        let root_err = if recvtype != kind_code::<T>() {
            Some(ErrorClass::Type)
        } else if recvcount != sendcount {
            Some(ErrorClass::Count)
        } else {
            None
        };
        if let Some(e) = root_err {
            let mut scratch = vec![T::zeroed(); n * NP as usize];
            let _ = c.gather_root(&send[..n], &mut scratch);
            return Err(e);
        }
        let m = (n * NP as usize).min(rlen);
        c.gather_root(&send[..n], &mut recv[..m]).map_err(class)
    });
    (legacy, Obs { codes: vec![code(r)], bytes: bytes(&recv), sent: fx.sent(), ..Obs::default() })
}

fn gatherv_trial<T: Sample>(fx: &Fixture, r: &mut Rngs, big: bool) -> (Obs, Obs) {
    let counts: Vec<i64> = (0..NP).map(|_| r.shared.gen_range(0..4)).collect();
    let mine = counts[me(fx) as usize];
    let len = mine as usize + r.shared.gen_range(0..2);
    let sendcount = match r.shared.gen_range(0..20) {
        0 => -1,
        1 => len as i64 + 1,
        _ => mine,
    };
    let sendtype = dtype_arg::<T>(&mut r.shared);
    let root = root_arg(&mut r.shared);
    let h = pick_h(&mut r.shared);
    let at_root = root >= 0 && root as u32 == me(fx);

    let mut recvcounts = counts.clone();
    let mut displs = Vec::new();
    let mut at = 0;
    for &c in &counts {
        at += r.local.gen_range(0..2);
        displs.push(at);
        at += c;
    }
    match r.local.gen_range(0..12) {
        0 => recvcounts[r.local.gen_range(0..NP as usize)] -= 1,
        1 => displs[r.local.gen_range(0..NP as usize)] = -1,
        2 => recvcounts.truncate(NP as usize - 1),
        3 => displs[NP as usize - 1] += 10,
        _ => {}
    }
    let recvtype = dtype_arg::<T>(&mut r.local);
    let rlen = at as usize + r.local.gen_range(0..2);
    let send: Vec<T> = sample_vec(&mut r.local, len);

    let mut recv = vec![T::zeroed(); rlen];
    let rc = if big {
        legacy_gatherv_c(&send, sendcount, sendtype, &mut recv, &recvcounts, &displs, recvtype, root, fx.handle(h))
    } else {
        let c32: Vec<i32> = recvcounts.iter().map(|&c| c as i32).collect();
        let d32: Vec<i32> = displs.iter().map(|&d| d as i32).collect();
        legacy_gatherv(&send, narrow(sendcount), sendtype, &mut recv, &c32, &d32, recvtype, root, fx.handle(h))
    };
    let legacy = Obs { codes: vec![rc], bytes: bytes(&recv), sent: fx.sent(), ..Obs::default() };

    let mut recv = vec![T::zeroed(); rlen];
    let r = fx.pre::<T>(h, sendcount, len, sendtype).and_then(|(c, n)| {
        if !at_root {
            return c.gatherv(&send[..n], out_of_range(root)).map_err(class);
        }
        let negative = recvcounts.iter().chain(&displs).any(|&v| v < 0);
        let root_err = if recvtype != kind_code::<T>() {
            Some(ErrorClass::Type)
        } else if negative {
            Some(ErrorClass::Count)
        } else {
            None
        };
        if let Some(e) = root_err {
            let wide: Vec<u64> = vec![8; NP as usize];
            let at: Vec<u64> = (0..NP as u64).map(|i| i * 8).collect();
            let _ = c.gatherv_root(&send[..n], &mut vec![T::zeroed(); 8 * NP as usize], &wide, &at);
            return Err(e);
        }
        let cu: Vec<u64> = recvcounts.iter().map(|&v| v as u64).collect();
        let du: Vec<u64> = displs.iter().map(|&v| v as u64).collect();
        c.gatherv_root(&send[..n], &mut recv, &cu, &du).map_err(class)
    });
    (legacy, Obs { codes: vec![code(r)], bytes: bytes(&recv), sent: fx.sent(), ..Obs::default() })
}

fn barrier_trial(fx: &Fixture, r: &mut Rngs) -> (Obs, Obs) {
    let h = pick_h(&mut r.shared);
    let legacy = Obs { codes: vec![legacy_barrier(fx.handle(h))], sent: fx.sent(), ..Obs::default() };
    let r = fx.comm(h).ok_or(ErrorClass::Comm).and_then(|c| c.barrier().map_err(class));
    (legacy, Obs { codes: vec![code(r)], sent: fx.sent(), ..Obs::default() })
}

fn rank_size_trial(fx: &Fixture, r: &mut Rngs) -> (Obs, Obs) {
    let h = pick_h(&mut r.shared);
    let (mut rank, mut size) = (-9, -9);
    let codes = vec![legacy_comm_rank(fx.handle(h), &mut rank), legacy_comm_size(fx.handle(h), &mut size)];
    let legacy = Obs { codes, values: vec![rank as i64, size as i64], ..Obs::default() };
    let oracle = match fx.comm(h) {
        Some(c) => Obs {
            codes: vec![0, 0],
            values: vec![c.rank().unwrap() as i64, c.size().unwrap() as i64],
            ..Obs::default()
        },
        None => {
            let e = golden_code(ErrorClass::Comm);
            Obs { codes: vec![e, e], values: vec![-9, -9], ..Obs::default() }
        }
    };
    (legacy, oracle)
}

/// Rank and size of a new legacy communicator, which is then freed.
fn describe_and_free(rc: i32, mut h: LegacyHandle) -> Obs {
    if rc != SUCCESS {
        return Obs { codes: vec![rc], values: vec![h.0 as i64], ..Obs::default() };
    }
    let (mut rank, mut size) = (0, 0);
    assert_eq!(legacy_comm_rank(h, &mut rank), SUCCESS);
    assert_eq!(legacy_comm_size(h, &mut size), SUCCESS);
    assert_eq!(legacy_comm_free(&mut h), SUCCESS);
    Obs { codes: vec![rc], values: vec![rank as i64, size as i64], ..Obs::default() }
}

fn describe(r: mmp_core::Result<Communicator>) -> Obs {
    match r {
        Ok(c) => Obs { codes: vec![0], values: vec![c.rank().unwrap() as i64, c.size().unwrap() as i64], ..Obs::default() },
        Err(e) => Obs { codes: vec![golden_code(e.class)], values: vec![0], ..Obs::default() },
    }
}

fn dup_trial(fx: &Fixture, r: &mut Rngs) -> (Obs, Obs) {
    let h = pick_h(&mut r.shared);
    let mut new = LegacyHandle::NULL;
    let legacy = describe_and_free(legacy_comm_dup(fx.handle(h), &mut new), new);
    let oracle = match fx.comm(h) {
        Some(c) => describe(c.dup()),
        None => Obs { codes: vec![golden_code(ErrorClass::Comm)], values: vec![0], ..Obs::default() },
    };
    (Obs { sent: Vec::new(), ..legacy }, oracle)
}

fn split_trial(fx: &Fixture, r: &mut Rngs) -> (Obs, Obs) {
    let h = pick_h(&mut r.shared);
    let color = pick(&mut r.local, &[0, 1, 2, 0, 1, -1]);
    let key = r.local.gen_range(-3..3);
    let mut new = LegacyHandle::NULL;
    let legacy = describe_and_free(legacy_comm_split(fx.handle(h), color, key, &mut new), new);
    let oracle = match fx.comm(h) {
        Some(c) => describe(c.split(color, key)),
        None => Obs { codes: vec![golden_code(ErrorClass::Comm)], values: vec![0], ..Obs::default() },
    };
    (legacy, oracle)
}

fn free_trial(fx: &Fixture, r: &mut Rngs) -> (Obs, Obs) {
    let h = pick_h(&mut r.shared);
    // A valid handle other than the world is a fresh duplicate, so the
    // shared fixture handles survive.
    let fresh = h == H::Dup;
    let mut target = LegacyHandle::NULL;
    if fresh {
        assert_eq!(legacy_comm_dup(fx.handle(H::World), &mut target), SUCCESS);
    } else {
        target = fx.handle(h);
    }
    let before = target;
    let rc = legacy_comm_free(&mut target);
    let legacy = Obs { codes: vec![rc], values: vec![target.0 as i64], ..Obs::default() };
    let oracle = if fresh {
        Obs { codes: vec![0], values: vec![0], ..Obs::default() }
    } else {
        Obs { codes: vec![golden_code(ErrorClass::Comm)], values: vec![before.0 as i64], ..Obs::default() }
    };
    (legacy, oracle)
}

/// Communicator management sends different context proposals on each side,
/// so only codes and out-values are compared.
fn comm_management(name: &str, trials: u64, seed: u64, f: Coll) -> Result<Coverage, String> {
    let results = run_in_process(NP, |u| {
        let fx = Fixture::new(u);
        (0..trials)
            .map(|t| {
                let mut rngs = Rngs {
                    shared: ChaCha8Rng::seed_from_u64(seed ^ t ^ 0xABCD),
                    local: ChaCha8Rng::seed_from_u64(seed ^ t ^ (u.rank() as u64) << 40),
                };
                f(&fx, &mut rngs)
            })
            .collect::<Vec<_>>()
    });
    check_all(name, trials, results)
}

/// Shim procedures covered by [`run`].
pub const OPS: [&str; 25] = [
    "send", "send_c", "recv", "recv_c", "isend", "isend_c", "irecv", "irecv_c", "wait", "barrier", "bcast",
    "bcast_c", "reduce", "reduce_c", "allreduce", "gather", "gather_c", "gatherv", "gatherv_c", "comm_rank",
    "comm_size", "comm_dup", "comm_split", "comm_free", "conversions",
];

/// Compares `trials` random vectors of shim procedure `op` against the oracle.
pub fn run(op: &str, trials: u64, seed: u64) -> Result<Coverage, String> {
    match op {
        "send" => p2p(op, trials, seed, |fx, rng| typed!(rng.gen_range(0..5), send_trial(fx, rng, false))),
        "send_c" => p2p(op, trials, seed, |fx, rng| typed!(rng.gen_range(0..5), send_trial(fx, rng, true))),
        "recv" => p2p(op, trials, seed, |fx, rng| typed!(rng.gen_range(0..5), recv_trial(fx, rng, false))),
        "recv_c" => p2p(op, trials, seed, |fx, rng| typed!(rng.gen_range(0..5), recv_trial(fx, rng, true))),
        "isend" => p2p(op, trials, seed, |fx, rng| typed!(rng.gen_range(0..5), isend_trial(fx, rng, false))),
        "isend_c" => p2p(op, trials, seed, |fx, rng| typed!(rng.gen_range(0..5), isend_trial(fx, rng, true))),
        "irecv" => p2p(op, trials, seed, |fx, rng| typed!(rng.gen_range(0..5), irecv_trial(fx, rng, false))),
        "irecv_c" => p2p(op, trials, seed, |fx, rng| typed!(rng.gen_range(0..5), irecv_trial(fx, rng, true))),
        "wait" => p2p(op, trials, seed, wait_trial),
        "barrier" => collective(op, trials, seed, barrier_trial),
        "bcast" => collective(op, trials, seed, |fx, r| typed!(r.shared.gen_range(0..5), bcast_trial(fx, r, false))),
        "bcast_c" => collective(op, trials, seed, |fx, r| typed!(r.shared.gen_range(0..5), bcast_trial(fx, r, true))),
        "reduce" => collective(op, trials, seed, |fx, r| typed!(r.shared.gen_range(0..5), reduce_trial(fx, r, false))),
        "reduce_c" => collective(op, trials, seed, |fx, r| typed!(r.shared.gen_range(0..5), reduce_trial(fx, r, true))),
        "allreduce" => collective(op, trials, seed, |fx, r| typed!(r.shared.gen_range(0..5), allreduce_trial(fx, r))),
        "gather" => collective(op, trials, seed, |fx, r| typed!(r.shared.gen_range(0..5), gather_trial(fx, r, false))),
        "gather_c" => collective(op, trials, seed, |fx, r| typed!(r.shared.gen_range(0..5), gather_trial(fx, r, true))),
        "gatherv" => collective(op, trials, seed, |fx, r| typed!(r.shared.gen_range(0..5), gatherv_trial(fx, r, false))),
        "gatherv_c" => collective(op, trials, seed, |fx, r| typed!(r.shared.gen_range(0..5), gatherv_trial(fx, r, true))),
        "comm_rank" | "comm_size" => comm_management(op, trials, seed, rank_size_trial),
        "comm_dup" => comm_management(op, trials, seed, dup_trial),
        "comm_split" => comm_management(op, trials, seed, split_trial),
        "comm_free" => comm_management(op, trials, seed, free_trial),
        "conversions" => p2p(op, trials, seed, conversion_trial),
        _ => Err(format!("no oracle for {op}")),
    }
}

/// Handle conversions: a communicator reached through either surface is the
/// same object, and a converted request completes exactly once.
fn conversion_trial(fx: &Fixture, rng: &mut ChaCha8Rng) -> (Obs, Obs) {
    let h = pick_h(rng);
    let tag = rng.gen_range(0..100);
    let to = comm_from_legacy(fx.handle(h)).map(|c| (c.rank().unwrap() as i64, c.context_id().0 as i64));
    let legacy = match to {
        Ok((rank, ctx)) => Obs { codes: vec![0], values: vec![rank, ctx], ..Obs::default() },
        Err(e) => Obs { codes: vec![golden_code(e.class)], ..Obs::default() },
    };
    let oracle = match fx.comm(h) {
        Some(c) => Obs { codes: vec![0], values: vec![0, c.context_id().0 as i64], ..Obs::default() },
        None => Obs { codes: vec![golden_code(ErrorClass::Comm)], ..Obs::default() },
    };
    let r = fx.u.world().isend(&[7i64], 0, tag).unwrap();
    let mut lh = request_to_legacy(r).unwrap();
    let back = request_from_legacy(lh).map(|mut r| r.wait().unwrap().tag as i64);
    let mut st = LegacyStatus::default();
    let again = legacy_wait(&mut lh, &mut st);
    fx.u.world().recv(&mut [0i64], 0, tag).unwrap();
    let mut legacy = legacy;
    legacy.values.extend([back.unwrap_or(-1), again as i64]);
    let mut oracle = oracle;
    oracle.values.extend([tag as i64, golden_code(ErrorClass::Request) as i64]);
    (legacy, oracle)
}
