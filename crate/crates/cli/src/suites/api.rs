//! Properties of the idiomatic surface.

use std::cell::RefCell;
use std::rc::Rc;

use mmp_core::legacy::{self, LegacyHandle, LEGACY_COMM_WORLD};
use mmp_core::transport::local_endpoints;
use mmp_core::{
    run_in_process, ApiOp, Communicator, ErrorClass, Fault, MpError, ReductionOp, Request, RequestKind, RequestState,
    Mode, TapAction, Universe, ANY_SOURCE, ANY_TAG,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Calls the idiomatic operation behind `op` once on a single rank.
fn call(w: &Communicator, op: ApiOp) -> Result<(), MpError> {
    let mut buf = [0i32; 2];
    match op {
        ApiOp::CommRank => w.rank().map(drop),
        ApiOp::CommSize => w.size().map(drop),
        ApiOp::CommDup => w.dup().map(drop),
        ApiOp::CommSplit => w.split(0, 0).map(drop),
        ApiOp::Send => {
            w.send(&[1i32], 0, 1)?;
            w.recv(&mut buf, 0, 1).map(drop)
        }
        ApiOp::Recv => {
            w.send(&[1i32], 0, 2)?;
            let r = w.recv(&mut buf, 0, 2).map(drop);
            if r.is_err() {
                w.recv(&mut buf, 0, 2)?;
            }
            r
        }
        ApiOp::Isend => {
            let r = w.isend(&[1i32], 0, 3).and_then(|mut r| r.wait().map(drop));
            if r.is_ok() {
                w.recv(&mut buf, 0, 3)?;
            }
            r
        }
        ApiOp::Irecv => {
            w.send(&[1i32], 0, 4)?;
            let r = w.irecv(&mut buf, 0, 4).and_then(|mut r| r.wait().map(drop));
            if r.is_err() {
                w.recv(&mut [0i32; 2], 0, 4)?;
            }
            r
        }
        ApiOp::Wait => {
            w.send(&[1i32], 0, 5)?;
            let mut r = w.irecv(&mut buf, 0, 5)?;
            let first = r.wait().map(drop);
            // A failed wait leaves the request usable.
            r.wait()?;
            first
        }
        ApiOp::Barrier => w.barrier(),
        ApiOp::Bcast => w.bcast(&mut buf, 0),
        ApiOp::Reduce => w.reduce_root(&[1i32], &mut buf[..1], ReductionOp::Sum),
        ApiOp::Allreduce => w.allreduce(&[1i32], &mut buf[..1], ReductionOp::Sum),
        ApiOp::Gather => w.gather_root(&[1i32], &mut buf[..1]),
        ApiOp::Gatherv => w.gatherv_root(&[1i32], &mut buf[..1], &[1], &[0]),
    }
}

fn expect_class(what: &str, got: Result<(), MpError>, want: ErrorClass) -> Result<(), String> {
    match got {
        Err(e) if e.class == want => Ok(()),
        other => Err(format!("{what}: expected {want}, got {other:?}")),
    }
}

/// Every idiomatic operation fails with the injected class as a value,
/// carrying the failed request exactly when it is nonblocking, and argument
/// errors carry their own classes. Returns the number of checks.
pub fn structured_errors() -> Result<usize, String> {
    let out = run_in_process(1, |u| -> Result<usize, String> {
        let w = u.world();
        let mut checks = 0;
        for op in ApiOp::ALL {
            call(w, op).map_err(|e| format!("{op:?} unarmed: {e}"))?;
            for class in ErrorClass::ERRORS {
                u.faults().arm(op, Fault::Fail(class));
                let got = call(w, op);
                u.faults().clear();
                // Only nonblocking operations identify a failed request.
                let nonblocking = matches!(op, ApiOp::Isend | ApiOp::Irecv | ApiOp::Wait);
                match got {
                    Err(e) if e.class == class && e.failed_request.is_some() == nonblocking => {}
                    other => return Err(format!("{op:?} armed with {class}: got {other:?}")),
                }
                checks += 1;
            }
        }
        // Nonblocking failures identify the request.
        let e = w.isend(&[1i32], 7, 0).map(drop).unwrap_err();
        match e.failed_request {
            Some(r) if r.kind == RequestKind::Send && r.state == RequestState::Failed(ErrorClass::Rank) => {}
            other => return Err(format!("failed isend reported {other:?}")),
        }
        let args: [(&str, Result<(), MpError>, ErrorClass); 5] = [
            ("send to rank 1 of 1", w.send(&[0u8], 1, 0), ErrorClass::Rank),
            ("send with tag 32768", w.send(&[0u8], 0, 32768), ErrorClass::Tag),
            ("recv with tag 40000", w.recv(&mut [0u8], ANY_SOURCE, 40000).map(drop), ErrorClass::Tag),
            ("bcast from root 3", w.bcast(&mut [0u8], 3), ErrorClass::Rank),
            ("gatherv with short counts", w.gatherv_root(&[0u8], &mut [0u8], &[], &[]), ErrorClass::Count),
        ];
        for (what, got, want) in args {
            expect_class(what, got, want)?;
            checks += 1;
        }
        w.send(&[1.5f64], 0, 9).map_err(|e| e.to_string())?;
        expect_class("f64 into i32", w.recv(&mut [0i32], 0, 9).map(drop), ErrorClass::Type)?;
        w.send(&[1i32, 2, 3], 0, 9).map_err(|e| e.to_string())?;
        let st = w.recv(&mut [0i32; 2], 0, 9).map_err(|e| e.to_string())?;
        if st.error != ErrorClass::Truncate || st.count != 2 {
            return Err(format!("truncated receive reported {st:?}"));
        }
        Ok(checks + 2)
    });
    out.into_iter().next().expect("one rank")
}

/// A dup keeps rank, size and group and gets a fresh context, and no two
/// live communicators share a context.
pub fn dup_preserves(np: u32) -> Result<(), String> {
    let out = run_in_process(np, |u| -> Result<(), String> {
        let w = u.world();
        let live: Vec<Communicator> = (0..16).map(|i| if i % 2 == 0 { w.dup() } else { w.split(0, 0) }).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        let mut ids: Vec<u32> = live.iter().chain([w]).map(|c| c.context_id().0).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != live.len() + 1 {
            return Err(format!("rank {}: live communicators share contexts: {ids:?}", u.rank()));
        }
        drop(live);
        let s = w.split((u.rank() % 2) as i32, -(u.rank() as i32)).map_err(|e| e.to_string())?;
        for c in [w, &s] {
            let d = c.dup().map_err(|e| e.to_string())?;
            let (r, n, g) = (c.rank(), c.size(), c.group().map(|g| g.members().to_vec()));
            let (dr, dn, dg) = (d.rank(), d.size(), d.group().map(|g| g.members().to_vec()));
            if (r, n, g) != (dr, dn, dg) {
                return Err(format!("rank {}: dup changed rank, size or group", u.rank()));
            }
            if d.context_id() == c.context_id() || d.same_as(c) {
                return Err(format!("rank {}: dup shares context {:?}", u.rank(), c.context_id()));
            }
        }
        Ok(())
    });
    out.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Census {
    pub contexts: usize,
    pub requests: usize,
    pub handles: usize,
}

pub fn census(u: &Universe) -> Census {
    Census { contexts: u.live_contexts(), requests: u.pending_requests(), handles: legacy::legacy_handle_count() }
}

/// Creates and destroys `cycles` communicators through both surfaces, some
/// with pending receives, and checks the census returns to its baseline.
pub fn scope_hygiene(np: u32, cycles: usize, seed: u64) -> Result<usize, String> {
    let out = run_in_process(np, |u| -> Result<usize, String> {
        let e = |e: MpError| format!("rank {}: {e}", u.rank());
        let code = |what: &str, rc: i32| {
            if rc == legacy::SUCCESS {
                Ok(())
            } else {
                Err(format!("rank {}: {what} returned {rc}", u.rank()))
            }
        };
        let before = census(u);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = u.world();
        let mut held: Vec<Communicator> = Vec::new();
        let mut held_legacy: Vec<LegacyHandle> = Vec::new();
        let mut created = 0;
        while created < cycles {
            match rng.gen_range(0..5) {
                0 => held.push(w.dup().map_err(e)?),
                1 => {
                    let c = w.split(rng.gen_range(0..2), rng.gen_range(-2..2)).map_err(e)?;
                    let d = c.dup().map_err(e)?;
                    d.barrier().map_err(e)?;
                    held.push(d);
                    created += 1;
                }
                2 => {
                    let mut h = LegacyHandle::NULL;
                    code("comm_dup", legacy::legacy_comm_dup(LEGACY_COMM_WORLD, &mut h))?;
                    held_legacy.push(h);
                }
                3 => {
                    let mut h = LegacyHandle::NULL;
                    code("comm_split", legacy::legacy_comm_split(LEGACY_COMM_WORLD, 0, 0, &mut h))?;
                    held_legacy.push(h);
                }
                _ => {
                    let c = w.dup().map_err(e)?;
                    let mut buf = [0u8; 4];
                    drop(c.irecv(&mut buf, ANY_SOURCE, ANY_TAG).map_err(e)?);
                }
            }
            created += 1;
            if held.len() + held_legacy.len() > 8 {
                held.clear();
                for mut h in held_legacy.drain(..) {
                    code("comm_free", legacy::legacy_comm_free(&mut h))?;
                }
            }
        }
        held.clear();
        for mut h in held_legacy.drain(..) {
            code("comm_free", legacy::legacy_comm_free(&mut h))?;
        }
        w.barrier().map_err(e)?;
        let after = census(u);
        if after != before {
            return Err(format!("rank {}: census {after:?}, baseline {before:?}", u.rank()));
        }
        Ok(created)
    });
    let created: Result<Vec<usize>, String> = out.into_iter().collect();
    Ok(created?[0])
}

/// Random mixes of `test` and `wait` on send and receive requests: the first
/// terminal outcome observed is the only one ever observed.
pub fn single_completion(trials: usize, seed: u64) -> Result<usize, String> {
    let out = run_in_process(2, |u| -> Result<usize, String> {
        let w = u.world();
        let me = u.rank();
        let peer = 1 - me;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ me as u64);
        let mut observed = 0;
        for t in 0..trials {
            let tag = (t % 1000) as u32;
            let mut inbox = [0i64; 2];
            let out = [t as i64, me as i64];
            // Half the receives are too small, so some terminal states are truncations.
            let cap = if t % 2 == 0 { 2 } else { 1 };
            let mut reqs: Vec<Request> = vec![
                w.irecv(&mut inbox[..cap], peer, tag).map_err(|e| e.to_string())?,
                w.isend(&out, peer, tag).map_err(|e| e.to_string())?,
            ];
            let mut first: Vec<Option<Result<mmp_core::Status, ErrorClass>>> = vec![None, None];
            while first.iter().any(Option::is_none) || rng.gen_bool(0.3) {
                let i = rng.gen_range(0..2);
                let seen = if rng.gen_bool(0.5) {
                    match reqs[i].test() {
                        Ok(None) => continue,
                        Ok(Some(s)) => Ok(s),
                        Err(e) => Err(e.class),
                    }
                } else {
                    reqs[i].wait().map_err(|e| e.class)
                };
                match &first[i] {
                    None => first[i] = Some(seen),
                    Some(prev) if *prev != seen => {
                        return Err(format!("trial {t}: request {i} went from {prev:?} to {seen:?}"));
                    }
                    Some(_) => {}
                }
                if let Some(Ok(st)) = &first[i] {
                    if i == 0 && st.count > cap as u64 {
                        return Err(format!("trial {t}: received count {} exceeds capacity {cap}", st.count));
                    }
                }
                let state = reqs[i].state();
                let consistent = match (&first[i], &state) {
                    (Some(Ok(s)), RequestState::Complete(st)) => s == st,
                    (Some(Err(c)), RequestState::Failed(fc)) => c == fc,
                    _ => false,
                };
                if !consistent {
                    return Err(format!("trial {t}: request {i} reports state {state:?}"));
                }
                observed += 1;
            }
            drop(reqs);
            if inbox[..cap] != [t as i64, peer as i64][..cap] {
                return Err(format!("trial {t}: received {inbox:?}"));
            }
        }
        Ok(observed)
    });
    let counts: Result<Vec<usize>, String> = out.into_iter().collect();
    Ok(counts?.iter().sum())
}

/// Counts travel as 64-bit values end to end: an idiomatic send of more
/// than `i32::MAX` bytes is framed with its exact count, and statuses and
/// variable-count collectives are 64-bit typed.
pub fn count_generic() -> Result<(), String> {
    let out = run_in_process(1, |u| -> Result<(), String> {
        let big = (1usize << 31) + 7;
        let huge = vec![0u8; big];
        let seen = Rc::new(RefCell::new(None));
        let sink = seen.clone();
        u.set_send_tap(Some(Box::new(move |m| {
            *sink.borrow_mut() = Some((m.header.count, m.payload.len()));
            TapAction::Swallow
        })));
        let sent = u.world().send(&huge, 0, 0);
        u.set_send_tap(None);
        sent.map_err(|e| e.to_string())?;
        if *seen.borrow() != Some((big as u64, big)) {
            return Err(format!("a {big}-byte send was framed as {:?}", seen.borrow()));
        }
        let w = u.world();
        w.send(&[7i32; 3], 0, 1).map_err(|e| e.to_string())?;
        let count: u64 = w.recv(&mut [0i32; 3], 0, 1).map_err(|e| e.to_string())?.count;
        let counts: &[u64] = &[3];
        let mut recv = [0i32; 3];
        w.gatherv_root(&[1i32, 2, 3], &mut recv, counts, &[0]).map_err(|e| e.to_string())?;
        if count != 3 || recv != [1, 2, 3] {
            return Err(format!("count {count}, gathered {recv:?}"));
        }
        Ok(())
    });
    out.into_iter().next().expect("one rank")
}

/// Objects that outlive their universe fail with ERR_COMM on every
/// operation, and a new universe on the same thread starts with only its
/// world communicator. Must run on a thread without a live universe.
pub fn use_after_release() -> Result<(), String> {
    let ep = local_endpoints(1).pop().expect("one endpoint");
    let u = Universe::init(Mode::InProcess(ep)).map_err(|e| e.to_string())?;
    let dup = u.world().dup().map_err(|e| e.to_string())?;
    let mut buf = [0i32; 2];
    let mut pending = dup.irecv(&mut buf, 0, 9).map_err(|e| e.to_string())?;
    drop(u);
    let probes: [(&str, Result<(), MpError>); 10] = [
        ("rank", dup.rank().map(drop)),
        ("size", dup.size().map(drop)),
        ("dup", dup.dup().map(drop)),
        ("split", dup.split(0, 0).map(drop)),
        ("send", dup.send(&[1i32], 0, 0)),
        ("recv", dup.recv(&mut [0i32], 0, 0).map(drop)),
        ("isend", dup.isend(&[1i32], 0, 0).map(drop)),
        ("barrier", dup.barrier()),
        ("bcast", dup.bcast(&mut [1i32], 0)),
        ("allreduce", dup.allreduce(&[1i32], &mut [0], ReductionOp::Sum)),
    ];
    for (what, got) in probes {
        expect_class(what, got, ErrorClass::Comm)?;
    }
    match pending.wait() {
        Err(e) if matches!(e.class, ErrorClass::Comm | ErrorClass::Request) => {}
        other => return Err(format!("pending receive after finalize: {other:?}")),
    }
    drop(pending);
    let ep = local_endpoints(1).pop().expect("one endpoint");
    let u = Universe::init(Mode::InProcess(ep)).map_err(|e| e.to_string())?;
    if u.live_contexts() != 1 || u.world().rank() != Ok(0) {
        return Err(format!("fresh universe has {} contexts", u.live_contexts()));
    }
    Ok(())
}
