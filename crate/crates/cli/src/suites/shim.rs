//! The shim's error containment, handle checks and cross-surface exchange.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};

use mmp_core::legacy::*;
use mmp_core::{run_in_process, ApiOp, ErrorClass, Fault, ANY_SOURCE as IDIOMATIC_ANY_SOURCE};

use super::api::census;

type Call = fn() -> i32;

const TAG_NEVER_SENT: i32 = 999;

pub fn shim_ops() -> Vec<(&'static str, ApiOp, Call)> {
    let ops: Vec<(&'static str, ApiOp, Call)> = vec![
        ("comm_rank", ApiOp::CommRank, || legacy_comm_rank(LEGACY_COMM_WORLD, &mut 0)),
        ("comm_size", ApiOp::CommSize, || legacy_comm_size(LEGACY_COMM_WORLD, &mut 0)),
        ("comm_dup", ApiOp::CommDup, || {
            let mut h = LegacyHandle::NULL;
            let rc = legacy_comm_dup(LEGACY_COMM_WORLD, &mut h);
            if rc == SUCCESS {
                legacy_comm_free(&mut h);
            }
            rc
        }),
        ("comm_split", ApiOp::CommSplit, || {
            let mut h = LegacyHandle::NULL;
            let rc = legacy_comm_split(LEGACY_COMM_WORLD, 0, 0, &mut h);
            if rc == SUCCESS {
                legacy_comm_free(&mut h);
            }
            rc
        }),
        ("send", ApiOp::Send, || legacy_send(&[1i32], 1, INT32, 0, 1, LEGACY_COMM_WORLD)),
        ("send_c", ApiOp::Send, || legacy_send_c(&[1i32], 1, INT32, 0, 1, LEGACY_COMM_WORLD)),
        ("recv", ApiOp::Recv, || {
            assert_eq!(legacy_send(&[1i32], 1, INT32, 0, 5, LEGACY_COMM_WORLD), SUCCESS);
            legacy_recv(&mut [0i32], 1, INT32, 0, 5, LEGACY_COMM_WORLD, &mut LegacyStatus::default())
        }),
        ("recv_c", ApiOp::Recv, || {
            assert_eq!(legacy_send(&[1i32], 1, INT32, 0, 5, LEGACY_COMM_WORLD), SUCCESS);
            legacy_recv_c(&mut [0i32], 1, INT32, 0, 5, LEGACY_COMM_WORLD, &mut LegacyStatus::default())
        }),
        ("isend", ApiOp::Isend, || {
            let mut r = LegacyHandle::NULL;
            legacy_isend(&[1i32], 1, INT32, 0, 1, LEGACY_COMM_WORLD, &mut r)
        }),
        ("isend_c", ApiOp::Isend, || {
            let mut r = LegacyHandle::NULL;
            legacy_isend_c(&[1i32], 1, INT32, 0, 1, LEGACY_COMM_WORLD, &mut r)
        }),
        ("irecv", ApiOp::Irecv, || {
            let mut r = LegacyHandle::NULL;
            let buf: &'static mut [i32] = Box::leak(Box::new([0i32]));
            unsafe { legacy_irecv(buf, 1, INT32, 0, TAG_NEVER_SENT, LEGACY_COMM_WORLD, &mut r) }
        }),
        ("irecv_c", ApiOp::Irecv, || {
            let mut r = LegacyHandle::NULL;
            let buf: &'static mut [i32] = Box::leak(Box::new([0i32]));
            unsafe { legacy_irecv_c(buf, 1, INT32, 0, TAG_NEVER_SENT, LEGACY_COMM_WORLD, &mut r) }
        }),
        ("wait", ApiOp::Wait, || {
            let mut r = LegacyHandle::NULL;
            let buf: &'static mut [i32] = Box::leak(Box::new([0i32]));
            assert_eq!(legacy_send(&[1i32], 1, INT32, 0, 6, LEGACY_COMM_WORLD), SUCCESS);
            let rc = unsafe { legacy_irecv(buf, 1, INT32, 0, 6, LEGACY_COMM_WORLD, &mut r) };
            assert_eq!(rc, SUCCESS);
            let rc = legacy_wait(&mut r, &mut LegacyStatus::default());
            assert!(r.is_null(), "wait frees the handle even on failure");
            rc
        }),
        ("barrier", ApiOp::Barrier, || legacy_barrier(LEGACY_COMM_WORLD)),
        ("bcast", ApiOp::Bcast, || legacy_bcast(&mut [1i32], 1, INT32, 0, LEGACY_COMM_WORLD)),
        ("bcast_c", ApiOp::Bcast, || legacy_bcast_c(&mut [1i32], 1, INT32, 0, LEGACY_COMM_WORLD)),
        ("reduce", ApiOp::Reduce, || legacy_reduce(&[1i32], &mut [0], 1, INT32, SUM, 0, LEGACY_COMM_WORLD)),
        ("reduce_c", ApiOp::Reduce, || legacy_reduce_c(&[1i32], &mut [0], 1, INT32, SUM, 0, LEGACY_COMM_WORLD)),
        ("allreduce", ApiOp::Allreduce, || legacy_allreduce(&[1i32], &mut [0], 1, INT32, SUM, LEGACY_COMM_WORLD)),
        ("gather", ApiOp::Gather, || legacy_gather(&[1i32], 1, INT32, &mut [0], 1, INT32, 0, LEGACY_COMM_WORLD)),
        ("gather_c", ApiOp::Gather, || {
            legacy_gather_c(&[1i32], 1, INT32, &mut [0], 1, INT32, 0, LEGACY_COMM_WORLD)
        }),
        ("gatherv", ApiOp::Gatherv, || {
            legacy_gatherv(&[1i32], 1, INT32, &mut [0], &[1], &[0], INT32, 0, LEGACY_COMM_WORLD)
        }),
        ("gatherv_c", ApiOp::Gatherv, || {
            legacy_gatherv_c(&[1i32], 1, INT32, &mut [0], &[1], &[0], INT32, 0, LEGACY_COMM_WORLD)
        }),
    ];
    ops
}


#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Containment {
    pub procedures: usize,
    pub calls: usize,
    pub escapes: usize,
    pub codes: BTreeSet<i32>,
}

/// Arms every error class, then a panic, on every shim procedure. Each call
/// must return the code the golden table assigns to the injected class (a
/// panic maps to ERR_OTHER), and the class/code map must be a bijection
/// agreeing with the table.
pub fn containment(golden: &[(String, i32)]) -> Result<Containment, String> {
    let mut classes = vec![ErrorClass::Success];
    classes.extend(ErrorClass::ERRORS);
    let golden_of = |c: ErrorClass| golden.iter().find(|(n, _)| n == c.name()).map(|(_, v)| *v);
    let mut seen = BTreeSet::new();
    for c in &classes {
        let want = golden_of(*c).ok_or_else(|| format!("{c} missing from the golden table"))?;
        if error_code(*c) != want || error_class(want) != Some(*c) || !seen.insert(want) {
            return Err(format!("{c}: code {} does not match golden {want} one to one", error_code(*c)));
        }
    }
    if golden.len() != classes.len() {
        return Err(format!("golden table has {} rows for {} classes", golden.len(), classes.len()));
    }

    let ops = shim_ops();
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let out = run_in_process(1, |u| -> Result<Containment, String> {
        let mut c = Containment { procedures: ops.len(), calls: 0, escapes: 0, codes: BTreeSet::new() };
        for (name, op, call) in &ops {
            let faults = ErrorClass::ERRORS.iter().map(|&k| Fault::Fail(k)).chain([Fault::Panic]);
            for fault in faults {
                u.faults().arm(*op, fault);
                let got = catch_unwind(AssertUnwindSafe(call));
                u.faults().clear();
                c.calls += 1;
                let want = match fault {
                    Fault::Fail(k) => golden_of(k).expect("checked above"),
                    Fault::Panic => golden_of(ErrorClass::Other).expect("checked above"),
                };
                match got {
                    Ok(rc) if rc == want => {
                        c.codes.insert(rc);
                    }
                    Ok(rc) => return Err(format!("{name} under {fault:?} returned {rc}, expected {want}")),
                    Err(_) => c.escapes += 1,
                }
                if legacy_barrier(LEGACY_COMM_WORLD) != SUCCESS {
                    return Err(format!("{name} under {fault:?} left the rank unusable"));
                }
            }
        }
        Ok(c)
    });
    std::panic::set_hook(hook);
    out.into_iter().next().expect("one rank")
}

/// Every shim procedure that takes a communicator, called on `h`.
fn comm_probes(h: LegacyHandle) -> Vec<(&'static str, i32)> {
    let mut st = LegacyStatus::default();
    let mut out = LegacyHandle::NULL;
    let mut req = LegacyHandle::NULL;
    let mut x = 0;
    let mut buf = [0i32; 2];
    let mut rbuf = [0i32; 2];
    vec![
        ("comm_rank", legacy_comm_rank(h, &mut x)),
        ("comm_size", legacy_comm_size(h, &mut x)),
        ("comm_dup", legacy_comm_dup(h, &mut out)),
        ("comm_split", legacy_comm_split(h, 0, 0, &mut out)),
        ("comm_free", legacy_comm_free(&mut h.clone())),
        ("send", legacy_send(&buf, 1, INT32, 0, 0, h)),
        ("send_c", legacy_send_c(&buf, 1, INT32, 0, 0, h)),
        ("recv", legacy_recv(&mut buf, 1, INT32, 0, 0, h, &mut st)),
        ("recv_c", legacy_recv_c(&mut buf, 1, INT32, 0, 0, h, &mut st)),
        ("isend", legacy_isend(&buf, 1, INT32, 0, 0, h, &mut req)),
        ("isend_c", legacy_isend_c(&buf, 1, INT32, 0, 0, h, &mut req)),
        ("irecv", unsafe { legacy_irecv(&mut buf, 1, INT32, 0, 0, h, &mut req) }),
        ("irecv_c", unsafe { legacy_irecv_c(&mut buf, 1, INT32, 0, 0, h, &mut req) }),
        ("barrier", legacy_barrier(h)),
        ("bcast", legacy_bcast(&mut buf, 1, INT32, 0, h)),
        ("bcast_c", legacy_bcast_c(&mut buf, 1, INT32, 0, h)),
        ("reduce", legacy_reduce(&buf, &mut rbuf, 1, INT32, SUM, 0, h)),
        ("reduce_c", legacy_reduce_c(&buf, &mut rbuf, 1, INT32, SUM, 0, h)),
        ("allreduce", legacy_allreduce(&buf, &mut rbuf, 1, INT32, SUM, h)),
        ("gather", legacy_gather(&buf, 1, INT32, &mut rbuf, 1, INT32, 0, h)),
        ("gather_c", legacy_gather_c(&buf, 1, INT32, &mut rbuf, 1, INT32, 0, h)),
        ("gatherv", legacy_gatherv(&buf, 1, INT32, &mut rbuf, &[1], &[0], INT32, 0, h)),
        ("gatherv_c", legacy_gatherv_c(&buf, 1, INT32, &mut rbuf, &[1], &[0], INT32, 0, h)),
    ]
}

/// Stale, null, out-of-range and wrong-kind handles fail with ERR_COMM or
/// ERR_REQUEST on every procedure, and leave no residue.
pub fn handle_safety() -> Result<usize, String> {
    let out = run_in_process(1, |u| -> Result<usize, String> {
        let before = census(u);
        let mut checks = 0;
        let mut freed = LegacyHandle::NULL;
        if legacy_comm_dup(LEGACY_COMM_WORLD, &mut freed) != SUCCESS {
            return Err("comm_dup failed".into());
        }
        let stale = freed;
        if legacy_comm_free(&mut freed) != SUCCESS || !freed.is_null() {
            return Err("comm_free failed".into());
        }
        let mut pending = LegacyHandle::NULL;
        let sink: &'static mut [u8] = Box::leak(Box::new([0u8; 1]));
        if unsafe { legacy_irecv(sink, 1, BYTE, 0, 77, LEGACY_COMM_WORLD, &mut pending) } != SUCCESS {
            return Err("irecv failed".into());
        }
        for h in [stale, LegacyHandle::NULL, LegacyHandle(u32::MAX), pending] {
            for (name, rc) in comm_probes(h) {
                if rc != ERR_COMM {
                    return Err(format!("{name} on {h:?} returned {rc}"));
                }
                checks += 1;
            }
        }
        let mut done = LegacyHandle::NULL;
        if legacy_isend(&[1u8], 1, BYTE, 0, 3, LEGACY_COMM_WORLD, &mut done) != SUCCESS {
            return Err("isend failed".into());
        }
        let waited = done;
        if legacy_wait(&mut done, &mut LegacyStatus::default()) != SUCCESS {
            return Err("wait failed".into());
        }
        for mut h in [waited, stale, LEGACY_COMM_WORLD, LegacyHandle::NULL, LegacyHandle(u32::MAX)] {
            let rc = legacy_wait(&mut h, &mut LegacyStatus::default());
            if rc != ERR_REQUEST {
                return Err(format!("wait on {h:?} returned {rc}"));
            }
            checks += 1;
        }
        // Slots are never reused.
        let mut last = stale.0;
        for _ in 0..5 {
            let mut h = LegacyHandle::NULL;
            if legacy_comm_dup(LEGACY_COMM_WORLD, &mut h) != SUCCESS || h.0 <= last {
                return Err(format!("handle {} minted after {last}", h.0));
            }
            last = h.0;
            legacy_comm_free(&mut h);
            checks += 1;
        }
        let mut world = LEGACY_COMM_WORLD;
        if legacy_comm_free(&mut world) != ERR_COMM {
            return Err("the world handle was freeable".into());
        }
        if legacy_send(&[1u8], 1, BYTE, 0, 77, LEGACY_COMM_WORLD) != SUCCESS
            || legacy_wait(&mut pending, &mut LegacyStatus::default()) != SUCCESS
        {
            return Err("could not drain the pending receive".into());
        }
        u.world().recv(&mut [0u8], 0, 3).map_err(|e| e.to_string())?;
        let after = census(u);
        if after != before {
            return Err(format!("census {after:?}, baseline {before:?}"));
        }
        Ok(checks + 1)
    });
    out.into_iter().next().expect("one rank")
}

/// Rank 0 sends and rank 1 receives in all four surface pairings, on the
/// world and on a dup converted between surfaces. Returns the number of
/// verified messages.
pub fn interop(np: u32) -> Result<usize, String> {
    if np < 2 {
        return Err("interop needs at least two ranks".into());
    }
    let out = run_in_process(np, |u| -> Result<usize, String> {
        let w = u.world();
        let d = w.dup().map_err(|e| e.to_string())?;
        let dh = comm_to_legacy(&d).map_err(|e| e.to_string())?;
        let mut verified = 0;
        for (which, (comm, h)) in [(w, LEGACY_COMM_WORLD), (&d, dh)].into_iter().enumerate() {
            if comm_to_legacy(comm).map_err(|e| e.to_string())? != h {
                return Err("conversion minted a second handle".into());
            }
            for (tag, legacy_sender, legacy_receiver) in [(1, false, false), (2, false, true), (3, true, false), (4, true, true)]
            {
                let payload = [tag * 100, u.rank() as i32, which as i32];
                let what = format!("tag {tag} on handle {}", h.0);
                match u.rank() {
                    0 => {
                        if legacy_sender {
                            let rc = legacy_send(&payload, 3, INT32, 1, tag, h);
                            if rc != SUCCESS {
                                return Err(format!("{what}: legacy_send returned {rc}"));
                            }
                        } else {
                            comm.send(&payload, 1, tag as u32).map_err(|e| format!("{what}: {e}"))?;
                        }
                    }
                    1 => {
                        let mut b = [0i32; 3];
                        let (source, got_tag, count) = if legacy_receiver {
                            let mut st = LegacyStatus::default();
                            let rc = legacy_recv(&mut b, 3, INT32, ANY_SOURCE, tag, h, &mut st);
                            if rc != SUCCESS {
                                return Err(format!("{what}: legacy_recv returned {rc}"));
                            }
                            (st.source as u32, st.tag as u32, st.count as u64)
                        } else {
                            let st = comm.recv(&mut b, IDIOMATIC_ANY_SOURCE, tag as u32).map_err(|e| format!("{what}: {e}"))?;
                            (st.source, st.tag, st.count)
                        };
                        if b != [tag * 100, 0, which as i32] || (source, got_tag, count) != (0, tag as u32, 3) {
                            return Err(format!("{what}: received {b:?} from {source} tag {got_tag} count {count}"));
                        }
                        verified += 1;
                    }
                    _ => {}
                }
            }
        }
        let mut s = [0i32];
        comm_from_legacy(dh)
            .and_then(|c| c.allreduce(&[1], &mut s, mmp_core::ReductionOp::Sum))
            .map_err(|e| e.to_string())?;
        if s[0] != u.size() as i32 {
            return Err(format!("allreduce over the converted dup gave {}", s[0]));
        }
        Ok(verified)
    });
    let v: Result<Vec<usize>, String> = out.into_iter().collect();
    Ok(v?.iter().sum())
}
