//! Communicator churn and use-after-free probes.

use mmp_core::legacy::*;
use mmp_core::transport::local_endpoints;
use mmp_core::{run_in_process, Communicator, ErrorClass, Mode, ReductionOp, Universe};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CYCLES: usize = 10_000;

#[derive(Debug, PartialEq)]
struct Census {
    contexts: usize,
    requests: usize,
    handles: usize,
}

fn census(u: &Universe) -> Census {
    Census { contexts: u.live_contexts(), requests: u.pending_requests(), handles: legacy_handle_count() }
}

#[test]
fn ten_thousand_communicators_leave_no_trace() {
    const NP: u32 = 4;
    let created = run_in_process(NP, |u| {
        let before = census(u);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let world = u.world();
        let mut created = 0;
        // Communicators kept alive across a few cycles before being dropped.
        let mut held: Vec<Communicator> = Vec::new();
        let mut held_legacy: Vec<LegacyHandle> = Vec::new();
        while created < CYCLES {
            match rng.gen_range(0..6) {
                0 => {
                    let c = world.dup().unwrap();
                    c.barrier().unwrap();
                    held.push(c);
                }
                1 => {
                    let color = rng.gen_range(0..2);
                    let c = world.split((u.rank() as i32 + color) % 2, 0).unwrap();
                    assert_eq!(c.size().unwrap(), NP / 2);
                    held.push(c);
                }
                2 => {
                    // Nested: a dup of a split, used for a message ring.
                    let s = world.split((u.rank() % 2) as i32, -(u.rank() as i32)).unwrap();
                    let d = s.dup().unwrap();
                    let (me, n) = (d.rank().unwrap(), d.size().unwrap());
                    d.send(&[me as i32], (me + 1) % n, 1).unwrap();
                    let mut got = [0i32];
                    d.recv(&mut got, (me + n - 1) % n, 1).unwrap();
                    assert_eq!(got[0] as u32, (me + n - 1) % n);
                    created += 1;
                }
                3 => {
                    let mut h = LegacyHandle::NULL;
                    assert_eq!(legacy_comm_dup(LEGACY_COMM_WORLD, &mut h), SUCCESS);
                    held_legacy.push(h);
                }
                4 => {
                    let mut h = LegacyHandle::NULL;
                    assert_eq!(legacy_comm_split(LEGACY_COMM_WORLD, 0, rng.gen_range(-2..2), &mut h), SUCCESS);
                    let mut sum = [0i64];
                    assert_eq!(legacy_allreduce(&[1i64], &mut sum, 1, INT64, SUM, h), SUCCESS);
                    assert_eq!(sum[0], NP as i64);
                    held_legacy.push(h);
                }
                _ => {
                    // A pending receive dropped with its communicator.
                    let c = world.dup().unwrap();
                    let mut buf = [0u8; 4];
                    let r = c.irecv(&mut buf, 0, 7).unwrap();
                    drop(r);
                    drop(c);
                }
            }
            created += 1;
            if held.len() + held_legacy.len() > 8 {
                held.clear();
                for mut h in held_legacy.drain(..) {
                    assert_eq!(legacy_comm_free(&mut h), SUCCESS);
                    assert!(h.is_null());
                }
            }
        }
        held.clear();
        for mut h in held_legacy.drain(..) {
            assert_eq!(legacy_comm_free(&mut h), SUCCESS);
        }
        world.barrier().unwrap();
        assert_eq!(census(u), before);
        created
    });
    assert!(created.iter().all(|&n| n >= CYCLES));
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

#[test]
fn freed_legacy_handles_are_rejected_everywhere() {
    run_in_process(1, |u| {
        let before = census(u);
        let mut freed = LegacyHandle::NULL;
        assert_eq!(legacy_comm_dup(LEGACY_COMM_WORLD, &mut freed), SUCCESS);
        let stale = freed;
        assert_eq!(legacy_comm_free(&mut freed), SUCCESS);

        let mut pending = LegacyHandle::NULL;
        let sink: &'static mut [u8] = Box::leak(Box::new([0u8; 1]));
        assert_eq!(unsafe { legacy_irecv(sink, 1, BYTE, 0, 77, LEGACY_COMM_WORLD, &mut pending) }, SUCCESS);

        for h in [stale, LegacyHandle::NULL, LegacyHandle(u32::MAX), pending] {
            for (name, rc) in comm_probes(h) {
                assert_eq!(rc, ERR_COMM, "{name} on {h:?}");
            }
        }

        let mut done = LegacyHandle::NULL;
        assert_eq!(legacy_isend(&[1u8], 1, BYTE, 0, 3, LEGACY_COMM_WORLD, &mut done), SUCCESS);
        let waited = done;
        assert_eq!(legacy_wait(&mut done, &mut LegacyStatus::default()), SUCCESS);
        for mut h in [waited, stale, LEGACY_COMM_WORLD, LegacyHandle::NULL, LegacyHandle(u32::MAX)] {
            assert_eq!(legacy_wait(&mut h, &mut LegacyStatus::default()), ERR_REQUEST, "{h:?}");
            assert_eq!(request_from_legacy(waited).unwrap_err().class, ErrorClass::Request);
        }
        assert_eq!(comm_from_legacy(stale).unwrap_err().class, ErrorClass::Comm);

        assert_eq!(legacy_send(&[1u8], 1, BYTE, 0, 77, LEGACY_COMM_WORLD), SUCCESS);
        assert_eq!(legacy_wait(&mut pending, &mut LegacyStatus::default()), SUCCESS);
        u.world().recv(&mut [0u8], 0, 3).unwrap();
        assert_eq!(census(u), before);
    });
}

#[test]
fn idiomatic_objects_outlive_their_universe_safely() {
    let ep = local_endpoints(1).pop().unwrap();
    let u = Universe::init(Mode::InProcess(ep)).unwrap();
    let world = u.world().dup().unwrap();
    let dup = world.dup().unwrap();
    let mut buf = [0i32; 2];
    let mut pending = dup.irecv(&mut buf, 0, 9).unwrap();
    let mut done = dup.isend(&[5i32], 0, 8).unwrap();
    let legacy = comm_to_legacy(&dup).unwrap();
    drop(u);

    let comm = |r: mmp_core::Result<()>| assert_eq!(r.unwrap_err().class, ErrorClass::Comm);
    for c in [&world, &dup] {
        comm(c.rank().map(drop));
        comm(c.size().map(drop));
        comm(c.group().map(drop));
        comm(c.dup().map(drop));
        comm(c.split(0, 0).map(drop));
        comm(c.send(&[1i32], 0, 0));
        comm(c.recv(&mut [0i32], 0, 0).map(drop));
        comm(c.isend(&[1i32], 0, 0).map(drop));
        comm(c.irecv(&mut [0i32], 0, 0).map(drop));
        comm(c.barrier());
        comm(c.bcast(&mut [1i32], 0));
        comm(c.reduce(&[1i32], ReductionOp::Sum, 0));
        comm(c.reduce_root(&[1i32], &mut [0], ReductionOp::Sum));
        comm(c.allreduce(&[1i32], &mut [0], ReductionOp::Sum));
        comm(c.gather(&[1i32], 0));
        comm(c.gatherv(&[1i32], 0));
    }
    // The pending receive was failed when its context closed; the completed
    // send keeps its outcome.
    let class = pending.wait().unwrap_err().class;
    assert!(matches!(class, ErrorClass::Comm | ErrorClass::Request), "{class:?}");
    assert!(done.wait().is_ok());
    drop(pending);

    let mut r = 0;
    assert_eq!(legacy_comm_rank(legacy, &mut r), ERR_COMM);
    assert_eq!(legacy_barrier(LEGACY_COMM_WORLD), ERR_COMM);

    // A fresh universe on the same thread starts clean.
    let ep = local_endpoints(1).pop().unwrap();
    let u = Universe::init(Mode::InProcess(ep)).unwrap();
    assert_eq!(legacy_comm_rank(legacy, &mut r), ERR_COMM);
    assert_eq!(legacy_comm_rank(LEGACY_COMM_WORLD, &mut r), SUCCESS);
    assert_eq!(u.live_contexts(), 1);
}

#[test]
fn converted_communicators_outlive_their_legacy_handle() {
    run_in_process(2, |u| {
        let before = census(u);
        let mut h = LegacyHandle::NULL;
        assert_eq!(legacy_comm_dup(LEGACY_COMM_WORLD, &mut h), SUCCESS);
        let c = comm_from_legacy(h).unwrap();
        assert_eq!(legacy_comm_free(&mut h), SUCCESS);
        // The idiomatic owner still holds the context.
        let mut sum = [0i32];
        c.allreduce(&[1 + u.rank() as i32], &mut sum, ReductionOp::Sum).unwrap();
        assert_eq!(sum[0], 3);
        drop(c);
        u.world().barrier().unwrap();
        assert_eq!(census(u), before);
    });
}
