//! Every shim procedure under every injected error class and under panics.

use std::panic::{catch_unwind, AssertUnwindSafe};

use mmp_core::legacy::*;
use mmp_core::{run_in_process, ApiOp, ErrorClass, Fault};

type Call = fn() -> i32;

const TAG_NEVER_SENT: i32 = 999;

fn shim_ops() -> Vec<(&'static str, ApiOp, Call)> {
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

#[test]
fn every_class_on_every_procedure_maps_to_its_code() {
    let ops = shim_ops();
    let escapes = run_in_process(1, |u| {
        let mut escapes = 0;
        for (name, op, call) in &ops {
            assert_eq!(call(), SUCCESS, "{name} unarmed");
            for class in ErrorClass::ERRORS {
                u.faults().arm(*op, Fault::Fail(class));
                match catch_unwind(AssertUnwindSafe(call)) {
                    Ok(rc) => assert_eq!(rc, error_code(class), "{name} armed with {class}"),
                    Err(_) => escapes += 1,
                }
                u.faults().clear();
            }
        }
        escapes
    });
    assert_eq!(escapes, vec![0]);
}

#[test]
fn panics_are_contained_as_other() {
    std::panic::set_hook(Box::new(|_| {}));
    let ops = shim_ops();
    let codes = run_in_process(1, |u| {
        ops.iter()
            .map(|(name, op, call)| {
                u.faults().arm(*op, Fault::Panic);
                let rc = catch_unwind(AssertUnwindSafe(call)).unwrap_or(-1);
                u.faults().clear();
                // The rank stays usable afterwards.
                assert_eq!(legacy_barrier(LEGACY_COMM_WORLD), SUCCESS, "{name}");
                (*name, rc)
            })
            .collect::<Vec<_>>()
    });
    let _ = std::panic::take_hook();
    for (name, rc) in &codes[0] {
        assert_eq!(*rc, ERR_OTHER, "{name}");
    }
}

#[test]
fn every_code_is_a_published_code() {
    // Random garbage arguments never produce anything outside the table.
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let args: Vec<(i32, i32, i32, i32, u32)> = (0..2000)
        .map(|_| {
            (
                rng.gen_range(-3..6),
                rng.gen_range(-2..6),
                rng.gen_range(-2..3),
                rng.gen_range(-2..40000),
                rng.gen_range(0..5),
            )
        })
        .collect();
    run_in_process(1, |_| {
        for &(count, dtype, rank, tag, handle) in &args {
            let rc = legacy_send(&[0i32; 3], count, dtype, rank, tag, LegacyHandle(handle));
            assert!(error_class(rc).is_some(), "{rc}");
            let rc = legacy_bcast(&mut [0i32; 3], count, dtype, rank, LegacyHandle(handle));
            assert!(error_class(rc).is_some(), "{rc}");
        }
    });
}
