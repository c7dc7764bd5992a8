use mmp_core::legacy::*;
use mmp_core::{run_in_process, ErrorClass, ReductionOp, ANY_SOURCE as IDIOMATIC_ANY_SOURCE};

const GOLDEN: &str = include_str!("golden/error_codes.txt");

fn golden() -> Vec<(String, i32)> {
    GOLDEN
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let mut parts = l.split_whitespace();
            (parts.next().unwrap().to_string(), parts.next().unwrap().parse().unwrap())
        })
        .collect()
}

#[test]
fn published_codes_match_golden_table() {
    let published = [
        ("SUCCESS", SUCCESS),
        ("ERR_BUFFER", ERR_BUFFER),
        ("ERR_COUNT", ERR_COUNT),
        ("ERR_TYPE", ERR_TYPE),
        ("ERR_TAG", ERR_TAG),
        ("ERR_COMM", ERR_COMM),
        ("ERR_RANK", ERR_RANK),
        ("ERR_REQUEST", ERR_REQUEST),
        ("ERR_TRUNCATE", ERR_TRUNCATE),
        ("ERR_OTHER", ERR_OTHER),
    ];
    let g = golden();
    assert_eq!(g.len(), published.len());
    for ((gn, gc), (pn, pc)) in g.iter().zip(published) {
        assert_eq!((gn.as_str(), *gc), (pn, pc));
    }
    // Class names agree with the table, and the mapping is a bijection.
    let mut seen = std::collections::HashSet::new();
    for class in std::iter::once(ErrorClass::Success).chain(ErrorClass::ERRORS) {
        let code = error_code(class);
        assert!(seen.insert(code));
        assert_eq!(error_class(code), Some(class));
        let row = g.iter().find(|(_, c)| *c == code).unwrap();
        assert_eq!(row.0, class.name());
    }
}

#[test]
fn error_strings() {
    assert_eq!(legacy_error_string(SUCCESS), "no error");
    assert!(legacy_error_string(ERR_TRUNCATE).contains("truncat"));
    assert!(legacy_error_string(999).contains("unknown"));
    let texts: std::collections::HashSet<_> = (0..=9).map(legacy_error_string).collect();
    assert_eq!(texts.len(), 10);
}

#[test]
fn comm_queries_and_handle_kinds() {
    run_in_process(1, |_| {
        let mut rank = -7;
        assert_eq!(legacy_comm_rank(LEGACY_COMM_WORLD, &mut rank), SUCCESS);
        assert_eq!(rank, 0);
        let mut size = 0;
        assert_eq!(legacy_comm_size(LEGACY_COMM_WORLD, &mut size), SUCCESS);
        assert_eq!(size, 1);

        let mut dup = LegacyHandle::NULL;
        assert_eq!(legacy_comm_dup(LEGACY_COMM_WORLD, &mut dup), SUCCESS);
        assert!(!dup.is_null());
        let freed = dup;
        assert_eq!(legacy_comm_free(&mut dup), SUCCESS);
        assert!(dup.is_null());

        let mut rank = -7;
        assert_eq!(legacy_comm_rank(freed, &mut rank), ERR_COMM);
        assert_eq!(rank, -7, "out-param untouched on failure");
        let mut again = freed;
        assert_eq!(legacy_comm_free(&mut again), ERR_COMM);
        assert_eq!(legacy_comm_rank(LegacyHandle::NULL, &mut rank), ERR_COMM);
        assert_eq!(legacy_comm_rank(LegacyHandle(12345), &mut rank), ERR_COMM);
        let mut world = LEGACY_COMM_WORLD;
        assert_eq!(legacy_comm_free(&mut world), ERR_COMM);

        let mut req = LegacyHandle::NULL;
        assert_eq!(legacy_isend(&[1i32], 1, INT32, 0, 0, LEGACY_COMM_WORLD, &mut req), SUCCESS);
        assert_eq!(legacy_comm_rank(req, &mut rank), ERR_COMM, "request handle used as a communicator");
        let mut st = LegacyStatus::default();
        assert_eq!(legacy_wait(&mut req, &mut st), SUCCESS);
        let mut b = [0i32];
        assert_eq!(legacy_recv(&mut b, 1, INT32, 0, 0, LEGACY_COMM_WORLD, &mut st), SUCCESS);
    });
}

#[test]
fn handles_are_never_reused() {
    run_in_process(1, |_| {
        let mut seen = std::collections::HashSet::new();
        for _ in 0..50 {
            let mut h = LegacyHandle::NULL;
            assert_eq!(legacy_comm_dup(LEGACY_COMM_WORLD, &mut h), SUCCESS);
            assert!(seen.insert(h));
            assert_eq!(legacy_comm_free(&mut h), SUCCESS);
        }
    });
}

#[test]
fn wait_consumes_the_handle() {
    run_in_process(2, |u| {
        let me = u.rank() as i32;
        let mut st = LegacyStatus::default();
        if me == 0 {
            let mut req = LegacyHandle::NULL;
            assert_eq!(legacy_isend(&[5i64, 6, 7], 3, INT64, 1, 11, LEGACY_COMM_WORLD, &mut req), SUCCESS);
            let h = req;
            assert_eq!(legacy_wait(&mut req, &mut st), SUCCESS);
            assert!(req.is_null());
            let mut stale = h;
            assert_eq!(legacy_wait(&mut stale, &mut st), ERR_REQUEST);
            assert_eq!(legacy_wait(&mut req, &mut st), ERR_REQUEST, "NULL handle");
        } else {
            let mut buf = [0i64; 4];
            let mut req = LegacyHandle::NULL;
            let rc = unsafe { legacy_irecv(&mut buf, 4, INT64, ANY_SOURCE, ANY_TAG, LEGACY_COMM_WORLD, &mut req) };
            assert_eq!(rc, SUCCESS);
            let mut as_comm = req;
            assert_eq!(legacy_comm_free(&mut as_comm), ERR_COMM);
            assert_eq!(legacy_wait(&mut req, &mut st), SUCCESS);
            assert_eq!(st, LegacyStatus { source: 0, tag: 11, error: SUCCESS, count: 3 });
            assert_eq!(buf, [5, 6, 7, 0]);
        }
    });
}

#[test]
fn truncated_receive_fills_status() {
    run_in_process(1, |_| {
        assert_eq!(legacy_send(&[1i32, 2, 3], 3, INT32, 0, 2, LEGACY_COMM_WORLD), SUCCESS);
        let mut b = [0i32; 2];
        let mut st = LegacyStatus::default();
        assert_eq!(legacy_recv(&mut b, 2, INT32, 0, 2, LEGACY_COMM_WORLD, &mut st), ERR_TRUNCATE);
        assert_eq!(st, LegacyStatus { source: 0, tag: 2, error: ERR_TRUNCATE, count: 2 });
        assert_eq!(b, [1, 2]);
    });
}

#[test]
fn argument_codes() {
    run_in_process(2, |_| {
        let w = LEGACY_COMM_WORLD;
        let b = [0i32; 4];
        assert_eq!(legacy_send(&b, -1, INT32, 0, 0, w), ERR_COUNT);
        assert_eq!(legacy_send(&b, 5, INT32, 0, 0, w), ERR_BUFFER);
        assert_eq!(legacy_send(&b, 1, FLOAT32, 0, 0, w), ERR_TYPE);
        assert_eq!(legacy_send(&b, 1, 77, 0, 0, w), ERR_TYPE);
        assert_eq!(legacy_send(&b, 1, INT32, 2, 0, w), ERR_RANK);
        assert_eq!(legacy_send(&b, 1, INT32, -3, 0, w), ERR_RANK);
        assert_eq!(legacy_send(&b, 1, INT32, 0, -2, w), ERR_TAG);
        assert_eq!(legacy_send(&b, 1, INT32, 0, 32768, w), ERR_TAG);
        assert_eq!(legacy_send_c(&b, -1, INT32, 0, 0, w), ERR_COUNT);
        let mut r = [0i32];
        let mut st = LegacyStatus::default();
        assert_eq!(legacy_recv(&mut r, 1, INT32, -5, 0, w, &mut st), ERR_RANK);
        assert_eq!(legacy_recv(&mut r, 1, INT32, 0, -5, w, &mut st), ERR_TAG);
        assert_eq!(st, LegacyStatus::default());
        let mut out = [0u8];
        assert_eq!(legacy_allreduce(&[1u8], &mut out, 1, BYTE, SUM, w), ERR_TYPE);
        let mut o = [0i32];
        assert_eq!(legacy_allreduce(&[1i32], &mut o, 1, INT32, 17, w), ERR_OTHER);
        assert_eq!(legacy_barrier(w), SUCCESS);
    });
}

#[test]
fn collectives_through_the_shim() {
    let out = run_in_process(3, |u| {
        let me = u.rank() as i32;
        let w = LEGACY_COMM_WORLD;
        let mut b = if me == 1 { [4.5f64, -1.0] } else { [0.0; 2] };
        assert_eq!(legacy_bcast(&mut b, 2, FLOAT64, 1, w), SUCCESS);
        assert_eq!(b, [4.5, -1.0]);

        let mut red = [0i64; 2];
        assert_eq!(legacy_reduce(&[me as i64, 1], &mut red, 2, INT64, SUM, 2, w), SUCCESS);
        let mut all = [0f32];
        assert_eq!(legacy_allreduce(&[me as f32], &mut all, 1, FLOAT32, MAX, w), SUCCESS);
        assert_eq!(all, [2.0]);

        let mut g = [0i32; 6];
        assert_eq!(legacy_gather(&[me, -me], 2, INT32, &mut g, 2, INT32, 0, w), SUCCESS);
        let mut gv = [0i32; 7];
        let send = vec![me; me as usize + 1];
        assert_eq!(
            legacy_gatherv_c(&send, me as i64 + 1, INT32, &mut gv, &[1, 2, 3], &[0, 1, 4], INT32, 0, w),
            SUCCESS
        );
        (red, g, gv)
    });
    assert_eq!(out[2].0, [3, 3]);
    assert_eq!(out[0].1, [0, 0, 1, -1, 2, -2]);
    assert_eq!(out[0].2, [0, 1, 1, 0, 2, 2, 2]);
}

#[test]
fn conversions_roundtrip_without_duplicating() {
    run_in_process(1, |u| {
        let w = u.world();
        assert_eq!(comm_to_legacy(w).unwrap(), LEGACY_COMM_WORLD);
        let d = w.dup().unwrap();
        let census = u.live_contexts();
        let h = comm_to_legacy(&d).unwrap();
        assert_eq!(comm_to_legacy(&d).unwrap(), h);
        let back = comm_from_legacy(h).unwrap();
        assert!(back.same_as(&d));
        assert_eq!(back.context_id(), d.context_id());
        assert_eq!(u.live_contexts(), census);

        let mut freed = h;
        assert_eq!(legacy_comm_free(&mut freed), SUCCESS);
        assert_eq!(comm_from_legacy(h).unwrap_err().class, ErrorClass::Comm);
        // The idiomatic owner still holds the communicator.
        assert_eq!(d.rank().unwrap(), 0);
        drop((d, back));
        assert_eq!(u.live_contexts(), census - 1);
    });
}

#[test]
fn request_conversions() {
    run_in_process(1, |u| {
        let w = u.world();
        let r = w.isend(&[3i32], 0, 4).unwrap();
        let h = request_to_legacy(r).unwrap();
        let mut st = LegacyStatus::default();
        assert_eq!(legacy_wait(&mut h.clone(), &mut st), SUCCESS);
        assert_eq!(st.count, 1);
        assert_eq!(request_from_legacy(h).unwrap_err().class, ErrorClass::Request);

        let mut buf = [0i32];
        let mut lh = LegacyHandle::NULL;
        let rc = unsafe { legacy_irecv(&mut buf, 1, INT32, 0, 4, LEGACY_COMM_WORLD, &mut lh) };
        assert_eq!(rc, SUCCESS);
        let mut back = request_from_legacy(lh).unwrap();
        let s = back.wait().unwrap();
        assert_eq!((s.source, s.tag, s.count), (0, 4, 1));
        // Idiomatic wait stays idempotent after the conversion.
        assert_eq!(back.wait().unwrap(), s);
        drop(back);
        assert_eq!(buf, [3]);
        assert_eq!(legacy_wait(&mut lh, &mut st), ERR_REQUEST);
    });
}

/// All four sender/receiver surface pairings, on the world and on a dup.
#[test]
fn cross_surface_exchange() {
    let out = run_in_process(2, |u| {
        let w = u.world();
        let d = w.dup().unwrap();
        let dh = comm_to_legacy(&d).unwrap();
        let mut got = Vec::new();
        for (comm, h) in [(w, LEGACY_COMM_WORLD), (&d, dh)] {
            let h2 = comm_to_legacy(comm).unwrap();
            assert_eq!(h2, h);
            for (tag, legacy_send_side, legacy_recv_side) in
                [(1, false, false), (2, false, true), (3, true, false), (4, true, true)]
            {
                let payload = [tag as i32 * 100, u.rank() as i32];
                if u.rank() == 0 {
                    if legacy_send_side {
                        assert_eq!(legacy_send(&payload, 2, INT32, 1, tag, h), SUCCESS);
                    } else {
                        comm.send(&payload, 1, tag as u32).unwrap();
                    }
                } else {
                    let mut b = [0i32; 2];
                    if legacy_recv_side {
                        let mut st = LegacyStatus::default();
                        assert_eq!(legacy_recv(&mut b, 2, INT32, 0, tag, h, &mut st), SUCCESS);
                        assert_eq!((st.source, st.tag, st.count), (0, tag, 2));
                    } else {
                        let st = comm.recv(&mut b, IDIOMATIC_ANY_SOURCE, tag as u32).unwrap();
                        assert_eq!((st.source, st.tag, st.count), (0, tag as u32, 2));
                    }
                    got.push(b);
                }
            }
        }
        let mut s = [0i32];
        comm_from_legacy(dh).unwrap().allreduce(&[1], &mut s, ReductionOp::Sum).unwrap();
        assert_eq!(s, [2]);
        got
    });
    let want: Vec<[i32; 2]> = (0..2).flat_map(|_| (1..=4).map(|t| [t * 100, 0])).collect();
    assert_eq!(out[1], want);
}

#[test]
fn handles_die_with_the_universe() {
    let leftover = run_in_process(1, |u| {
        let mut h = LegacyHandle::NULL;
        assert_eq!(legacy_comm_dup(LEGACY_COMM_WORLD, &mut h), SUCCESS);
        assert_eq!(legacy_handle_count(), 2);
        let _ = u;
        h
    });
    // The rank thread has exited; on this thread nothing is initialized.
    let mut r = 0;
    assert_eq!(legacy_comm_rank(leftover[0], &mut r), ERR_COMM);
    assert_eq!(legacy_comm_rank(LEGACY_COMM_WORLD, &mut r), ERR_COMM);
    assert_eq!(legacy_barrier(LEGACY_COMM_WORLD), ERR_COMM);
}
