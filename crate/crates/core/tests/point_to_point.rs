use std::time::Duration;

use mmp_core::transport::TcpConfig;
use mmp_core::{
    run_in_process, run_in_process_with, wait_all, Config, ErrorClass, Mode, RequestKind, RequestState, Source,
    TagSelector, Universe, ANY_SOURCE, ANY_TAG,
};

#[test]
fn ring_with_wait_all() {
    let out = run_in_process(4, |u| {
        let w = u.world();
        let (me, n) = (u.rank(), u.size());
        let send = [me as i64 * 10, me as i64 * 10 + 1];
        let mut recv = [0i64; 2];
        {
            let mut reqs = vec![w.irecv(&mut recv, (me + n - 1) % n, 3).unwrap(), w.isend(&send, (me + 1) % n, 3).unwrap()];
            let st = wait_all(&mut reqs).unwrap();
            assert_eq!(st[0].source, (me + n - 1) % n);
            assert_eq!(st[0].count, 2);
        }
        recv
    });
    assert_eq!(out, vec![[30, 31], [0, 1], [10, 11], [20, 21]]);
}

#[test]
fn self_send_needs_no_peer() {
    run_in_process(1, |u| {
        let w = u.world();
        w.send(&[1.5f64, 2.5], 0, 0).unwrap();
        let mut b = [0f64; 2];
        let st = w.recv(&mut b, 0, 0).unwrap();
        assert_eq!(b, [1.5, 2.5]);
        assert_eq!((st.source, st.tag, st.count, st.error), (0, 0, 2, ErrorClass::Success));
    });
}

#[test]
fn truncation_copies_capacity_and_flags_status() {
    run_in_process(1, |u| {
        let w = u.world();
        w.send(&[1i32, 2, 3, 4, 5], 0, 1).unwrap();
        let mut b = [0i32; 3];
        let st = w.recv(&mut b, 0, 1).unwrap();
        assert_eq!(b, [1, 2, 3]);
        assert_eq!(st.count, 3);
        assert_eq!(st.error, ErrorClass::Truncate);
    });
}

#[test]
fn datatype_mismatch_fails_the_receive() {
    run_in_process(1, |u| {
        let w = u.world();
        w.send(&[7i32], 0, 1).unwrap();
        let mut b = [0f32; 1];
        let err = w.recv(&mut b, 0, 1).unwrap_err();
        assert_eq!(err.class, ErrorClass::Type);
        assert_eq!(b, [0.0]);
    });
}

#[test]
fn argument_errors() {
    run_in_process(2, |u| {
        let w = u.world();
        assert_eq!(w.send(&[0u8], 2, 0).unwrap_err().class, ErrorClass::Rank);
        assert_eq!(w.send(&[0u8], 0, 32768).unwrap_err().class, ErrorClass::Tag);
        w.send(&[0u8], u.rank(), 32767).unwrap();
        let mut b = [0u8];
        assert_eq!(w.recv(&mut b, 5, ANY_TAG).unwrap_err().class, ErrorClass::Rank);
        assert_eq!(w.recv(&mut b, ANY_SOURCE, 40000).unwrap_err().class, ErrorClass::Tag);
        w.recv(&mut b, ANY_SOURCE, ANY_TAG).unwrap();
        // Rank is checked before tag.
        assert_eq!(w.send(&[0u8], 9, 40000).unwrap_err().class, ErrorClass::Rank);
    });
}

#[test]
fn failed_isend_reports_its_request() {
    run_in_process(1, |u| {
        let err = u.world().isend(&[1i32], 3, 0).unwrap_err();
        assert_eq!(err.class, ErrorClass::Rank);
        let r = err.failed_request.expect("failed request attached");
        assert_eq!(r.kind, RequestKind::Send);
        assert_eq!(r.state, RequestState::Failed(ErrorClass::Rank));
    });
}

#[test]
fn wait_is_idempotent_and_test_polls() {
    run_in_process(2, |u| {
        let w = u.world();
        if u.rank() == 0 {
            w.barrier().unwrap();
            w.send(&[42i64], 1, 9).unwrap();
        } else {
            let mut b = [0i64];
            let mut r = w.irecv(&mut b, 0, 9).unwrap();
            assert_eq!(r.test().unwrap(), None);
            assert_eq!(r.state(), RequestState::Pending);
            w.barrier().unwrap();
            let a = r.wait().unwrap();
            let again = r.wait().unwrap();
            assert_eq!(a, again);
            assert_eq!(r.test().unwrap(), Some(a));
            drop(r);
            assert_eq!(b, [42]);
        }
    });
}

#[test]
fn wait_all_reports_lowest_failed_request() {
    run_in_process(2, |u| {
        let w = u.world();
        if u.rank() == 0 {
            w.send(&[1i32], 1, 1).unwrap();
            w.send(&[2i32], 1, 2).unwrap();
            w.send(&[3i32], 1, 3).unwrap();
        } else {
            let (mut a, mut b, mut c) = ([0i32], [0f64], [0f32]);
            let mut reqs =
                vec![w.irecv(&mut a, 0, 1).unwrap(), w.irecv(&mut b, 0, 2).unwrap(), w.irecv(&mut c, 0, 3).unwrap()];
            let second = reqs[1].id();
            let err = wait_all(&mut reqs).unwrap_err();
            assert_eq!(err.class, ErrorClass::Type);
            assert_eq!(err.failed_request.unwrap().id, second);
        }
    });
}

#[test]
fn dropped_pending_receive_is_harmless() {
    run_in_process(2, |u| {
        let w = u.world();
        if u.rank() == 1 {
            let mut b = [0u8; 4];
            let r = w.irecv(&mut b, 0, 5).unwrap();
            drop(r);
        }
        w.barrier().unwrap();
        if u.rank() == 0 {
            w.send(&[1u8, 2, 3, 4], 1, 5).unwrap();
            w.send(&[9u8], 1, 6).unwrap();
        } else {
            let mut b = [0u8];
            w.recv(&mut b, 0, 6).unwrap();
            assert_eq!(b, [9]);
            assert_eq!(u.pending_requests(), 0);
        }
    });
}

#[test]
fn blocking_wait_times_out() {
    let cfg = Config { wait_timeout: Some(Duration::from_millis(100)) };
    run_in_process_with(1, cfg, |u| {
        let mut b = [0u8];
        let err = u.world().recv(&mut b, 0, 0).unwrap_err();
        assert_eq!(err.class, ErrorClass::Other);
    });
}

#[test]
fn dup_isolates_traffic() {
    run_in_process(2, |u| {
        let w = u.world();
        let d = w.dup().unwrap();
        assert_ne!(d.context_id(), w.context_id());
        if u.rank() == 0 {
            d.send(&[1i32], 1, 0).unwrap();
            w.send(&[2i32], 1, 0).unwrap();
        } else {
            let mut b = [0i32];
            w.recv(&mut b, ANY_SOURCE, ANY_TAG).unwrap();
            assert_eq!(b, [2]);
            d.recv(&mut b, Source::Any, TagSelector::Any).unwrap();
            assert_eq!(b, [1]);
        }
    });
}

#[test]
fn released_communicator_is_an_error() {
    run_in_process(1, |u| {
        let d = u.world().dup().unwrap();
        drop(u.world().dup().unwrap());
        assert_eq!(d.rank().unwrap(), 0);
        let census = u.live_contexts();
        drop(d);
        assert_eq!(u.live_contexts(), census - 1);
    });
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn run_tcp<T: Send>(n: u32, f: impl Fn(Universe) -> T + Sync) -> Vec<T> {
    let addr = format!("127.0.0.1:{}", free_port());
    std::thread::scope(|s| {
        let hs: Vec<_> = (0..n)
            .map(|r| {
                let (addr, f) = (addr.clone(), &f);
                s.spawn(move || {
                    let cfg = TcpConfig::new(r, n, addr);
                    let u = Universe::init_with(Mode::Tcp(cfg), Config { wait_timeout: Some(Duration::from_secs(30)) })
                        .expect("tcp init");
                    f(u)
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

#[test]
fn tcp_ring_and_collectives() {
    let out = run_tcp(3, |u| {
        let w = u.world();
        let (me, n) = (u.rank(), u.size());
        let big: Vec<i32> = (0..100_000).map(|i| i * (me as i32 + 1)).collect();
        w.send(&big, (me + 1) % n, 4).unwrap();
        let mut got = vec![0i32; 100_000];
        w.recv(&mut got, (me + n - 1) % n, 4).unwrap();
        let left = (me + n - 1) % n;
        assert!(got.iter().enumerate().all(|(i, &v)| v == i as i32 * (left as i32 + 1)));
        let mut sum = [0i64];
        w.allreduce(&[me as i64 + 1], &mut sum, mmp_core::ReductionOp::Sum).unwrap();
        let d = w.dup().unwrap();
        d.barrier().unwrap();
        drop(d);
        u.finalize().unwrap();
        sum[0]
    });
    assert_eq!(out, vec![6, 6, 6]);
}

#[test]
fn tcp_peer_exit_fails_pending_receive() {
    let out = run_tcp(2, |u| {
        if u.rank() == 1 {
            drop(u);
            return None;
        }
        let mut b = [0u8];
        Some(u.world().recv(&mut b, 1, 0).unwrap_err().class)
    });
    assert_eq!(out, vec![Some(ErrorClass::Other), None]);
}
