//! Counts past the 32-bit range on the wire and through both surfaces.

use std::cell::RefCell;
use std::rc::Rc;

use mmp_core::frame::{decode_frame, decode_header, encode_frame, encode_header, ContextId, HEADER_LEN};
use mmp_core::legacy::*;
use mmp_core::{
    run_in_process, Communicator, DatatypeKind, EnvelopeHeader, MessageEnvelope, Request, Status, TapAction,
    Universe,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIG: u64 = (1 << 31) + 7;

fn header(count: u64, dtype: DatatypeKind) -> EnvelopeHeader {
    EnvelopeHeader { context: ContextId(17), source: 3, dest: 1, tag: 99, dtype, count }
}

#[test]
fn header_counts_roundtrip_exactly() {
    for count in [0, 1, (1 << 31) - 1, 1 << 31, BIG, 1 << 40, (1 << 63) - 1] {
        let h = header(count, DatatypeKind::Byte);
        let bytes = encode_header(&h, 0).unwrap();
        let (back, frame_len) = decode_header(&bytes).unwrap();
        assert_eq!(back.count, count);
        assert_eq!(back, h);
        assert_eq!(frame_len, 28);
        assert_eq!(u64::from_le_bytes(bytes[28..36].try_into().unwrap()), count);
    }
}

#[test]
fn empty_payload_is_header_only() {
    let e = MessageEnvelope::new(header(0, DatatypeKind::Float64), Vec::new()).unwrap();
    let bytes = encode_frame(&e).unwrap();
    assert_eq!(bytes.len(), HEADER_LEN);
    assert_eq!(decode_frame(&bytes).unwrap(), (e, HEADER_LEN));
}

proptest! {
    #[test]
    fn any_count_survives_the_header(count in any::<u64>(), tag in any::<u32>()) {
        let h = EnvelopeHeader { tag, ..header(count, DatatypeKind::Int64) };
        let (back, _) = decode_header(&encode_header(&h, 0).unwrap()).unwrap();
        prop_assert_eq!(back, h);
    }
}

fn capture(u: &Universe) -> Rc<RefCell<Vec<EnvelopeHeader>>> {
    let log = Rc::new(RefCell::new(Vec::new()));
    let sink = log.clone();
    u.set_send_tap(Some(Box::new(move |m| {
        assert_eq!(m.payload.len() as u64, m.header.payload_len().unwrap());
        sink.borrow_mut().push(m.header);
        TapAction::Swallow
    })));
    log
}

#[test]
fn big_send_through_both_surfaces_keeps_the_exact_count() {
    // Zeroed allocation; the pages are never written, only viewed.
    let buf = vec![0u8; BIG as usize];
    let headers = run_in_process(1, |u| {
        let log = capture(u);
        assert_eq!(legacy_send_c(&buf, BIG as i64, BYTE, 0, 4, LEGACY_COMM_WORLD), SUCCESS);
        u.world().send(&buf, 0, 4).unwrap();
        let mut req = LegacyHandle::NULL;
        assert_eq!(legacy_isend_c(&buf, BIG as i64, BYTE, 0, 4, LEGACY_COMM_WORLD, &mut req), SUCCESS);
        let mut st = LegacyStatus::default();
        assert_eq!(legacy_wait(&mut req, &mut st), SUCCESS);
        assert_eq!(st.count, BIG as i64);
        u.set_send_tap(None);
        log.take()
    });
    let headers = &headers[0];
    assert_eq!(headers.len(), 3);
    for h in headers {
        assert_eq!(h.count, BIG);
        let (back, frame_len) = decode_header(&encode_header(h, BIG).unwrap()).unwrap();
        assert_eq!(back.count, BIG);
        assert_eq!(frame_len as u64, 28 + BIG);
    }
}

#[test]
fn frames_beyond_the_length_field_are_refused_not_truncated() {
    // frame_len is 32 bits, so payloads near 4 GiB cannot be framed.
    assert!(encode_header(&header(1 << 40, DatatypeKind::Byte), 1 << 40).is_err());
}

/// What one outgoing message looked like on the wire.
#[derive(Debug, PartialEq)]
enum Wire {
    Frame(Vec<u8>),
    /// Encoded header plus the address and length of the payload, for
    /// payloads too large to copy.
    Large([u8; HEADER_LEN], usize, usize),
}

const COPY_LIMIT: usize = 1 << 20;

/// Messages sent by `send`, swallowed before they reach the transport.
fn frames(u: &Universe, send: impl FnOnce() -> i32) -> (i32, Vec<Wire>) {
    let log = Rc::new(RefCell::new(Vec::new()));
    let sink = log.clone();
    u.set_send_tap(Some(Box::new(move |m| {
        let wire = if m.payload.len() <= COPY_LIMIT {
            let e = MessageEnvelope::new(m.header, m.payload.to_vec()).unwrap();
            Wire::Frame(encode_frame(&e).unwrap())
        } else {
            let head = encode_header(&m.header, m.payload.len() as u64).unwrap();
            Wire::Large(head, m.payload.as_ptr() as usize, m.payload.len())
        };
        sink.borrow_mut().push(wire);
        TapAction::Swallow
    })));
    let rc = send();
    u.set_send_tap(None);
    (rc, log.take())
}

#[test]
fn doubled_procedures_encode_identically_up_to_i32_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    // Sample counts across the whole i32 range; buffers are shared and zeroed.
    let pool = vec![0u8; 1 << 26];
    let mut counts: Vec<i32> = vec![0, 1, 5, (1 << 26) - 1];
    counts.extend((0..400).map(|_| rng.gen_range(0..1 << 26)));
    let big: Vec<i32> = vec![i32::MAX, rng.gen_range(1 << 30..i32::MAX)];
    let big_pool = vec![0u8; i32::MAX as usize];
    run_in_process(1, |u| {
        let dup = u.world().dup().unwrap();
        let dup_h = comm_to_legacy(&dup).unwrap();
        for (i, &count) in counts.iter().chain(&big).enumerate() {
            let buf: &[u8] = if count as usize <= pool.len() { &pool } else { &big_pool };
            let tag = (i % 32768) as i32;
            let (comm, h): (&Communicator, LegacyHandle) =
                if i % 2 == 0 { (u.world(), LEGACY_COMM_WORLD) } else { (&dup, dup_h) };
            let a = frames(u, || legacy_send(buf, count, BYTE, 0, tag, h));
            let b = frames(u, || legacy_send_c(buf, count as i64, BYTE, 0, tag, h));
            let c = frames(u, || {
                comm.send(&buf[..count as usize], 0, tag as u32).unwrap();
                SUCCESS
            });
            assert_eq!(a.0, SUCCESS);
            assert_eq!(a, b, "count {count}");
            assert_eq!(a, c, "count {count}");
            let mut ra = LegacyHandle::NULL;
            let mut rb = LegacyHandle::NULL;
            let d = frames(u, || legacy_isend(buf, count, BYTE, 0, tag, h, &mut ra));
            let e = frames(u, || legacy_isend_c(buf, count as i64, BYTE, 0, tag, h, &mut rb));
            assert_eq!(d, a);
            assert_eq!(e, a);
            for mut r in [ra, rb] {
                assert_eq!(legacy_wait(&mut r, &mut LegacyStatus::default()), SUCCESS);
            }
        }
    });
}

#[test]
fn doubled_procedures_agree_on_typed_payloads() {
    run_in_process(1, |u| {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..1000 {
            let n = rng.gen_range(0..64);
            let data: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            let count = rng.gen_range(0..=n) as i32;
            let tag = rng.gen_range(0..32768);
            let a = frames(u, || legacy_send(&data, count, FLOAT64, 0, tag, LEGACY_COMM_WORLD));
            let b = frames(u, || legacy_send_c(&data, count as i64, FLOAT64, 0, tag, LEGACY_COMM_WORLD));
            assert_eq!(a, b);
            assert_eq!(a.1.len(), 1);
            let mut bc = data.clone();
            let x = frames(u, || legacy_bcast(&mut bc, count, FLOAT64, 0, LEGACY_COMM_WORLD));
            let y = frames(u, || legacy_bcast_c(&mut bc, count as i64, FLOAT64, 0, LEGACY_COMM_WORLD));
            assert_eq!(x, y);
        }
    });
}

#[test]
fn received_counts_are_64_bit() {
    run_in_process(1, |u| {
        let w = u.world();
        w.send(&[1u8, 2, 3], 0, 0).unwrap();
        let mut buf = [0u8; 3];
        let st = w.recv(&mut buf, 0, 0).unwrap();
        let count: u64 = st.count;
        assert_eq!(count, 3);
        let mut lst = LegacyStatus::default();
        legacy_send_c(&[1u8], 1, BYTE, 0, 0, LEGACY_COMM_WORLD);
        legacy_recv_c(&mut buf, 3, BYTE, 0, 0, LEGACY_COMM_WORLD, &mut lst);
        let count: i64 = lst.count;
        assert_eq!(count, 1);
    });
}

/// The idiomatic point-to-point surface takes lengths from the slices
/// themselves; there is no separate count parameter of any width.
#[test]
fn idiomatic_surface_has_no_count_parameter() {
    let _send: fn(&Communicator, &[u8], u32, u32) -> mmp_core::Result<()> = Communicator::send::<u8>;
    let _isend: for<'a> fn(&Communicator, &'a [u8], u32, u32) -> mmp_core::Result<Request<'a>> =
        Communicator::isend::<u8>;
    let _recv = |c: &Communicator, buf: &mut [u8]| -> mmp_core::Result<Status> { c.recv(buf, 0, 0) };
    let _irecv = |c: &Communicator, buf: &'static mut [u8]| -> mmp_core::Result<Request<'static>> { c.irecv(buf, 0, 0) };
    // Slice lengths are usize, at least as wide as any count a u64 envelope carries here.
    assert!(usize::BITS >= 64);
}
