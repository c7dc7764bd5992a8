//! Envelope counts on the wire, and the doubled big-count procedures.

use std::cell::RefCell;
use std::rc::Rc;

use mmp_core::frame::{decode_header, encode_frame, encode_header, ContextId};
use mmp_core::legacy::{self, LegacyHandle, LegacyStatus, LEGACY_COMM_WORLD};
use mmp_core::{run_in_process, DatatypeKind, EnvelopeHeader, MessageEnvelope, TapAction, Universe};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FIDELITY_COUNTS: [u64; 6] = [0, 1, (1 << 31) - 1, 1 << 31, (1 << 31) + 7, 1 << 40];

/// Header-only frames for every listed count decode to the same count.
pub fn count_fidelity() -> Result<(), String> {
    for count in FIDELITY_COUNTS {
        for dtype in [DatatypeKind::Byte, DatatypeKind::Float64] {
            let h = EnvelopeHeader { context: ContextId(5), source: 1, dest: 2, tag: 3, dtype, count };
            let bytes = encode_header(&h, 0).map_err(|e| e.to_string())?;
            let (back, _) = decode_header(&bytes).map_err(|e| e.to_string())?;
            if back != h {
                return Err(format!("count {count}: decoded {back:?}"));
            }
        }
    }
    Ok(())
}

/// What one outgoing message looked like on the wire. Payloads too large to
/// copy are identified by address and length.
#[derive(Debug, PartialEq)]
enum Wire {
    Frame(Vec<u8>),
    Large([u8; 36], usize, usize),
}

const COPY_LIMIT: usize = 1 << 20;

fn frames(u: &Universe, send: impl FnOnce() -> i32) -> (i32, Vec<Wire>) {
    let log = Rc::new(RefCell::new(Vec::new()));
    let sink = log.clone();
    u.set_send_tap(Some(Box::new(move |m| {
        let wire = if m.payload.len() <= COPY_LIMIT {
            let e = MessageEnvelope::new(m.header, m.payload.to_vec()).expect("consistent envelope");
            Wire::Frame(encode_frame(&e).expect("encodable"))
        } else {
            let head = encode_header(&m.header, m.payload.len() as u64).expect("encodable");
            Wire::Large(head, m.payload.as_ptr() as usize, m.payload.len())
        };
        sink.borrow_mut().push(wire);
        TapAction::Swallow
    })));
    let rc = send();
    u.set_send_tap(None);
    (rc, log.take())
}

/// `legacy_send` and `legacy_send_c` (and the `isend` pair) with the same
/// count produce identical frames. Counts are sampled from the whole
/// non-negative 32-bit range, plus `i32::MAX` itself; buffers are zeroed
/// allocations that are never written.
pub fn doubling(samples: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts: Vec<i32> = vec![0, 1, i32::MAX];
    counts.extend((0..samples).map(|_| match rng.gen_range(0..4) {
        0 => rng.gen_range(0..i32::MAX),
        _ => rng.gen_range(0..1 << 16),
    }));
    let pool = vec![0u8; i32::MAX as usize];
    let compared = run_in_process(1, |u| -> Result<usize, String> {
        for (i, &count) in counts.iter().enumerate() {
            let buf = &pool[..count as usize];
            let tag = (i % 32768) as i32;
            let a = frames(u, || legacy::legacy_send(buf, count, legacy::BYTE, 0, tag, LEGACY_COMM_WORLD));
            let b = frames(u, || legacy::legacy_send_c(buf, count as i64, legacy::BYTE, 0, tag, LEGACY_COMM_WORLD));
            let (mut ra, mut rb) = (LegacyHandle::NULL, LegacyHandle::NULL);
            let c = frames(u, || legacy::legacy_isend(buf, count, legacy::BYTE, 0, tag, LEGACY_COMM_WORLD, &mut ra));
            let d = frames(u, || {
                legacy::legacy_isend_c(buf, count as i64, legacy::BYTE, 0, tag, LEGACY_COMM_WORLD, &mut rb)
            });
            for mut r in [ra, rb] {
                legacy::legacy_wait(&mut r, &mut LegacyStatus::default());
            }
            if a.0 != legacy::SUCCESS || a.1.len() != 1 {
                return Err(format!("count {count}: legacy_send returned {} with {} frames", a.0, a.1.len()));
            }
            if a != b || a != c || a != d {
                return Err(format!("count {count}: doubled procedures framed differently"));
            }
        }
        // The 64-bit twin also takes a count the 32-bit one cannot express.
        let big = (1usize << 31) + 7;
        let huge = vec![0u8; big];
        let (rc, wire) =
            frames(u, || legacy::legacy_send_c(&huge, big as i64, legacy::BYTE, 0, 0, LEGACY_COMM_WORLD));
        match wire.as_slice() {
            [Wire::Large(head, _, len)] if rc == legacy::SUCCESS && *len == big => {
                let (h, _) = decode_header(head).map_err(|e| e.to_string())?;
                if h.count != big as u64 {
                    return Err(format!("legacy_send_c of {big} framed count {}", h.count));
                }
            }
            _ => return Err(format!("legacy_send_c of {big} returned {rc}")),
        }
        Ok(counts.len())
    });
    compared.into_iter().next().expect("one rank")
}
