//! Built-in scenarios. Each rank returns a transcript of what it observed;
//! with a fixed seed the transcript is the same on every run and in every
//! launch mode.

use std::fmt;
use std::str::FromStr;

use mmp_core::legacy::{self, LegacyStatus, LEGACY_COMM_WORLD};
use mmp_core::{wait_all, ErrorClass, ReductionOp, Universe};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Ring,
    HaloExchange,
    CollectiveSweep,
    ErrorInjection,
}

impl Scenario {
    pub const ALL: [Scenario; 4] =
        [Scenario::Ring, Scenario::HaloExchange, Scenario::CollectiveSweep, Scenario::ErrorInjection];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Ring => "ring",
            Scenario::HaloExchange => "halo-exchange",
            Scenario::CollectiveSweep => "collective-sweep",
            Scenario::ErrorInjection => "error-injection",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| format!("unknown scenario {s:?}; expected one of ring, halo-exchange, collective-sweep, error-injection"))
    }
}

pub type Transcript = Vec<String>;

/// Runs `scenario` on this rank. An `Err` means the rank failed.
pub fn run(u: &Universe, scenario: Scenario, seed: u64) -> Result<Transcript, String> {
    match scenario {
        Scenario::Ring => ring(u, seed),
        Scenario::HaloExchange => halo(u, seed),
        Scenario::CollectiveSweep => sweep(u, seed),
        Scenario::ErrorInjection => inject(u),
    }
    .map_err(|e| format!("rank {}: {e}", u.rank()))
}

fn rank_rng(seed: u64, rank: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (u64::from(rank) + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn ring_payload(seed: u64, rank: u32) -> Vec<i64> {
    let mut rng = rank_rng(seed, rank);
    (0..8).map(|_| rng.gen_range(-1_000_000..1_000_000)).collect()
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn code_name(rc: i32) -> &'static str {
    legacy::error_class(rc).map_or("UNPUBLISHED", ErrorClass::name)
}

/// Each rank passes its payload to the right, once per surface.
fn ring(u: &Universe, seed: u64) -> Result<Transcript, String> {
    let w = u.world();
    let (me, n) = (w.rank().map_err(|e| e.to_string())?, w.size().map_err(|e| e.to_string())?);
    let (left, right) = ((me + n - 1) % n, (me + 1) % n);
    let mine = ring_payload(seed, me);
    let expect = ring_payload(seed, left);
    let mut out = Vec::new();

    let mut got = vec![0i64; mine.len()];
    let mut send = w.isend(&mine, right, 0).map_err(|e| e.to_string())?;
    let st = w.recv(&mut got, left, 0).map_err(|e| e.to_string())?;
    send.wait().map_err(|e| e.to_string())?;
    if got != expect {
        return Err(format!("idiomatic lap: got {got:?} from rank {left}, expected {expect:?}"));
    }
    out.push(format!("lap=1 surface=idiomatic from={} count={} payload={}", st.source, st.count, join(&got)));

    let mut got = vec![0i64; mine.len()];
    let mut lst = LegacyStatus::default();
    let rc = legacy::legacy_send(&mine, mine.len() as i32, legacy::INT64, right as i32, 1, LEGACY_COMM_WORLD);
    if rc != legacy::SUCCESS {
        return Err(format!("legacy_send returned {}", code_name(rc)));
    }
    let len = got.len() as i32;
    let rc = legacy::legacy_recv(&mut got, len, legacy::INT64, left as i32, 1, LEGACY_COMM_WORLD, &mut lst);
    if rc != legacy::SUCCESS {
        return Err(format!("legacy_recv returned {}", code_name(rc)));
    }
    if got != expect {
        return Err(format!("legacy lap: got {got:?} from rank {left}, expected {expect:?}"));
    }
    out.push(format!("lap=2 surface=legacy from={} count={} payload={}", lst.source, lst.count, join(&got)));

    let mut total = [0i64];
    w.allreduce(&[got.iter().sum::<i64>()], &mut total, ReductionOp::Sum).map_err(|e| e.to_string())?;
    let want: i64 = (0..n).map(|r| ring_payload(seed, r).iter().sum::<i64>()).sum();
    if total[0] != want {
        return Err(format!("ring total {} != {want}", total[0]));
    }
    out.push(format!("total={}", total[0]));
    Ok(out)
}

const CELLS: usize = 8;
const STEPS: usize = 4;

fn halo_init(seed: u64, rank: u32) -> Vec<f64> {
    let mut rng = rank_rng(seed, rank);
    (0..CELLS).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn stencil(left: f64, c: f64, right: f64) -> f64 {
    0.25 * left + 0.5 * c + 0.25 * right
}

/// Periodic 1-D three-point stencil over the concatenation of every rank's cells.
fn halo_reference(seed: u64, n: u32) -> Vec<Vec<f64>> {
    let mut field: Vec<f64> = (0..n).flat_map(|r| halo_init(seed, r)).collect();
    let len = field.len();
    for _ in 0..STEPS {
        field = (0..len).map(|i| stencil(field[(i + len - 1) % len], field[i], field[(i + 1) % len])).collect();
    }
    field.chunks(CELLS).map(<[f64]>::to_vec).collect()
}

fn halo(u: &Universe, seed: u64) -> Result<Transcript, String> {
    let w = u.world();
    let (me, n) = (u.rank(), u.size());
    let (left, right) = ((me + n - 1) % n, (me + 1) % n);
    let mut cells = halo_init(seed, me);
    let mut out = Vec::new();
    for step in 0..STEPS {
        let (mut ghost_l, mut ghost_r) = ([0f64], [0f64]);
        {
            let mut reqs = vec![
                w.irecv(&mut ghost_l, left, 10).map_err(|e| e.to_string())?,
                w.irecv(&mut ghost_r, right, 11).map_err(|e| e.to_string())?,
                w.isend(&cells[CELLS - 1..], right, 10).map_err(|e| e.to_string())?,
                w.isend(&cells[..1], left, 11).map_err(|e| e.to_string())?,
            ];
            wait_all(&mut reqs).map_err(|e| e.to_string())?;
        }
        cells = (0..CELLS)
            .map(|i| {
                let l = if i == 0 { ghost_l[0] } else { cells[i - 1] };
                let r = if i == CELLS - 1 { ghost_r[0] } else { cells[i + 1] };
                stencil(l, cells[i], r)
            })
            .collect();
        let mut sum = [0f64];
        w.allreduce(&[cells.iter().sum::<f64>()], &mut sum, ReductionOp::Sum).map_err(|e| e.to_string())?;
        out.push(format!("step={} local={:016x} global={:016x}", step + 1, checksum(&cells), sum[0].to_bits()));
    }
    let want = &halo_reference(seed, n)[me as usize];
    if cells.iter().map(|x| x.to_bits()).ne(want.iter().map(|x| x.to_bits())) {
        return Err(format!("halo cells {cells:?} differ from the sequential stencil {want:?}"));
    }
    Ok(out)
}

fn checksum(xs: &[f64]) -> u64 {
    xs.iter().fold(0u64, |h, x| h.rotate_left(7) ^ x.to_bits())
}

fn sweep_data(seed: u64, rank: u32, salt: u64) -> Vec<i64> {
    let mut rng = rank_rng(seed ^ salt, rank);
    (0..4).map(|_| rng.gen_range(-100..100)).collect()
}

fn fold(op: ReductionOp, a: i64, b: i64) -> i64 {
    match op {
        ReductionOp::Sum => a.wrapping_add(b),
        ReductionOp::Prod => a.wrapping_mul(b),
        ReductionOp::Min => a.min(b),
        ReductionOp::Max => a.max(b),
    }
}

/// Every collective once per operator and root, checked against data every
/// rank can regenerate.
fn sweep(u: &Universe, seed: u64) -> Result<Transcript, String> {
    let w = u.world();
    let (me, n) = (u.rank(), u.size());
    let err = |e: mmp_core::MpError| e.to_string();
    let mut out = Vec::new();
    for (k, op) in ReductionOp::ALL.into_iter().enumerate() {
        let salt = k as u64 + 1;
        let mine = sweep_data(seed, me, salt);
        let want = (1..n).fold(sweep_data(seed, 0, salt), |acc, r| {
            acc.iter().zip(sweep_data(seed, r, salt)).map(|(&a, b)| fold(op, a, b)).collect()
        });
        let mut got = vec![0i64; mine.len()];
        w.allreduce(&mine, &mut got, op).map_err(err)?;
        if got != want {
            return Err(format!("allreduce {op}: {got:?} != {want:?}"));
        }
        let root = k as u32 % n;
        if me == root {
            let mut r = vec![0i64; mine.len()];
            w.reduce_root(&mine, &mut r, op).map_err(err)?;
            if r != want {
                return Err(format!("reduce {op}: {r:?} != {want:?}"));
            }
        } else {
            w.reduce(&mine, op, root).map_err(err)?;
        }
        out.push(format!("op={op} root={root} result={}", join(&got)));
    }
    for root in 0..n {
        let mut buf = if me == root { sweep_data(seed, root, 100) } else { vec![0; 4] };
        w.bcast(&mut buf, root).map_err(err)?;
        if buf != sweep_data(seed, root, 100) {
            return Err(format!("bcast from {root}: {buf:?}"));
        }
        let mine: Vec<i64> = sweep_data(seed, me, 200)[..(me % 3) as usize].to_vec();
        if me == root {
            let counts: Vec<u64> = (0..n).map(|r| u64::from(r % 3)).collect();
            let displs: Vec<u64> = counts.iter().scan(0, |at, &c| Some(std::mem::replace(at, *at + c))).collect();
            let mut all = vec![0i64; counts.iter().sum::<u64>() as usize];
            w.gatherv_root(&mine, &mut all, &counts, &displs).map_err(err)?;
            let want: Vec<i64> = (0..n).flat_map(|r| sweep_data(seed, r, 200)[..(r % 3) as usize].to_vec()).collect();
            if all != want {
                return Err(format!("gatherv at {root}: {all:?} != {want:?}"));
            }
            let mut g = vec![0i64; 4 * n as usize];
            w.gather_root(&sweep_data(seed, me, 300), &mut g).map_err(err)?;
            let want: Vec<i64> = (0..n).flat_map(|r| sweep_data(seed, r, 300)).collect();
            if g != want {
                return Err(format!("gather at {root}: {g:?} != {want:?}"));
            }
            out.push(format!("root={root} bcast={} gatherv={} gather_sum={}", join(&buf), join(&all), g.iter().sum::<i64>()));
        } else {
            w.gatherv(&mine, root).map_err(err)?;
            w.gather(&sweep_data(seed, me, 300), root).map_err(err)?;
            out.push(format!("root={root} bcast={}", join(&buf)));
        }
    }
    w.barrier().map_err(err)?;
    Ok(out)
}

/// Deliberate misuse. The rank after 0 receives float data as integers and
/// must see ERR_TYPE; every rank then passes invalid arguments to the shim.
fn inject(u: &Universe) -> Result<Transcript, String> {
    let w = u.world();
    let (me, n) = (u.rank(), u.size());
    let victim = 1 % n;
    let mut out = Vec::new();
    if me == 0 {
        w.send(&[1.5f64, 2.5], victim, 9).map_err(|e| e.to_string())?;
    }
    if me == victim {
        let mut buf = [0i32; 4];
        match w.recv(&mut buf, 0, 9) {
            Err(e) if e.class == ErrorClass::Type => out.push(format!("rank={me} recv from=0 -> {}", e.class)),
            Err(e) => return Err(format!("expected ERR_TYPE, got {e}")),
            Ok(st) => return Err(format!("mismatched datatypes were accepted: {st:?}")),
        }
    }
    let probes: [(&str, i32, i32); 3] = [
        ("legacy_send count=-1", legacy::legacy_send(&[0i32], -1, legacy::INT32, 0, 0, LEGACY_COMM_WORLD), legacy::ERR_COUNT),
        ("legacy_send tag=40000", legacy::legacy_send(&[0i32], 1, legacy::INT32, 0, 40000, LEGACY_COMM_WORLD), legacy::ERR_TAG),
        (
            "legacy_send dest=size",
            legacy::legacy_send(&[0i32], 1, legacy::INT32, n as i32, 0, LEGACY_COMM_WORLD),
            legacy::ERR_RANK,
        ),
    ];
    for (what, rc, want) in probes {
        if rc != want {
            return Err(format!("{what} returned {}, expected {}", code_name(rc), code_name(want)));
        }
        out.push(format!("rank={me} {what} -> {}", code_name(rc)));
    }
    w.barrier().map_err(|e| e.to_string())?;
    Ok(out)
}
