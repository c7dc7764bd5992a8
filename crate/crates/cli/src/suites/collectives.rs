//! Collectives through both surfaces against a sequential fold over the
//! regenerated inputs of every rank.

use mmp_core::legacy::{self, LEGACY_COMM_WORLD};
use mmp_core::{run_in_process, ReductionOp, Reducible, Universe};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub trait Gen: Reducible {
    const CODE: i32;
    fn gen(rng: &mut ChaCha8Rng) -> Self;
    /// Reference fold of two values, computed independently of the library.
    fn fold(op: ReductionOp, a: Self, b: Self) -> Self;
}

macro_rules! int_gen {
    ($t:ty, $wide:ty, $code:expr) => {
        impl Gen for $t {
            const CODE: i32 = $code;
            fn gen(rng: &mut ChaCha8Rng) -> Self {
                rng.gen()
            }
            fn fold(op: ReductionOp, a: Self, b: Self) -> Self {
                let (a, b) = (a as $wide, b as $wide);
                let r = match op {
                    ReductionOp::Sum => a + b,
                    ReductionOp::Prod => a * b,
                    ReductionOp::Min => a.min(b),
                    ReductionOp::Max => a.max(b),
                };
                r as $t
            }
        }
    };
}

int_gen!(i32, i64, legacy::INT32);
int_gen!(i64, i128, legacy::INT64);

macro_rules! float_gen {
    ($t:ty, $code:expr) => {
        impl Gen for $t {
            const CODE: i32 = $code;
            fn gen(rng: &mut ChaCha8Rng) -> Self {
                rng.gen_range(-1000.0..1000.0)
            }
            fn fold(op: ReductionOp, a: Self, b: Self) -> Self {
                match op {
                    ReductionOp::Sum => a + b,
                    ReductionOp::Prod => a * b,
                    ReductionOp::Min => a.min(b),
                    ReductionOp::Max => a.max(b),
                }
            }
        }
    };
}

float_gen!(f32, legacy::FLOAT32);
float_gen!(f64, legacy::FLOAT64);

/// Arguments every rank agrees on for one trial.
#[derive(Debug, Clone)]
struct Trial {
    len: usize,
    root: u32,
    op: ReductionOp,
    vcounts: Vec<usize>,
    vdispls: Vec<usize>,
    vtotal: usize,
}

fn trial(seed: u64, n: u32, t: u64) -> Trial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((n as u64) << 32 | t));
    let len = rng.gen_range(0..12);
    let root = rng.gen_range(0..n);
    let op = ReductionOp::ALL[rng.gen_range(0..4)];
    let vcounts: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6)).collect();
    let mut vdispls = Vec::new();
    let mut at = 0;
    for &c in &vcounts {
        at += rng.gen_range(0..3);
        vdispls.push(at);
        at += c;
    }
    Trial { len, root, op, vcounts, vdispls, vtotal: at + rng.gen_range(0..3) }
}

fn contribution<T: Gen>(seed: u64, n: u32, t: u64, rank: u32, len: usize) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE ^ ((n as u64) << 40) ^ (t << 8) ^ rank as u64);
    (0..len).map(|_| T::gen(&mut rng)).collect()
}

#[derive(Debug, PartialEq)]
struct Outputs {
    bcast: Vec<u8>,
    gather: Option<Vec<u8>>,
    gatherv: Option<Vec<u8>>,
    reduce: Option<Vec<u8>>,
    allreduce: Vec<u8>,
}

fn bytes<T: Gen>(v: &[T]) -> Vec<u8> {
    bytemuck::cast_slice(v).to_vec()
}

fn idiomatic<T: Gen>(u: &Universe, tr: &Trial, seed: u64, t: u64) -> Outputs {
    let (w, me, n) = (u.world(), u.rank(), u.size());
    let mine = contribution::<T>(seed, n, t, me, tr.len);
    let is_root = me == tr.root;

    let mut b = if is_root { mine.clone() } else { vec![T::zeroed(); tr.len] };
    w.bcast(&mut b, tr.root).unwrap();

    let gather = if is_root {
        let mut recv = vec![T::zeroed(); tr.len * n as usize];
        w.gather_root(&mine, &mut recv).unwrap();
        Some(bytes(&recv))
    } else {
        w.gather(&mine, tr.root).unwrap();
        None
    };

    let vmine = contribution::<T>(seed, n, t + 1000, me, tr.vcounts[me as usize]);
    let gatherv = if is_root {
        let mut recv = vec![T::zeroed(); tr.vtotal];
        let counts: Vec<u64> = tr.vcounts.iter().map(|&c| c as u64).collect();
        let displs: Vec<u64> = tr.vdispls.iter().map(|&d| d as u64).collect();
        w.gatherv_root(&vmine, &mut recv, &counts, &displs).unwrap();
        Some(bytes(&recv))
    } else {
        w.gatherv(&vmine, tr.root).unwrap();
        None
    };

    let reduce = if is_root {
        let mut recv = vec![T::zeroed(); tr.len];
        w.reduce_root(&mine, &mut recv, tr.op).unwrap();
        Some(bytes(&recv))
    } else {
        w.reduce(&mine, tr.op, tr.root).unwrap();
        None
    };

    let mut all = vec![T::zeroed(); tr.len];
    w.allreduce(&mine, &mut all, tr.op).unwrap();

    Outputs { bcast: bytes(&b), gather, gatherv, reduce, allreduce: bytes(&all) }
}

fn legacy_op(op: ReductionOp) -> i32 {
    match op {
        ReductionOp::Sum => legacy::SUM,
        ReductionOp::Prod => legacy::PROD,
        ReductionOp::Min => legacy::MIN,
        ReductionOp::Max => legacy::MAX,
    }
}

fn legacy_surface<T: Gen>(u: &Universe, tr: &Trial, seed: u64, t: u64) -> Outputs {
    let (me, n) = (u.rank(), u.size());
    let ok = |rc: i32| assert_eq!(rc, legacy::SUCCESS, "legacy collective failed");
    let w = LEGACY_COMM_WORLD;
    let mine = contribution::<T>(seed, n, t, me, tr.len);
    let is_root = me == tr.root;
    let (len, root) = (tr.len as i32, tr.root as i32);

    let mut b = if is_root { mine.clone() } else { vec![T::zeroed(); tr.len] };
    ok(legacy::legacy_bcast(&mut b, len, T::CODE, root, w));

    let mut recv = vec![T::zeroed(); if is_root { tr.len * n as usize } else { 0 }];
    ok(legacy::legacy_gather(&mine, len, T::CODE, &mut recv, len, T::CODE, root, w));
    let gather = is_root.then(|| bytes(&recv));

    let vmine = contribution::<T>(seed, n, t + 1000, me, tr.vcounts[me as usize]);
    let counts: Vec<i32> = tr.vcounts.iter().map(|&c| c as i32).collect();
    let displs: Vec<i32> = tr.vdispls.iter().map(|&d| d as i32).collect();
    let mut recv = vec![T::zeroed(); if is_root { tr.vtotal } else { 0 }];
    let vlen = vmine.len() as i32;
    ok(legacy::legacy_gatherv(&vmine, vlen, T::CODE, &mut recv, &counts, &displs, T::CODE, root, w));
    let gatherv = is_root.then(|| bytes(&recv));

    let mut recv = vec![T::zeroed(); tr.len];
    ok(legacy::legacy_reduce(&mine, &mut recv, len, T::CODE, legacy_op(tr.op), root, w));
    let reduce = is_root.then(|| bytes(&recv));

    let mut all = vec![T::zeroed(); tr.len];
    ok(legacy::legacy_allreduce(&mine, &mut all, len, T::CODE, legacy_op(tr.op), w));

    Outputs { bcast: bytes(&b), gather, gatherv, reduce, allreduce: bytes(&all) }
}

fn oracle<T: Gen>(seed: u64, n: u32, t: u64, rank: u32) -> Outputs {
    let tr = trial(seed, n, t);
    let all: Vec<Vec<T>> = (0..n).map(|r| contribution::<T>(seed, n, t, r, tr.len)).collect();
    let mut folded = all[0].clone();
    for c in &all[1..] {
        for (a, &b) in folded.iter_mut().zip(c) {
            *a = T::fold(tr.op, *a, b);
        }
    }
    let is_root = rank == tr.root;
    let mut gv = vec![T::zeroed(); tr.vtotal];
    for r in 0..n as usize {
        let c = contribution::<T>(seed, n, t + 1000, r as u32, tr.vcounts[r]);
        gv[tr.vdispls[r]..tr.vdispls[r] + c.len()].copy_from_slice(&c);
    }
    Outputs {
        bcast: bytes(&all[tr.root as usize]),
        gather: is_root.then(|| all.concat()).map(|v| bytes(&v)),
        gatherv: is_root.then(|| bytes(&gv)),
        reduce: is_root.then(|| bytes(&folded)),
        allreduce: bytes(&folded),
    }
}

fn check<T: Gen>(sizes: &[u32], payloads: u64, seed: u64) -> Result<usize, String> {
    let mut compared = 0;
    for &n in sizes {
        let runs = run_in_process(n, |u| {
            (0..payloads)
                .map(|t| {
                    let tr = trial(seed, n, t);
                    (idiomatic::<T>(u, &tr, seed, t), legacy_surface::<T>(u, &tr, seed, t))
                })
                .collect::<Vec<_>>()
        });
        for (rank, per_trial) in runs.iter().enumerate() {
            for (t, (idio, leg)) in per_trial.iter().enumerate() {
                let want = oracle::<T>(seed, n, t as u64, rank as u32);
                let ty = std::any::type_name::<T>();
                if *idio != want {
                    return Err(format!("{ty} N={n} trial {t} rank {rank}: idiomatic {idio:?} != oracle {want:?}"));
                }
                if *leg != *idio {
                    return Err(format!("{ty} N={n} trial {t} rank {rank}: legacy {leg:?} != idiomatic {idio:?}"));
                }
                compared += 1;
            }
        }
    }
    Ok(compared)
}

/// Every collective on every group size, `payloads` trials each, for all four
/// reducible element types. Returns the number of per-rank comparisons.
pub fn brute_force(sizes: &[u32], payloads: u64, seed: u64) -> Result<usize, String> {
    Ok(check::<i32>(sizes, payloads, seed)?
        + check::<i64>(sizes, payloads, seed)?
        + check::<f32>(sizes, payloads, seed)?
        + check::<f64>(sizes, payloads, seed)?)
}

/// A floating-point sum whose value depends on association order, run
/// twice: both runs agree bitwise with the rank-ascending fold.
pub fn fold_determinism(n: u32) -> Result<(), String> {
    let value = |r: u32| if r % 2 == 0 { 1e16 } else { 1.0 + r as f64 };
    let want = (1..n).fold(value(0), |acc, r| acc + value(r));
    let runs: Vec<Vec<u64>> = (0..2)
        .map(|_| {
            run_in_process(n, |u| {
                let mut out = [0f64];
                u.world().allreduce(&[value(u.rank())], &mut out, ReductionOp::Sum).unwrap();
                out[0].to_bits()
            })
        })
        .collect();
    if runs[0] != runs[1] {
        return Err(format!("runs differ: {:?} vs {:?}", runs[0], runs[1]));
    }
    if runs[0].iter().any(|&b| b != want.to_bits()) {
        return Err(format!("sum {:?} is not the rank-ascending fold {want}", runs[0]));
    }
    Ok(())
}
