//! Ping-pong latency through each API surface.

use std::time::Instant;

use mmp_core::legacy::{self, LegacyStatus, LEGACY_COMM_WORLD};
use mmp_core::{run_in_process, Universe};

pub const HEADER: &str = "surface,op,size_bytes,iters,median_ns,p99_ns";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Idiomatic,
    Legacy,
}

impl Surface {
    pub fn name(self) -> &'static str {
        match self {
            Surface::Idiomatic => "idiomatic",
            Surface::Legacy => "legacy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub surface: Surface,
    pub op: &'static str,
    pub size_bytes: usize,
    pub iters: usize,
    pub median_ns: u64,
    pub p99_ns: u64,
}

impl BenchRecord {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.surface.name(),
            self.op,
            self.size_bytes,
            self.iters,
            self.median_ns,
            self.p99_ns
        )
    }
}

#[derive(Debug, Clone)]
pub struct BenchPlan {
    pub sizes: Vec<usize>,
    pub iters: usize,
    pub warmup: usize,
    /// Legacy procedures take this many times as long; 0 or 1 is off.
    pub legacy_slowdown: u32,
}

impl Default for BenchPlan {
    fn default() -> Self {
        BenchPlan { sizes: vec![0, 8, 4096], iters: 1000, warmup: 100, legacy_slowdown: 0 }
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[u64], p: f64) -> u64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn median(sorted: &[u64]) -> u64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2
    }
}

/// One round trip between ranks 0 and 1.
fn round_trip(u: &Universe, surface: Surface, buf: &mut [u8]) {
    let n = buf.len() as i32;
    let peer = 1 - u.rank();
    let w = u.world();
    let mut st = LegacyStatus::default();
    let ping = |buf: &mut [u8]| match surface {
        Surface::Idiomatic => w.send(buf, peer, 0).unwrap(),
        Surface::Legacy => {
            assert_eq!(legacy::legacy_send(buf, n, legacy::BYTE, peer as i32, 0, LEGACY_COMM_WORLD), legacy::SUCCESS)
        }
    };
    let mut pong = |buf: &mut [u8]| match surface {
        Surface::Idiomatic => {
            w.recv(buf, peer, 0).unwrap();
        }
        Surface::Legacy => {
            let rc = legacy::legacy_recv(buf, n, legacy::BYTE, peer as i32, 0, LEGACY_COMM_WORLD, &mut st);
            assert_eq!(rc, legacy::SUCCESS);
        }
    };
    if u.rank() == 0 {
        ping(buf);
        pong(buf);
    } else {
        pong(buf);
        ping(buf);
    }
}

/// Runs the ping-pong on two in-process ranks. Samples are per round trip,
/// taken after `warmup` untimed round trips.
pub fn run(plan: &BenchPlan) -> Vec<BenchRecord> {
    let mut per_rank = run_in_process(2, |u| {
        u.faults().set_legacy_slowdown(plan.legacy_slowdown);
        let mut records = Vec::new();
        for &size in &plan.sizes {
            for surface in [Surface::Idiomatic, Surface::Legacy] {
                let mut buf = vec![0u8; size];
                for _ in 0..plan.warmup {
                    round_trip(u, surface, &mut buf);
                }
                u.world().barrier().unwrap();
                let mut samples: Vec<u64> = (0..plan.iters)
                    .map(|_| {
                        let t = Instant::now();
                        round_trip(u, surface, &mut buf);
                        t.elapsed().as_nanos().max(1) as u64
                    })
                    .collect();
                samples.sort_unstable();
                records.push(BenchRecord {
                    surface,
                    op: "pingpong",
                    size_bytes: size,
                    iters: plan.iters,
                    median_ns: median(&samples),
                    p99_ns: percentile(&samples, 99.0),
                });
            }
        }
        records
    });
    per_rank.swap_remove(0)
}

/// Legacy median over idiomatic median, per size.
pub fn ratios(records: &[BenchRecord]) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.surface == Surface::Idiomatic) {
        if let Some(l) = records.iter().find(|l| l.surface == Surface::Legacy && l.size_bytes == r.size_bytes && l.op == r.op) {
            out.push((r.size_bytes, l.median_ns as f64 / r.median_ns as f64));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_by_nearest_rank() {
        let xs: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&xs, 99.0), 99);
        assert_eq!(percentile(&xs, 100.0), 100);
        assert_eq!(percentile(&[7], 99.0), 7);
        assert_eq!(median(&xs), 50);
        assert_eq!(median(&[1, 2, 9]), 2);
    }
}
