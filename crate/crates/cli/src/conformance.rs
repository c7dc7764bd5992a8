//! `mmp conformance`: runs every module invariant at reduced scale and checks
//! the run against the invariant manifest.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use mmp_core::frame::{decode_header, encode_header};
use mmp_core::{
    datatype_of, ContextId, DatatypeKind, Element, EnvelopeHeader, ErrorClass, Group, MessageEnvelope, MpError,
};

use crate::bench::{self, BenchPlan, Surface};
use crate::launch::{self, LaunchMode, LaunchPlan};
use crate::scenario::Scenario;
use crate::suites::{api, collectives, matching, shim, shim_oracle, wire};

/// Every invariant of every module, by id.
pub const MANIFEST: [&str; 43] = [
    "rc.rank-range",
    "rc.tag-range",
    "rc.context-unique",
    "rc.context-isolation",
    "rc.dtype-extent",
    "rc.envelope-length",
    "rc.count-range",
    "rc.non-overtaking",
    "rc.single-residence",
    "rc.count-fidelity",
    "rc.conservation",
    "api.world-lifetime",
    "api.release-once",
    "api.no-use-after-release",
    "api.group-distinct",
    "api.request-transitions",
    "api.wait-idempotent",
    "api.status-capacity",
    "api.error-not-success",
    "api.failed-request-nonblocking",
    "api.structured-errors",
    "api.dup-preserves",
    "api.scope-hygiene",
    "api.single-completion",
    "api.count-generic",
    "shim.code-bijection",
    "shim.handle-resolves",
    "shim.handle-monotonic",
    "shim.no-escape",
    "shim.oracle-equivalence",
    "shim.doubling",
    "shim.handle-safety",
    "coll.fold-order",
    "coll.brute-force",
    "coll.surface-equivalence",
    "coll.determinism",
    "harness.launch-modes",
    "harness.bench-report",
    "harness.determinism",
    "harness.coverage",
    "harness.error-injection",
    "shim.legacy-wait-consumes",
    "coll.reserved-tags",
];

#[derive(Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub covers: &'static [&'static str],
    pub outcome: Result<String, String>,
    pub elapsed: Duration,
}

#[derive(Debug)]
pub struct Report {
    pub checks: Vec<CheckResult>,
    /// Manifest ids no executed check covered.
    pub uncovered: Vec<&'static str>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.uncovered.is_empty() && self.checks.iter().all(|c| c.outcome.is_ok())
    }

    pub fn lines(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .checks
            .iter()
            .map(|c| {
                let (verdict, detail) = match &c.outcome {
                    Ok(d) => ("PASS", d),
                    Err(d) => ("FAIL", d),
                };
                format!("{verdict} {} [{}] ({:.2?}) {detail}", c.name, c.covers.join(","), c.elapsed)
            })
            .collect();
        let covered = MANIFEST.len() - self.uncovered.len();
        out.push(format!("coverage {covered}/{} invariants", MANIFEST.len()));
        for id in &self.uncovered {
            out.push(format!("uncovered {id}"));
        }
        out
    }
}

/// How hard each check works.
#[derive(Debug, Clone)]
pub struct Scale {
    pub schedules: u64,
    pub shim_trials: u64,
    pub doubling_samples: usize,
    pub lifecycle_cycles: usize,
    pub completion_trials: usize,
    pub collective_payloads: u64,
}

impl Scale {
    pub fn quick() -> Self {
        Scale {
            schedules: 1000,
            shim_trials: 60,
            doubling_samples: 60,
            lifecycle_cycles: 400,
            completion_trials: 200,
            collective_payloads: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConformancePlan {
    pub np: u32,
    pub seed: u64,
    pub scale: Scale,
    /// The `mmp` binary, for the tcp launch check. Skipped (and left
    /// uncovered) when absent.
    pub exe: Option<std::path::PathBuf>,
}

fn guarded(f: impl FnOnce() -> Result<String, String>) -> Result<String, String> {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| p.downcast_ref::<String>().cloned())
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn extent_of<T: Element>(kind: DatatypeKind, want: usize) -> Result<(), String> {
    let d = datatype_of::<T>();
    if d.kind != kind || d.extent != want || kind.extent() != want {
        return Err(format!("{kind:?}: extent {} (want {want})", d.extent));
    }
    Ok(())
}

/// Datatype extents, envelope length consistency, the 64-bit count range,
/// distinct group members and non-success errors.
fn type_invariants() -> Result<String, String> {
    extent_of::<u8>(DatatypeKind::Byte, 1)?;
    extent_of::<i32>(DatatypeKind::Int32, 4)?;
    extent_of::<i64>(DatatypeKind::Int64, 8)?;
    extent_of::<f32>(DatatypeKind::Float32, 4)?;
    extent_of::<f64>(DatatypeKind::Float64, 8)?;
    let header = |dtype, count| EnvelopeHeader { context: ContextId(1), source: 0, dest: 0, tag: 0, dtype, count };
    if MessageEnvelope::new(header(DatatypeKind::Int32, 2), vec![0; 8]).is_err()
        || MessageEnvelope::new(header(DatatypeKind::Int32, 2), vec![0; 7]).is_ok()
        || MessageEnvelope::new(header(DatatypeKind::Float64, 1), vec![0; 4]).is_ok()
    {
        return Err("envelope payload length is not tied to count times extent".into());
    }
    let max = header(DatatypeKind::Byte, (1 << 63) - 1);
    let back = encode_header(&max, 0).and_then(|b| decode_header(&b)).map_err(|e| e.to_string())?.0;
    if back != max {
        return Err(format!("count 2^63-1 decoded as {}", back.count));
    }
    if Group::new(vec![0, 1, 0]).is_ok() || Group::new(vec![2, 0, 1]).map(|g| g.rank_of(2)) != Ok(Some(0)) {
        return Err("group membership rules violated".into());
    }
    if MpError::new(ErrorClass::Success, "x").class == ErrorClass::Success {
        return Err("an error value carried SUCCESS".into());
    }
    Ok("extents, envelopes, counts, groups, error classes".into())
}

fn transcripts(np: u32, scenario: Scenario, seed: u64) -> Result<Vec<String>, String> {
    let plan = LaunchPlan { np, mode: LaunchMode::Threads, scenario, seed, coord: None };
    let outcomes = launch::launch(&plan, Path::new("")).map_err(|e| e.to_string())?;
    if let Some(bad) = outcomes.iter().find(|o| o.result.is_err()) {
        return Err(format!("{scenario}: {:?}", bad.result));
    }
    Ok(launch::render(&outcomes))
}

fn harness_determinism(np: u32, seed: u64) -> Result<String, String> {
    for scenario in Scenario::ALL {
        let a = transcripts(np, scenario, seed)?;
        let b = transcripts(np, scenario, seed)?;
        if a != b {
            return Err(format!("{scenario} produced different transcripts for seed {seed}"));
        }
    }
    Ok(format!("{} scenarios twice at np={np}", Scenario::ALL.len()))
}

/// The error-injection scenario must report ERR_TYPE on the rank after 0.
fn error_injection(np: u32, seed: u64) -> Result<String, String> {
    let lines = transcripts(np, Scenario::ErrorInjection, seed)?;
    let victim = 1 % np;
    let want = format!("[rank {victim}] rank={victim} recv from=0 -> ERR_TYPE");
    if !lines.contains(&want) {
        return Err(format!("missing {want:?} in {lines:?}"));
    }
    let elsewhere = lines.iter().filter(|l| l.contains("ERR_TYPE")).count();
    if elsewhere != 1 {
        return Err(format!("ERR_TYPE reported {elsewhere} times"));
    }
    Ok(format!("ERR_TYPE at rank {victim}"))
}

fn launch_modes(np: u32, seed: u64, exe: &Path) -> Result<String, String> {
    let threads = transcripts(np, Scenario::Ring, seed)?;
    let plan = LaunchPlan { np, mode: LaunchMode::Tcp, scenario: Scenario::Ring, seed, coord: None };
    let outcomes = launch::launch(&plan, exe).map_err(|e| e.to_string())?;
    if let Some(bad) = outcomes.iter().find(|o| o.result.is_err()) {
        return Err(format!("tcp ring: {:?}", bad.result));
    }
    if launch::render(&outcomes) != threads {
        return Err("tcp and threads ring transcripts differ".into());
    }
    Ok(format!("ring at np={np} over {np} processes matches threads"))
}

fn bench_report() -> Result<String, String> {
    let plan = BenchPlan { sizes: vec![8], iters: 1000, warmup: 100, legacy_slowdown: 0 };
    let records = bench::run(&plan);
    for surface in [Surface::Idiomatic, Surface::Legacy] {
        let r = records.iter().find(|r| r.surface == surface).ok_or(format!("no {} record", surface.name()))?;
        if r.iters < 1000 || r.median_ns == 0 || r.p99_ns < r.median_ns {
            return Err(format!("bad record {}", r.csv()));
        }
    }
    let ratios = bench::ratios(&records);
    match ratios.as_slice() {
        [(8, q)] if q.is_finite() && *q > 0.0 => Ok(format!("legacy/idiomatic at 8 bytes: {q:.3}")),
        other => Err(format!("ratios {other:?}")),
    }
}

/// Legacy wait consumes the handle; the idiomatic wait stays idempotent.
fn legacy_wait_consumes() -> Result<String, String> {
    use mmp_core::legacy::*;
    let out = mmp_core::run_in_process(1, |u| -> Result<(), String> {
        let mut h = LegacyHandle::NULL;
        if legacy_isend(&[1i32], 1, INT32, 0, 0, LEGACY_COMM_WORLD, &mut h) != SUCCESS {
            return Err("isend failed".into());
        }
        let copy = h;
        let mut st = LegacyStatus::default();
        if legacy_wait(&mut h, &mut st) != SUCCESS || !h.is_null() {
            return Err("legacy wait did not free its handle".into());
        }
        if legacy_wait(&mut copy.clone(), &mut st) != ERR_REQUEST {
            return Err("a consumed handle was waited on twice".into());
        }
        let mut buf = [0i32];
        let mut r = u.world().irecv(&mut buf, 0, 0).map_err(|e| e.to_string())?;
        let first = r.wait().map_err(|e| e.to_string())?;
        if r.wait().map_err(|e| e.to_string())? != first {
            return Err("idiomatic wait is not idempotent".into());
        }
        Ok(())
    });
    out.into_iter().next().expect("one rank").map(|_| "legacy consumes, idiomatic idempotent".into())
}

/// Point-to-point traffic on every tag, including the top one, does not
/// disturb collectives running on the same context.
fn reserved_tags(np: u32) -> Result<String, String> {
    let out = mmp_core::run_in_process(np, |u| -> Result<(), String> {
        let w = u.world();
        let (me, n) = (u.rank(), u.size());
        for tag in [0, 1, mmp_core::TAG_UB] {
            w.send(&[me as i64], (me + 1) % n, tag).map_err(|e| e.to_string())?;
        }
        let mut sum = [0i64];
        w.allreduce(&[1i64], &mut sum, mmp_core::ReductionOp::Sum).map_err(|e| e.to_string())?;
        w.barrier().map_err(|e| e.to_string())?;
        let mut b = [me as i64];
        w.bcast(&mut b, 0).map_err(|e| e.to_string())?;
        for tag in [0, 1, mmp_core::TAG_UB] {
            let mut m = [0i64];
            w.recv(&mut m, mmp_core::ANY_SOURCE, tag).map_err(|e| e.to_string())?;
            if m[0] as u32 != (me + n - 1) % n {
                return Err(format!("tag {tag} carried {}", m[0]));
            }
        }
        if sum[0] != n as i64 || b[0] != 0 {
            return Err(format!("collectives saw {sum:?} {b:?}"));
        }
        Ok(())
    });
    out.into_iter().collect::<Result<Vec<()>, String>>().map(|_| format!("np={np}"))
}

type Check<'a> = (&'static str, &'static [&'static str], Box<dyn FnOnce() -> Result<String, String> + 'a>);

pub fn run(plan: &ConformancePlan) -> Report {
    let (np, seed, s) = (plan.np.max(1), plan.seed, &plan.scale);
    let np2 = np.max(2);
    let mut checks: Vec<Check> = vec![
        ("types", &["rc.dtype-extent", "rc.envelope-length", "rc.count-range", "api.group-distinct", "api.error-not-success"], Box::new(type_invariants)),
        (
            "matching-reference",
            &["rc.non-overtaking", "rc.context-isolation", "rc.single-residence", "rc.conservation"],
            Box::new(|| matching::reference_equivalence(s.schedules, seed).map(|st| format!("{st:?}"))),
        ),
        (
            "matching-live",
            &["rc.non-overtaking", "rc.context-isolation", "rc.conservation"],
            Box::new(|| matching::live_ordering(np, seed).map(|_| format!("np={np}"))),
        ),
        ("count-fidelity", &["rc.count-fidelity"], Box::new(|| wire::count_fidelity().map(|_| format!("{:?}", wire::FIDELITY_COUNTS)))),
        (
            "structured-errors",
            &["api.structured-errors", "api.failed-request-nonblocking", "rc.rank-range", "rc.tag-range"],
            Box::new(|| api::structured_errors().map(|n| format!("{n} checks"))),
        ),
        ("dup-preserves", &["api.dup-preserves", "rc.context-unique"], Box::new(|| api::dup_preserves(np).map(|_| format!("np={np}")))),
        (
            "scope-hygiene",
            &["api.scope-hygiene", "api.release-once"],
            Box::new(|| api::scope_hygiene(np, s.lifecycle_cycles, seed).map(|n| format!("{n} communicators"))),
        ),
        (
            "use-after-release",
            &["api.no-use-after-release", "api.world-lifetime"],
            Box::new(|| api::use_after_release().map(|_| "every operation fails with ERR_COMM".into())),
        ),
        (
            "single-completion",
            &["api.single-completion", "api.request-transitions", "api.wait-idempotent", "api.status-capacity"],
            Box::new(|| api::single_completion(s.completion_trials, seed).map(|n| format!("{n} observations"))),
        ),
        ("count-generic", &["api.count-generic"], Box::new(|| api::count_generic().map(|_| "2^31+7 bytes framed exactly".into()))),
        (
            "containment",
            &["shim.no-escape", "shim.code-bijection"],
            Box::new(|| {
                shim::containment(&crate::golden_codes())
                    .map(|c| format!("{} procedures, {} calls, {} escapes", c.procedures, c.calls, c.escapes))
                    .and_then(|d| if d.ends_with(" 0 escapes") { Ok(d) } else { Err(d) })
            }),
        ),
        (
            "shim-oracle",
            &["shim.oracle-equivalence"],
            Box::new(|| {
                let mut vectors = 0;
                for op in shim_oracle::OPS {
                    vectors += shim_oracle::run(op, s.shim_trials, seed).map_err(|e| format!("{op}: {e}"))?.vectors;
                }
                Ok(format!("{} procedures, {vectors} vectors", shim_oracle::OPS.len()))
            }),
        ),
        ("doubling", &["shim.doubling"], Box::new(|| wire::doubling(s.doubling_samples, seed).map(|n| format!("{n} counts")))),
        (
            "handle-safety",
            &["shim.handle-safety", "shim.handle-monotonic"],
            Box::new(|| shim::handle_safety().map(|n| format!("{n} probes"))),
        ),
        ("interop", &["shim.handle-resolves"], Box::new(|| shim::interop(np2).map(|n| format!("{n} messages at np={np2}")))),
        ("legacy-wait", &["shim.legacy-wait-consumes"], Box::new(legacy_wait_consumes)),
        (
            "collectives-brute-force",
            &["coll.brute-force", "coll.surface-equivalence", "coll.fold-order"],
            Box::new(|| {
                let sizes: BTreeSet<u32> = [1, 2, 3, np].into_iter().collect();
                let sizes: Vec<u32> = sizes.into_iter().collect();
                collectives::brute_force(&sizes, s.collective_payloads, seed).map(|n| format!("N={sizes:?}, {n} comparisons"))
            }),
        ),
        ("fold-determinism", &["coll.determinism"], Box::new(|| collectives::fold_determinism(np.max(3)).map(|_| "bitwise equal".into()))),
        ("reserved-tags", &["coll.reserved-tags"], Box::new(|| reserved_tags(np))),
        ("scenario-determinism", &["harness.determinism"], Box::new(|| harness_determinism(np, seed))),
        ("error-injection", &["harness.error-injection"], Box::new(|| error_injection(np, seed))),
        ("bench-report", &["harness.bench-report"], Box::new(bench_report)),
    ];
    if let Some(exe) = &plan.exe {
        checks.push(("launch-modes", &["harness.launch-modes"], Box::new(move || launch_modes(np, seed, exe))));
    }

    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut results = Vec::new();
    for (name, covers, f) in checks {
        log::info!("conformance: {name}");
        let t = Instant::now();
        let outcome = guarded(f);
        results.push(CheckResult { name, covers, outcome, elapsed: t.elapsed() });
    }
    std::panic::set_hook(hook);

    let mut covered: BTreeSet<&str> = results.iter().flat_map(|c| c.covers.iter().copied()).collect();
    let unknown: Vec<&str> = covered.iter().copied().filter(|id| !MANIFEST.contains(id)).collect();
    let t = Instant::now();
    let outcome = if unknown.is_empty() {
        covered.insert("harness.coverage");
        Ok(format!("{} checks cover the manifest", results.len()))
    } else {
        Err(format!("checks name ids outside the manifest: {unknown:?}"))
    };
    results.push(CheckResult { name: "coverage", covers: &["harness.coverage"], outcome, elapsed: t.elapsed() });
    let uncovered = MANIFEST.iter().copied().filter(|id| !covered.contains(id)).collect();
    Report { checks: results, uncovered }
}
