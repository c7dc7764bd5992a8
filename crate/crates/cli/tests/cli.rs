use std::process::{Command, Output};

use mmp_cli::launch::{self, LaunchMode, LaunchPlan};
use mmp_cli::scenario::Scenario;

const MMP: &str = env!("CARGO_BIN_EXE_mmp");

fn mmp(args: &[&str]) -> Output {
    Command::new(MMP).args(args).output().expect("mmp runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn every_scenario_passes_in_threads_mode() {
    for s in Scenario::ALL {
        for np in [1, 3] {
            let o = mmp(&["run", "--np", &np.to_string(), "--scenario", s.name(), "--seed", "5"]);
            assert_eq!(o.status.code(), Some(0), "{s} np={np}: {}", String::from_utf8_lossy(&o.stderr));
            assert!(stdout(&o).lines().all(|l| l.starts_with("[rank ")));
        }
    }
}

#[test]
fn threads_transcripts_are_deterministic() {
    for s in Scenario::ALL {
        let plan = LaunchPlan { np: 4, mode: LaunchMode::Threads, scenario: s, seed: 11, coord: None };
        let a = launch::render(&launch::launch(&plan, MMP.as_ref()).unwrap());
        let b = launch::render(&launch::launch(&plan, MMP.as_ref()).unwrap());
        assert!(!a.is_empty());
        assert_eq!(a, b, "{s}");
    }
    let seeded = |seed| {
        let plan = LaunchPlan { np: 2, mode: LaunchMode::Threads, scenario: Scenario::Ring, seed, coord: None };
        launch::render(&launch::launch(&plan, MMP.as_ref()).unwrap())
    };
    assert_ne!(seeded(1), seeded(2));
}

#[test]
fn tcp_matches_threads_for_every_scenario() {
    for s in Scenario::ALL {
        let run = |mode| mmp(&["run", "--np", "3", "--mode", mode, "--scenario", s.name(), "--seed", "8"]);
        let (tcp, threads) = (run("tcp"), run("threads"));
        assert_eq!(tcp.status.code(), Some(0), "{s}: {}", String::from_utf8_lossy(&tcp.stderr));
        assert_eq!(stdout(&tcp), stdout(&threads), "{s}");
    }
}

#[test]
fn error_injection_reports_err_type_at_rank_one() {
    let o = mmp(&["run", "--np", "4", "--scenario", "error-injection"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let hits: Vec<&str> = out.lines().filter(|l| l.contains("ERR_TYPE")).collect();
    assert_eq!(hits, ["[rank 1] rank=1 recv from=0 -> ERR_TYPE"]);
}

#[test]
fn configuration_errors_exit_2() {
    for args in [
        &["run", "--np", "2", "--scenario", "nope"][..],
        &["run", "--np", "0", "--scenario", "ring"],
        &["run", "--np", "2", "--mode", "carrier-pigeon", "--scenario", "ring"],
        &["bench", "--np", "3", "--sizes", "8"],
        &["bench", "--np", "2", "--sizes", "8", "--assert-ratio", "-1"],
        &["conformance", "--np", "0"],
        &["frobnicate"],
    ] {
        assert_eq!(mmp(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn unusable_coordinator_is_a_launch_error_with_rank_attribution() {
    // TEST-NET-3: never a local address, so rank 0 cannot listen on it.
    let o = mmp(&["run", "--np", "2", "--mode", "tcp", "--scenario", "ring", "--coord", "203.0.113.1:9"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("[rank 0] FAILED"), "{err}");
}

#[test]
fn worker_without_environment_exits_2() {
    let o = Command::new(MMP)
        .args(["worker", "--scenario", "ring"])
        .env_remove("MMP_RANK")
        .env_remove("MMP_SIZE")
        .env_remove("MMP_COORD_ADDR")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn conformance_covers_the_manifest() {
    let o = mmp(&["conformance", "--np", "3", "--seed", "4"]);
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{out}");
    let total = mmp_cli::conformance::MANIFEST.len();
    assert!(out.contains(&format!("coverage {total}/{total} invariants")), "{out}");
    assert!(!out.contains("FAIL"));
    assert!(out.contains("ERR_TYPE at rank 1"));
}

#[test]
fn bench_prints_header_and_records() {
    let o = mmp(&["bench", "--np", "2", "--sizes", "0,64"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], mmp_cli::bench::HEADER);
    assert_eq!(lines.len(), 5);
    for l in &lines[1..] {
        assert_eq!(l.split(',').count(), 6, "{l}");
        assert!(l.starts_with("idiomatic,pingpong,") || l.starts_with("legacy,pingpong,"));
    }
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.lines().filter(|l| l.starts_with("ratio size_bytes=")).count(), 2);
}

#[test]
fn slowed_legacy_surface_trips_the_ratio_assertion() {
    let o = mmp(&["bench", "--np", "2", "--sizes", "8", "--assert-ratio", "1.5", "--legacy-slowdown", "10"]);
    assert_eq!(o.status.code(), Some(1));
    // Without an assertion the same run only reports.
    let o = mmp(&["bench", "--np", "2", "--sizes", "8", "--legacy-slowdown", "10"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn golden_table_has_every_code_once() {
    let g = mmp_cli::golden_codes();
    assert_eq!(g.len(), 10);
    let codes: Vec<i32> = g.iter().map(|(_, c)| *c).collect();
    assert_eq!(codes, (0..10).collect::<Vec<_>>());
}
