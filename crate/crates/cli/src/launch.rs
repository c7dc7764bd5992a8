//! Runs a scenario on `np` ranks, as threads or as worker processes.

use std::fmt;
use std::io;
use std::net::TcpListener;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::str::FromStr;

use mmp_core::transport::{ENV_COORD_ADDR, ENV_RANK, ENV_SIZE};
use mmp_core::{run_in_process, Mode, TcpConfig, Universe};

use crate::scenario::{self, Scenario, Transcript};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaunchMode {
    Threads,
    Tcp,
}

impl FromStr for LaunchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "threads" => Ok(LaunchMode::Threads),
            "tcp" => Ok(LaunchMode::Tcp),
            _ => Err(format!("unknown mode {s:?}; expected threads or tcp")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LaunchPlan {
    pub np: u32,
    pub mode: LaunchMode,
    pub scenario: Scenario,
    pub seed: u64,
    /// Rendezvous address for tcp mode; a free localhost port if unset.
    pub coord: Option<String>,
}

/// The launch itself could not be carried out.
#[derive(Debug)]
pub enum LaunchError {
    Config(String),
    Spawn { rank: u32, source: io::Error },
}

impl fmt::Display for LaunchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LaunchError::Config(msg) => write!(f, "{msg}"),
            LaunchError::Spawn { rank, source } => write!(f, "rank {rank}: could not start worker: {source}"),
        }
    }
}

impl std::error::Error for LaunchError {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankOutcome {
    pub rank: u32,
    pub result: Result<Transcript, String>,
    /// The rank never got as far as running the scenario (bad environment,
    /// failed rendezvous).
    pub setup_failed: bool,
}

pub fn all_passed(outcomes: &[RankOutcome]) -> bool {
    outcomes.iter().all(|o| o.result.is_ok())
}

pub fn any_setup_failed(outcomes: &[RankOutcome]) -> bool {
    outcomes.iter().any(|o| o.setup_failed)
}

/// Exit status of a worker that could not join the launch.
pub const WORKER_SETUP_EXIT: i32 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WorkerError {
    Setup(String),
    Failed(String),
}

impl fmt::Display for WorkerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorkerError::Setup(m) | WorkerError::Failed(m) => f.write_str(m),
        }
    }
}

/// `[rank r] line` for every transcript line, ranks ascending.
pub fn render(outcomes: &[RankOutcome]) -> Vec<String> {
    outcomes
        .iter()
        .flat_map(|o| {
            let lines: &[String] = o.result.as_deref().unwrap_or(&[]);
            lines.iter().map(move |l| format!("[rank {}] {l}", o.rank))
        })
        .collect()
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// Runs the scenario on this rank, turning panics into failures.
pub fn run_rank(u: &Universe, scenario: Scenario, seed: u64) -> Result<Transcript, String> {
    catch_unwind(AssertUnwindSafe(|| scenario::run(u, scenario, seed)))
        .unwrap_or_else(|p| Err(format!("rank {} panicked: {}", u.rank(), panic_message(p))))
}

/// `exe` is the `mmp` binary, started with `worker` once per rank in tcp mode.
pub fn launch(plan: &LaunchPlan, exe: &Path) -> Result<Vec<RankOutcome>, LaunchError> {
    if plan.np == 0 {
        return Err(LaunchError::Config("--np must be at least 1".into()));
    }
    match plan.mode {
        LaunchMode::Threads => Ok(run_in_process(plan.np, |u| RankOutcome {
            rank: u.rank(),
            result: run_rank(u, plan.scenario, plan.seed),
            setup_failed: false,
        })),
        LaunchMode::Tcp => launch_tcp(plan, exe),
    }
}

fn free_local_addr() -> Result<String, LaunchError> {
    let l = TcpListener::bind("127.0.0.1:0").map_err(|e| LaunchError::Config(format!("no free port: {e}")))?;
    let addr = l.local_addr().map_err(|e| LaunchError::Config(e.to_string()))?;
    Ok(addr.to_string())
}

fn launch_tcp(plan: &LaunchPlan, exe: &Path) -> Result<Vec<RankOutcome>, LaunchError> {
    let coord = match &plan.coord {
        Some(a) => a.clone(),
        None => free_local_addr()?,
    };
    let mut children: Vec<(u32, Child)> = Vec::new();
    for rank in 0..plan.np {
        let spawned = Command::new(exe)
            .args(["worker", "--scenario", plan.scenario.name(), "--seed", &plan.seed.to_string()])
            .env(ENV_RANK, rank.to_string())
            .env(ENV_SIZE, plan.np.to_string())
            .env(ENV_COORD_ADDR, &coord)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn();
        match spawned {
            Ok(child) => children.push((rank, child)),
            Err(source) => {
                for (_, mut c) in children {
                    let _ = c.kill();
                    let _ = c.wait();
                }
                return Err(LaunchError::Spawn { rank, source });
            }
        }
    }
    Ok(children
        .into_iter()
        .map(|(rank, child)| {
            let mut setup_failed = false;
            let result = match child.wait_with_output() {
                Err(e) => Err(format!("rank {rank}: could not reap worker: {e}")),
                Ok(out) if out.status.success() => {
                    Ok(String::from_utf8_lossy(&out.stdout).lines().map(str::to_owned).collect())
                }
                Ok(out) => {
                    setup_failed = out.status.code() == Some(WORKER_SETUP_EXIT);
                    let stderr = String::from_utf8_lossy(&out.stderr);
                    let last = stderr.lines().last().unwrap_or("").trim().to_owned();
                    Err(format!("rank {rank}: worker exited with {}: {last}", out.status))
                }
            };
            RankOutcome { rank, result, setup_failed }
        })
        .collect())
}

/// Body of `mmp worker`: one rank of a tcp launch, configured from the
/// environment. Prints the transcript on stdout.
pub fn worker(scenario: Scenario, seed: u64) -> Result<Transcript, WorkerError> {
    let cfg = TcpConfig::from_env().map_err(|e| WorkerError::Setup(e.to_string()))?;
    let rank = cfg.rank;
    let u = Universe::init(Mode::Tcp(cfg)).map_err(|e| WorkerError::Setup(format!("rank {rank}: {e}")))?;
    let transcript = run_rank(&u, scenario, seed).map_err(WorkerError::Failed)?;
    u.finalize().map_err(|e| WorkerError::Failed(format!("rank {rank}: finalize: {e}")))?;
    Ok(transcript)
}
