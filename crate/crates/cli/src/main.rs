use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmp_cli::bench::{self, BenchPlan};
use mmp_cli::conformance::{self, ConformancePlan, Scale};
use mmp_cli::launch::{self, LaunchMode, LaunchPlan, WorkerError};
use mmp_cli::scenario::Scenario;

const PASS: u8 = 0;
const FAIL: u8 = 1;
const CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "mmp", version, about = "Launcher, conformance runner and benchmark for mmp")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a built-in scenario on N ranks.
    Run {
        #[arg(long)]
        np: u32,
        #[arg(long, default_value = "threads")]
        mode: LaunchMode,
        #[arg(long)]
        scenario: Scenario,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Rendezvous address for tcp mode (default: a free localhost port).
        #[arg(long)]
        coord: Option<String>,
    },
    /// Execute every module invariant and check manifest coverage.
    Conformance {
        #[arg(long, default_value_t = 4)]
        np: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Ping-pong latency through both surfaces, as CSV on stdout.
    Bench {
        #[arg(long, default_value_t = 2)]
        np: u32,
        #[arg(long, value_delimiter = ',', default_value = "0,8,4096")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        /// Fail if legacy/idiomatic median ratio exceeds R at any size.
        #[arg(long)]
        assert_ratio: Option<f64>,
        #[arg(long, hide = true, default_value_t = 0)]
        legacy_slowdown: u32,
    },
    /// One rank of a tcp launch, configured from the environment.
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        scenario: Scenario,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    ExitCode::from(match cli.command {
        Command::Run { np, mode, scenario, seed, coord } => run(LaunchPlan { np, mode, scenario, seed, coord }),
        Command::Conformance { np, seed } => run_conformance(np, seed),
        Command::Bench { np, sizes, iters, assert_ratio, legacy_slowdown } => {
            run_bench(np, sizes, iters, assert_ratio, legacy_slowdown)
        }
        Command::Worker { scenario, seed } => match launch::worker(scenario, seed) {
            Ok(lines) => {
                for l in lines {
                    println!("{l}");
                }
                PASS
            }
            Err(e @ WorkerError::Setup(_)) => {
                eprintln!("{e}");
                launch::WORKER_SETUP_EXIT as u8
            }
            Err(e) => {
                eprintln!("{e}");
                FAIL
            }
        },
    })
}

fn current_exe() -> Option<PathBuf> {
    std::env::current_exe().ok()
}

fn run(plan: LaunchPlan) -> u8 {
    let Some(exe) = current_exe() else {
        eprintln!("mmp: cannot locate own executable");
        return CONFIG;
    };
    let outcomes = match launch::launch(&plan, &exe) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("mmp: {e}");
            return CONFIG;
        }
    };
    for line in launch::render(&outcomes) {
        println!("{line}");
    }
    for o in &outcomes {
        if let Err(e) = &o.result {
            eprintln!("[rank {}] FAILED: {e}", o.rank);
        }
    }
    if launch::any_setup_failed(&outcomes) {
        CONFIG
    } else if launch::all_passed(&outcomes) {
        PASS
    } else {
        FAIL
    }
}

fn run_conformance(np: u32, seed: u64) -> u8 {
    if np == 0 {
        eprintln!("mmp: --np must be at least 1");
        return CONFIG;
    }
    let plan = ConformancePlan { np, seed, scale: Scale::quick(), exe: current_exe() };
    let report = conformance::run(&plan);
    for line in report.lines() {
        println!("{line}");
    }
    if report.passed() {
        PASS
    } else {
        FAIL
    }
}

fn run_bench(np: u32, sizes: Vec<usize>, iters: usize, assert_ratio: Option<f64>, legacy_slowdown: u32) -> u8 {
    if np != 2 {
        eprintln!("mmp: bench runs a two-rank ping-pong; --np must be 2");
        return CONFIG;
    }
    if sizes.is_empty() || iters < 1000 {
        eprintln!("mmp: bench needs at least one size and --iters >= 1000");
        return CONFIG;
    }
    if assert_ratio.is_some_and(|r| !(r.is_finite() && r > 0.0)) {
        eprintln!("mmp: --assert-ratio must be a positive number");
        return CONFIG;
    }
    let plan = BenchPlan { sizes, iters, warmup: iters / 10, legacy_slowdown };
    let records = bench::run(&plan);
    println!("{}", bench::HEADER);
    for r in &records {
        println!("{}", r.csv());
    }
    let mut code = PASS;
    for (size, ratio) in bench::ratios(&records) {
        eprintln!("ratio size_bytes={size} legacy/idiomatic={ratio:.3}");
        if let Some(limit) = assert_ratio {
            if !(ratio <= limit) {
                eprintln!("mmp: ratio {ratio:.3} at {size} bytes exceeds {limit}");
                code = FAIL;
            }
        }
    }
    code
}
