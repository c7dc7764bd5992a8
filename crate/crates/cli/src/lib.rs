//! Launcher, conformance runner and benchmark for `mmp`.

pub mod bench;
pub mod conformance;
pub mod launch;
pub mod scenario;
pub mod suites;

const GOLDEN_CODES: &str = include_str!("../../core/tests/golden/error_codes.txt");

/// The published `(name, code)` table the shim must reproduce.
pub fn golden_codes() -> Vec<(String, i32)> {
    GOLDEN_CODES
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| {
            let mut parts = l.split_whitespace();
            Some((parts.next()?.to_owned(), parts.next()?.parse().ok()?))
        })
        .collect()
}
