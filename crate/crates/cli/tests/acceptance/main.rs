//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --release --test acceptance -- 4 6`.

mod exact;
mod pipeline;
mod physics;

use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;

/// Result of one criterion before its runtime budget is applied.
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }

    /// Passes only if every named check passed; the detail lists them.
    pub fn from_checks(checks: &[(String, bool)]) -> Self {
        let detail = checks
            .iter()
            .map(|(name, ok)| format!("{name}: {}", if *ok { "ok" } else { "FAILED" }))
            .collect::<Vec<_>>()
            .join("; ");
        Self::new(checks.iter().all(|(_, ok)| *ok), detail)
    }
}

/// State carried between the training criteria.
#[derive(Default)]
pub struct Shared {
    pub c7_seconds: Option<f64>,
    pub training: Option<pipeline::Training>,
}

type Check = fn(&mut Shared) -> Result<Outcome>;

struct Criterion {
    id: u32,
    name: &'static str,
    run: Check,
}

const CRITERIA: [Criterion; 10] = [
    Criterion { id: 1, name: "autodiff gradient checks", run: exact::autodiff },
    Criterion { id: 2, name: "geometry exactness", run: exact::geometry },
    Criterion { id: 3, name: "variance and soft-argmax oracles", run: exact::regression },
    Criterion { id: 4, name: "oracle plane sweep", run: physics::oracle_sweep },
    Criterion { id: 5, name: "light aggregation invariances", run: physics::lafm },
    Criterion { id: 6, name: "renderer physics", run: physics::renderer },
    Criterion { id: 7, name: "end-to-end toy training", run: pipeline::toy_training },
    Criterion { id: 8, name: "multi-light benefit", run: pipeline::multi_light },
    Criterion { id: 9, name: "metric oracles", run: exact::metrics },
    Criterion { id: 10, name: "reproducibility", run: pipeline::reproducibility },
];

/// Seconds allowed for a criterion given what has run so far.
fn budget(id: u32, shared: &Shared, elapsed: &[(u32, f64)]) -> f64 {
    let c7 = shared.c7_seconds.unwrap_or(pipeline::C7_BUDGET);
    match id {
        1 => 60.0,
        2 | 3 => 5.0,
        4 => 60.0,
        5 | 9 => 30.0,
        6 => 120.0,
        7 => pipeline::C7_BUDGET,
        // Combined with criterion 7.
        8 => 3600.0 - elapsed.iter().find(|(i, _)| *i == 7).map_or(0.0, |e| e.1),
        // Each of the two runs against the criterion 7 time.
        10 => 2.0 * 2.0 * c7,
        _ => unreachable!(),
    }
}

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut shared = Shared::default();
    let mut elapsed = Vec::new();
    let mut failures = 0;
    for c in CRITERIA.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let outcome = (c.run)(&mut shared).unwrap_or_else(|e| Outcome::new(false, format!("error: {e:#}")));
        let secs = start.elapsed().as_secs_f64();
        if c.id == 7 {
            shared.c7_seconds = Some(secs);
        }
        elapsed.push((c.id, secs));
        let limit = budget(c.id, &shared, &elapsed);
        let in_time = secs <= limit;
        let passed = outcome.passed && in_time;
        failures += !passed as usize;
        println!(
            "criterion {:>2} {:<34} {} ({secs:.1} s / {limit:.0} s{}) {}",
            c.id,
            c.name,
            if passed { "PASS" } else { "FAIL" },
            if in_time { "" } else { ", over budget" },
            outcome.detail
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criterion(s) failed");
        ExitCode::FAILURE
    }
}
