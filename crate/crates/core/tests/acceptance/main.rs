//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero when
//! any criterion fails.

mod anomalies;
mod atomicity;
mod completeness;
mod determinism;
mod end_to_end;
mod ordering;
mod round_trip;
mod support;

use std::panic;
use std::process::ExitCode;
use std::time::Instant;

use support::Verdict;

type Criterion = (u8, &'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        (1, "end-to-end micro-V", end_to_end::check),
        (2, "completeness oracle equivalence", completeness::check),
        (3, "determinism", determinism::check),
        (4, "package monotonicity", determinism::check_monotonicity),
        (5, "workflow ordering", ordering::check),
        (6, "anomaly detection", anomalies::check),
        (7, "parser round-trip", round_trip::check),
        (8, "ingest atomicity", atomicity::check),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        let start = Instant::now();
        let verdict = panic::catch_unwind(run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Verdict::fail(format!("panic: {msg}"))
        });
        if !verdict.passed {
            failed += 1;
        }
        println!(
            "{} criterion {n} ({name}): {} [{:.2}s]",
            if verdict.passed { "PASS" } else { "FAIL" },
            verdict.detail,
            start.elapsed().as_secs_f64()
        );
        for note in &verdict.failures {
            println!("    {note}");
        }
    }
    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
