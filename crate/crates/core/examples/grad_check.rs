//! Finite-difference gradient checks for every layer and the end-to-end
//! models, at f64.
//!
//!   cargo run --release --example grad_check -- [n_seeds] [case-prefix]

use msstyle::gradsuite::{run_suite, CASES};

fn main() -> msstyle::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map(|s| s.parse().expect("n_seeds")).unwrap_or(5);
    let prefix = args.next().unwrap_or_default();
    let cases: Vec<&str> = CASES.iter().copied().filter(|c| c.starts_with(&prefix)).collect();

    let report = run_suite(&cases, seeds, None)?;
    for r in &report.results {
        println!(
            "{:<28} seed {}  max rel err {:.2e}  {}",
            r.case,
            r.seed,
            r.max_rel_err,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    println!(
        "{} checks, {} failed, {:.1} s (threshold {:.0e})",
        report.results.len(),
        report.failures().len(),
        report.millis as f64 / 1000.0,
        report.threshold
    );
    Ok(())
}
