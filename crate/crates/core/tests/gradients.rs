use std::time::Instant;

use milseg::verify::{run_all, SuiteOptions, TOLERANCE};

#[test]
fn every_suite_passes_finite_differences() {
    let start = Instant::now();
    let results = run_all(&SuiteOptions::default()).unwrap();
    for r in &results {
        println!(
            "{:<20} instances {:>4} checked {:>5} skipped {:>4} max rel err {:.3e}",
            r.name, r.instances, r.report.checked, r.report.skipped, r.report.max_relative_error
        );
    }
    for r in &results {
        assert!(r.instances >= 100);
        assert!(r.passed(TOLERANCE), "{}: {:?}", r.name, r.report);
    }
    println!("elapsed {:?}", start.elapsed());
}

#[test]
fn layer_suites_meet_the_tighter_bound() {
    let results = run_all(&SuiteOptions { seed: 3, ..Default::default() }).unwrap();
    for r in results.iter().filter(|r| !r.name.starts_with("network")) {
        assert!(r.passed(1e-6), "{}: {:?}", r.name, r.report);
    }
}
