use std::time::{Duration, Instant};

use lwf_core::verify::random_network_suite;

const TOLERANCE: f64 = 1e-4;
const BUDGET: Duration = Duration::from_secs(60);

#[test]
fn hundred_random_networks_match_finite_differences() {
    let start = Instant::now();
    let report = random_network_suite(100, 2024, TOLERANCE).unwrap();
    let elapsed = start.elapsed();
    assert_eq!(report.checks.len(), 100);
    let worst = report
        .checks
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    assert!(report.passed(), "worst: {worst:?}");
    assert!(report.max_rel_error() < TOLERANCE);
    assert!(elapsed < BUDGET, "took {elapsed:?}");
    // the suite covers conv stems, branched heads and every loss
    for needle in ["conv Some", "branch 1", "Ce", "Kd", "Bce", "L2", "Drift"] {
        assert!(
            report.checks.iter().any(|c| c.description.contains(needle)),
            "{needle} not covered"
        );
    }
}
