//! Acceptance suite: prints one PASS/FAIL line per criterion.
//!
//! Criteria in `KNOWN_FAILING` are expected to fail; the analysis of each lives
//! in the decisions ledger. The test fails on any other failure and on any known
//! failure that starts passing.

use std::io::Write;

use quasirect::acceptance::run_suite;

/// 4: the diagonal cutoff of the brute-force integral removes O(1) mass at eps = 1/20.
/// 6: |U(T, 1)| grows along the ladder at T = 1.25.
const KNOWN_FAILING: &[u32] = &[4, 6];

#[test]
fn acceptance() {
    let reports = run_suite(true).expect("suite runs");
    // Written to the raw handle so the lines survive output capture.
    let mut err = std::io::stderr();
    let mut unexpected = Vec::new();
    let mut fixed = Vec::new();
    for r in &reports {
        writeln!(err, "{}", r.line()).unwrap();
        let known = KNOWN_FAILING.contains(&r.id);
        match (r.pass, known) {
            (false, false) => unexpected.push(r.id),
            (true, true) => fixed.push(r.id),
            _ => {}
        }
    }
    assert_eq!(reports.len(), 10);
    if !fixed.is_empty() {
        writeln!(err, "known failures now passing: {fixed:?}").unwrap();
    }
    assert!(unexpected.is_empty(), "unexpected failures: {unexpected:?}");
    assert!(fixed.is_empty(), "known failures now pass, update KNOWN_FAILING: {fixed:?}");
}
