use pik_core::acceptance::{criterion_2, run_suite, SuiteOptions};

#[test]
fn acceptance_suite() {
    let report = run_suite(&SuiteOptions::default(), |r| println!("{}", r.line()));
    let failed: Vec<String> = report.criteria.iter().filter(|r| !r.passed).map(|r| r.line()).collect();
    assert!(report.all_passed, "failed criteria:\n{}", failed.join("\n"));
}

#[test]
fn perturbed_damping_fails_the_bound_criterion() {
    let r = criterion_2(&SuiteOptions { damping_fault: 0.25 });
    println!("{}", r.line());
    assert!(!r.passed);
    assert_eq!(r.id, 2);
    assert!(r.line().contains("damped pseudoinverse norm bounds"));
}
