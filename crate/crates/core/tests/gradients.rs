mod support;

use support::gradcheck;

#[test]
fn every_differentiable_op_matches_finite_differences() {
    let reports = gradcheck::run_all();
    for r in &reports {
        println!(
            "{:<20} coords={:>3} f32={:.2e} f64={:.2e}",
            r.name, r.coords, r.max_rel_f32, r.max_rel_f64
        );
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}
