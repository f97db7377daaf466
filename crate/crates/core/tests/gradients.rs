//! Central finite differences against the analytic reverse pass.

mod common;

#[test]
fn gradients_match_finite_differences() {
    let report = common::gradient_check(&common::toy_config(16), 100, 11);
    let checked: usize = report.per_tensor.iter().map(|t| t.1).sum();
    println!("checked {checked} coordinates, worst relative error {:.2e} at {}", report.worst, report.worst_at);
    assert!(report.worst < 1e-3, "{}", report.worst_at);
}
