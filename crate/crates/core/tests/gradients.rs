mod common;

use common::{e2e_gradcheck, E2E_LOSSES};

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut checked = 0;
    for seed in 0..25u64 {
        let loss = E2E_LOSSES[seed as usize % E2E_LOSSES.len()];
        let report = e2e_gradcheck(seed, loss);
        assert!(
            report.max_rel_err < 1e-4,
            "config {seed} ({loss:?}): rel err {} (analytic {}, numeric {})",
            report.max_rel_err,
            report.analytic,
            report.numeric
        );
        checked += report.checked;
    }
    assert!(checked > 1000, "only {checked} parameters checked");
}
