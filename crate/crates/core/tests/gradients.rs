mod support;

use support::*;

fn assert_accurate(name: &str, check: fn(&mut rand_chacha::ChaCha8Rng) -> Option<f64>, seed: u64) {
    let (worst, excluded) = run_checks(check, seed, 100);
    assert!(
        worst < TOLERANCE,
        "{name}: worst relative error {worst:e} ({excluded} draws excluded)"
    );
}

#[test]
fn global_clustering_gradient() {
    assert_accurate("gc", check_gc, 11);
}

#[test]
fn local_clustering_gradient() {
    assert_accurate("lc", check_lc, 12);
}

#[test]
fn distillation_gradient() {
    assert_accurate("ds", check_ds, 13);
}

#[test]
fn deepnno_bce_gradient() {
    assert_accurate("bce", check_bce, 14);
}

#[test]
fn batch_objective_through_mlp() {
    assert_accurate("end_to_end", check_end_to_end, 15);
}

#[test]
fn detects_a_wrong_gradient() {
    // The checker must notice a gradient that is off by a factor.
    use owr_core::gradcheck::{central_difference, relative_error};
    let x = [0.3, -1.2, 2.0];
    let numeric = central_difference(|v| v.iter().map(|a| a * a).sum(), &x, H);
    let wrong: Vec<f64> = x.iter().map(|a| 2.2 * a).collect();
    assert!(relative_error(&wrong, &numeric, FLOOR) > TOLERANCE);
}
