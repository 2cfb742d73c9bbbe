//! Autodiff against central finite differences for the episode losses.

mod common;

use std::time::Instant;

use grad2task::adaptation::Variant;

use common::gradcheck::{stage1_check, stage2_check, TOL};

#[test]
fn stage1_loss_gradients_match_finite_differences() {
    let t = Instant::now();
    let worst = (0..20).map(stage1_check).fold(0.0, f64::max);
    eprintln!("stage 1: worst rel err {worst:.2e} in {:?}", t.elapsed());
    assert!(worst <= TOL);
}

#[test]
fn stage2_loss_gradients_match_finite_differences() {
    let t = Instant::now();
    let worst = (0..20).map(|s| stage2_check(100 + s, Variant::Grad2Task)).fold(0.0, f64::max);
    eprintln!("stage 2: worst rel err {worst:.2e} in {:?}", t.elapsed());
    assert!(worst <= TOL);
}

#[test]
fn stage2_gradients_for_other_variants() {
    for (i, v) in [Variant::AdaptAll, Variant::Hypernet, Variant::InputMean, Variant::InputLabel]
        .into_iter()
        .enumerate()
    {
        for s in 0..3 {
            stage2_check(200 + 10 * i as u64 + s, v);
        }
    }
}
