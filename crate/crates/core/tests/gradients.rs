mod common;

use cdp_core::losses::{CeNormalization, LossConfig};
use cdp_core::rng;
use common::*;
use rand::Rng;

fn check(cfg: &LossConfig, trials: u64, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut r = rng::stream(seed, &[trial]);
        let model = small_model(6, 100 + trial);
        let batch = paired_batch(&mut r, 2, 2, 16, 8, 6);
        let res = gradient_check(&model, &batch, cfg, r.random(), 1e-3);
        assert!(res.checked == model.num_parameters());
        worst = worst.max(res.max_rel);
    }
    worst
}

#[test]
fn combined_loss_gradient_matches_finite_differences() {
    let worst = check(&LossConfig::default(), 2, 11);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn cross_entropy_alone_matches_finite_differences() {
    let cfg = LossConfig { lambda: 0.0, ..LossConfig::default() };
    let worst = check(&cfg, 1, 12);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn triplet_alone_matches_finite_differences() {
    let cfg = LossConfig { use_classification: false, ..LossConfig::default() };
    let worst = check(&cfg, 1, 13);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn class_normalized_cross_entropy_matches_finite_differences() {
    let cfg = LossConfig { ce_normalization: CeNormalization::MeanOverSamplesAndClasses, ..LossConfig::default() };
    let worst = check(&cfg, 1, 14);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}
