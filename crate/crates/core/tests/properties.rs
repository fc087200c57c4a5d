mod support;

use hicom_core::autograd::Tape;
use hicom_core::inter_face::{contrastive_term, contrastive_term_var, FacePair};
use hicom_core::scene_motion::loss_sp;
use hicom_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn gaze_rule_matches_enumeration() {
    let (cases, bad) = support::gaze_exhaustive(6);
    assert_eq!(cases, 126);
    assert_eq!(bad, 0);
}

#[test]
fn mismatch_rule_matches_truth_table() {
    assert_eq!(support::mismatch_table(), (36, 0));
}

#[test]
fn uniform_logits_cost_ln2() {
    let mut t = Tape::new();
    let f = t.constant(Tensor::zeros(&[5, 2]));
    let g = t.constant(Tensor::zeros(&[3, 2]));
    let l = loss_sp(
        &mut t,
        f,
        g,
        &[true, false, false, true, false],
        true,
        0.5,
        0.5,
    )
    .unwrap();
    assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-9);
}

#[test]
fn hinge_cases() {
    assert!((contrastive_term(&[(true, 0.2)], 1.0) - 0.2).abs() < 1e-9);
    assert!((contrastive_term(&[(false, 0.4)], 1.0) - 0.6).abs() < 1e-9);
    assert!(contrastive_term(&[(false, 1.5)], 1.0).abs() < 1e-9);
    // Same cases through the differentiable path, with embeddings placed at
    // the required distances.
    for (similar, d, want) in [(true, 0.2, 0.2), (false, 0.4, 0.6), (false, 1.5, 0.0)] {
        let mut t = Tape::new();
        let e = t.constant(Tensor::from_vec(&[2, 2], vec![0.0, 0.0, d, 0.0]));
        let v = contrastive_term_var(
            &mut t,
            e,
            &[FacePair {
                i: 0,
                j: 1,
                similar,
            }],
            1.0,
        )
        .unwrap();
        assert!((t.value(v).item() - want).abs() < 1e-9, "{similar} {d}");
    }
}

#[test]
fn scene_motion_loss_gradients() {
    let c = support::gradcheck_loss_sp(20, 1e-4);
    eprintln!(
        "worst relative error {:.3e}, mean |derivative| {:.3e}",
        c.worst_rel, c.mean_abs
    );
    assert!(c.worst_rel < 1e-3 && c.mean_abs > 1e-6);
}

#[test]
fn appearance_loss_gradients() {
    let c = support::gradcheck_loss_app(20, 1e-4);
    eprintln!(
        "worst relative error {:.3e}, mean |derivative| {:.3e}",
        c.worst_rel, c.mean_abs
    );
    assert!(c.worst_rel < 1e-3 && c.mean_abs > 1e-6);
}

#[test]
fn frame_metrics_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let frames = support::random_frames(&mut rng, 50);
        let c = support::metric_check(&frames);
        assert!(c.fcac_equal);
        assert!(c.fcau_error < 1e-9);
        assert_eq!(c.frame_violations, 0);
    }
}

#[test]
fn fusion_is_monotone_with_exact_attribution() {
    let c = support::fusion_check();
    assert_eq!(c.patterns, 32);
    assert_eq!((c.flips, c.attribution_errors, c.na_effects), (0, 0, 0));
}
