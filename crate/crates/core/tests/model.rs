mod common;

use iceg::config::{BackgroundMask, ModelConfig};
use iceg::model::Detector;
use iceg::nn::Mode;
use iceg::tensor::Tensor;
use iceg::IcegError;

#[test]
fn resolution_law_at_desk_sizes() {
    for size in [64, 96] {
        let bad = common::shape_law(size);
        assert!(bad.is_empty(), "{size}: {bad:?}");
    }
}

#[test]
fn resolution_law_at_full_size() {
    let bad = common::shape_law(352);
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn identities_hold_exactly() {
    for (name, ok) in common::exact_identities() {
        assert!(ok, "{name}");
    }
}

#[test]
fn indivisible_inputs_are_rejected() {
    let det = Detector::<f32>::new(&ModelConfig::default(), 0);
    let x = Tensor::<f32>::zeros(&[1, 3, 48, 48]);
    assert!(matches!(det.forward(&x, Mode::Eval), Err(IcegError::Dimension(_))));
}

#[test]
fn reversed_logit_background_changes_only_the_background_gate() {
    let mut cfg = ModelConfig::default();
    let x = Tensor::<f32>::full(&[1, 3, 64, 64], 0.3);
    let a = Detector::<f32>::new(&cfg, 9).forward(&x, Mode::Eval).unwrap();
    cfg.background_mask = BackgroundMask::SigmoidOfReversedLogits;
    let b = Detector::<f32>::new(&cfg, 9).forward(&x, Mode::Eval).unwrap();
    let (ga, gb) = (&a.decoder.levels[3].calibration, &b.decoder.levels[3].calibration);
    assert!(common::bitwise_equal(&ga.fg_gate, &gb.fg_gate));
    assert!(!common::bitwise_equal(&ga.bg_gate, &gb.bg_gate));
}

#[test]
fn predictions_are_probabilities_and_deterministic() {
    let det = Detector::<f32>::new(&ModelConfig::default(), 2);
    let mut r = common::rng(1);
    let x = common::uniform(&mut r, &[2, 3, 64, 64], 0.0, 1.0);
    let x = Tensor::<f32>::from_vec(x.to_vec().iter().map(|&v| v as f32).collect(), x.shape()).unwrap();
    let p = det.predict(&x).unwrap();
    assert_eq!(p.shape(), &[2, 1, 64, 64]);
    assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let q = Detector::<f32>::new(&ModelConfig::default(), 2).predict(&x).unwrap();
    assert!(common::bitwise_equal(&p, &q));
    // Inference leaves the store trainable and the buffers untouched.
    assert!(!det.store().is_frozen());
}
