mod common;

use common::quick_config;
use iceg::checkpoint::{Checkpoint, Phase};
use iceg::config::Alternation;
use iceg::data::{synth_dataset, Batch, EdgeParams, Sample};
use iceg::nn::Mode;
use iceg::train::{adversarial_train, evaluate, pretrain_detector, step_decay};
use iceg::IcegError;

fn data(n: usize) -> Vec<Sample> {
    synth_dataset(n, 64, 5, 0.15).unwrap()
}

#[test]
fn freeze_contracts_hold() {
    for (name, ok) in common::freeze_contracts() {
        assert!(ok, "{name}");
    }
}

#[test]
fn same_seed_gives_identical_runs() {
    let cfg = quick_config(3);
    let d = data(4);
    let a = pretrain_detector(&cfg, &d, None).unwrap();
    let b = pretrain_detector(&cfg, &d, None).unwrap();
    let la: Vec<f64> = a.history.iter().map(|h| h.losses.total).collect();
    let lb: Vec<f64> = b.history.iter().map(|h| h.losses.total).collect();
    assert_eq!(la.len(), 3);
    assert_eq!(la, lb);
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    let mut other = cfg.clone();
    other.train.seed += 1;
    let c = pretrain_detector(&other, &d, None).unwrap();
    assert_ne!(c.history[0].losses.total, la[0]);
}

#[test]
fn zero_beta_drops_the_consistency_term() {
    let mut cfg = quick_config(2);
    cfg.loss.beta = 0.0;
    let out = pretrain_detector(&cfg, &data(2), None).unwrap();
    for h in &out.history {
        assert_eq!(h.losses.cc, 0.0);
        // f32 sums on the tensor side, f64 here.
        assert!((h.losses.total - (h.losses.seg + h.losses.edge)).abs() < 1e-5);
    }
}

#[test]
fn learning_rate_drops_tenfold_at_configured_epochs() {
    let mut cfg = quick_config(usize::MAX);
    cfg.train.max_steps = None;
    cfg.train.pretrain_epochs = 5;
    cfg.train.lr_pretrain = 1e-4;
    cfg.train.lr_pretrain_decay_every = 2;
    let mut log = Vec::new();
    let out = pretrain_detector(&cfg, &data(2), Some(&mut log)).unwrap();
    let lrs: Vec<(usize, f64)> = out.history.iter().map(|h| (h.epoch, h.lr)).collect();
    assert_eq!(lrs.len(), 5);
    for (epoch, lr) in lrs {
        assert_eq!(lr, step_decay(1e-4, epoch, 2));
    }
    assert_eq!(out.history[1].lr, 1e-4);
    assert_eq!(out.history[2].lr, 1e-5);
    assert_eq!(out.history[4].lr, 1e-6);

    // The JSONL log carries the same numbers.
    let text = String::from_utf8(log).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[3]["lr"].as_f64().unwrap(), out.history[3].lr);
    assert_eq!(lines[0]["phase"], "pretrain");
    for key in ["step", "wbce", "wiou", "seg", "edge", "cc", "total", "grad_norm"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }
}

#[test]
fn adversarial_schedule_divides_by_ten_every_fifteen_epochs() {
    for (epoch, lr) in [(0, 1e-4), (14, 1e-4), (15, 1e-5), (29, 1e-5)] {
        assert!((step_decay(1e-4, epoch, 15) - lr).abs() < 1e-18);
    }
}

#[test]
fn checkpoint_round_trip_reproduces_outputs() {
    let cfg = quick_config(2);
    let d = data(2);
    let out = pretrain_detector(&cfg, &d, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(back.config_hash(), cfg.hash());
    let det = back.detector().unwrap();
    let refs: Vec<&Sample> = d.iter().collect();
    let b = Batch::<f32>::from_samples(&refs).unwrap();
    let p0 = out.detector.forward(&b.images, Mode::Eval).unwrap();
    let p1 = det.forward(&b.images, Mode::Eval).unwrap();
    assert!(common::bitwise_equal(p0.final_logits(), p1.final_logits()));

    let mut bytes = out.checkpoint.to_bytes().unwrap();
    bytes[0] ^= 0xff;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(IcegError::Checkpoint(_))));
    let bytes = out.checkpoint.to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn adversarial_training_moves_both_networks() {
    let d = data(2);
    let pre = pretrain_detector(&quick_config(1), &d, None).unwrap();
    for alternation in [Alternation::PerBatch, Alternation::PerEpoch] {
        let mut cfg = quick_config(1);
        cfg.train.alternation = alternation;
        let adv = adversarial_train(&cfg, &d, &pre.checkpoint, None).unwrap();
        assert_eq!(adv.checkpoint.phase, Phase::Adversarial);
        let g = adv.checkpoint.generator.as_ref().unwrap();
        let fresh = iceg::generator::Generator::<f32>::new(&cfg.generator, cfg.train.seed.wrapping_add(1));
        assert_ne!(g.params, fresh.store().snapshot_params());
        assert_ne!(adv.checkpoint.detector.params, pre.checkpoint.detector.params);
        let phases: Vec<&str> = adv.history.iter().map(|h| h.phase).collect();
        assert_eq!(phases, ["generator", "detector"]);
        assert!(adv.checkpoint.optimizer("generator").is_some());
    }
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let mut d = data(2);
    d[0].image[7] = f32::NAN;
    let err = pretrain_detector(&quick_config(2), &d, None).err().unwrap();
    match err {
        IcegError::Diverged(msg) => assert!(msg.contains("lr"), "{msg}"),
        other => panic!("unexpected {other}"),
    }
    assert!(matches!(pretrain_detector(&quick_config(1), &[], None), Err(IcegError::Parameter(_))));
}

#[test]
fn evaluation_runs_at_mask_resolution() {
    let d = data(2);
    let out = pretrain_detector(&quick_config(1), &d, None).unwrap();
    // Larger originals are evaluated after upsampling the prediction.
    let big: Vec<Sample> = d.iter().map(|s| s.resized(96, EdgeParams::for_side(96)).unwrap()).collect();
    let report = evaluate(&out.detector, &big, 64, 2, true).unwrap();
    assert_eq!(report.per_image.as_ref().unwrap().len(), 2);
    for v in [report.mae, report.f_beta, report.e_phi, report.s_alpha] {
        assert!((0.0..=1.0).contains(&v));
    }
}
