//! Detector pretraining, the alternating generator/detector schedule, and
//! evaluation.

use std::io::Write;

use iceg_tensor::{Adam, AdamConfig, StepInfo, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, Phase, StoreSnapshot};
use crate::config::{Alternation, Config, DetectorLoss};
use crate::data::{Batch, EdgeParams, Sample};
use crate::error::{IcegError, Result};
use crate::generator::Generator;
use crate::losses::{detector_adversarial, detector_total, generator_objective, LossReport};
use crate::metrics::{evaluate_items, EvalItem, MetricReport};
use crate::model::Detector;
use crate::nn::Mode;

/// One line of the training log.
#[derive(Clone, Debug, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub phase: &'static str,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    #[serde(flatten)]
    pub losses: LossReport,
}

/// `base / 10^(epoch / every)` for a 0-based epoch.
pub fn step_decay(base: f64, epoch: usize, every: usize) -> f64 {
    base / 10f64.powi((epoch / every.max(1)) as i32)
}

/// Resizes every sample to the training resolution.
pub fn prepare(samples: &[Sample], size: usize) -> Result<Vec<Sample>> {
    let edge = EdgeParams::for_side(size);
    samples.iter().map(|s| s.resized(size, edge)).collect()
}

fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(|c| c.to_vec()).collect()
}

fn make_batch(samples: &[Sample], idx: &[usize], flip: bool, rng: &mut ChaCha8Rng) -> Result<Batch<f32>> {
    let owned: Vec<Sample> = idx
        .iter()
        .map(|&i| {
            if flip && rng.random_bool(0.5) {
                samples[i].flipped()
            } else {
                samples[i].clone()
            }
        })
        .collect();
    let refs: Vec<&Sample> = owned.iter().collect();
    Batch::from_samples(&refs)
}

fn adam(betas: (f64, f64), lr: f64, clip: Option<f64>) -> AdamConfig {
    AdamConfig {
        lr,
        beta1: betas.0,
        beta2: betas.1,
        eps: 1e-8,
        clip_norm: clip,
    }
}

fn ensure_finite(loss: &Tensor<f32>, what: &str, lr: f64, last_norm: f64) -> Result<()> {
    let v = loss.item();
    if v.is_finite() {
        Ok(())
    } else {
        Err(IcegError::Diverged(format!(
            "{what} loss is {v} (lr {lr:e}, previous gradient norm {last_norm:.4e})"
        )))
    }
}

fn optimizer_step(
    opt: &mut Adam,
    store: &iceg_tensor::ParamStore<f32>,
    loss: &Tensor<f32>,
    what: &str,
    last_norm: f64,
) -> Result<StepInfo> {
    ensure_finite(loss, what, opt.cfg.lr, last_norm)?;
    let grads = loss.backward();
    opt.step(store, &grads).map_err(|e| {
        IcegError::Diverged(format!(
            "{what} update failed: {e} (lr {:e}, previous gradient norm {last_norm:.4e})",
            opt.cfg.lr
        ))
    })
}

fn emit(log: &mut Option<&mut dyn Write>, history: &mut Vec<StepLog>, entry: StepLog) -> Result<()> {
    if let Some(w) = log.as_mut() {
        let line = serde_json::to_string(&entry)?;
        writeln!(w, "{line}").map_err(|e| IcegError::io("writing training log", e))?;
    }
    history.push(entry);
    Ok(())
}

pub struct PretrainOutcome {
    pub detector: Detector<f32>,
    pub checkpoint: Checkpoint,
    pub history: Vec<StepLog>,
}

/// Minimises the full detector objective on real images.
pub fn pretrain_detector(cfg: &Config, dataset: &[Sample], mut log: Option<&mut dyn Write>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(IcegError::Parameter("training set is empty".into()));
    }
    let t = &cfg.train;
    let samples = prepare(dataset, t.image_size)?;
    let window = cfg.loss.window_for(t.image_size);
    let detector = Detector::<f32>::new(&cfg.model, t.seed);
    let mut opt = Adam::new(detector.store(), adam(t.adam_betas_pretrain, t.lr_pretrain, t.clip_norm));
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed ^ 0x5eed_da7a);
    let mut history = Vec::new();
    let (mut step, mut last_norm, mut epochs_run) = (0usize, 0.0, 0usize);
    'outer: for epoch in 0..t.pretrain_epochs {
        let lr = step_decay(t.lr_pretrain, epoch, t.lr_pretrain_decay_every);
        opt.set_lr(lr);
        epochs_run = epoch + 1;
        for idx in epoch_batches(samples.len(), t.batch_size, &mut rng) {
            if t.max_steps.is_some_and(|m| step >= m) {
                break 'outer;
            }
            let batch = make_batch(&samples, &idx, t.hflip, &mut rng)?;
            let out = detector.forward(&batch.images, Mode::Train)?;
            let (loss, report) = detector_total(&out, &batch.gt, &cfg.loss, window)?;
            let info = optimizer_step(&mut opt, detector.store(), &loss, "detector", last_norm)?;
            last_norm = info.grad_norm;
            step += 1;
            emit(
                &mut log,
                &mut history,
                StepLog {
                    step,
                    epoch,
                    phase: "pretrain",
                    lr,
                    grad_norm: info.grad_norm,
                    clipped: info.clipped,
                    losses: report,
                },
            )?;
        }
    }
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        epoch: epochs_run,
        step,
        phase: Phase::Pretrain,
        seed: t.seed,
        detector: StoreSnapshot::of(detector.store()),
        generator: None,
        optimizers: vec![("detector".into(), opt.state().clone())],
    };
    Ok(PretrainOutcome {
        detector,
        checkpoint,
        history,
    })
}

/// Owns both networks and their optimizers during adversarial training.
pub struct AdversarialTrainer {
    pub detector: Detector<f32>,
    pub generator: Generator<f32>,
    gen_opt: Adam,
    det_opt: Adam,
    cfg: Config,
    window: usize,
    rng: ChaCha8Rng,
    last_norm: f64,
}

impl AdversarialTrainer {
    pub fn new(cfg: &Config, detector: Detector<f32>, generator: Generator<f32>) -> Self {
        let t = &cfg.train;
        AdversarialTrainer {
            gen_opt: Adam::new(generator.store(), adam(t.adam_betas_adv, t.lr_adv, t.clip_norm)),
            det_opt: Adam::new(detector.store(), adam(t.adam_betas_adv, t.lr_adv, t.clip_norm)),
            detector,
            generator,
            window: cfg.loss.window_for(t.image_size),
            rng: ChaCha8Rng::seed_from_u64(t.seed ^ 0xad5e_7a11),
            cfg: cfg.clone(),
            last_norm: 0.0,
        }
    }

    pub fn set_epoch(&mut self, epoch: usize) -> f64 {
        let lr = step_decay(self.cfg.train.lr_adv, epoch, self.cfg.train.lr_adv_decay_every);
        self.gen_opt.set_lr(lr);
        self.det_opt.set_lr(lr);
        lr
    }

    /// Detector frozen in inference mode; the generator learns to hide
    /// the object from it while keeping the background.
    pub fn generator_step(&mut self, batch: &Batch<f32>) -> Result<(StepInfo, LossReport)> {
        self.detector.store().set_frozen(true);
        self.generator.store().set_frozen(false);
        let x = batch.images.detach();
        let xg = self.generator.generate(&x)?;
        let out = self.detector.forward(&xg, Mode::Eval)?;
        let (loss, report) = generator_objective(&xg, &x, &out, &batch.gt, &self.cfg.loss, self.window)?;
        let info = optimizer_step(&mut self.gen_opt, self.generator.store(), &loss, "generator", self.last_norm)?;
        self.last_norm = info.grad_norm;
        self.detector.store().set_frozen(false);
        Ok((info, report))
    }

    /// Generator frozen; the detector learns to segment freshly generated
    /// images (optionally mixed with real ones).
    pub fn detector_step(&mut self, batch: &Batch<f32>) -> Result<(StepInfo, LossReport)> {
        self.generator.store().set_frozen(true);
        self.detector.store().set_frozen(false);
        let x = batch.images.detach();
        let mut xg = self.generator.generate(&x)?.detach();
        let mix = self.cfg.train.real_mix;
        if mix > 0.0 {
            let (b, c, h, w) = x.dims4()?;
            let per = c * h * w;
            let mut data = xg.to_vec();
            for i in 0..b {
                if self.rng.random_bool(mix) {
                    data[i * per..(i + 1) * per].copy_from_slice(&x.data()[i * per..(i + 1) * per]);
                }
            }
            xg = Tensor::from_vec(data, &[b, c, h, w])?;
        }
        let out = self.detector.forward(&xg, Mode::Train)?;
        let (loss, report) = match self.cfg.train.detector_loss {
            DetectorLoss::Total => detector_total(&out, &batch.gt, &self.cfg.loss, self.window)?,
            DetectorLoss::Segmentation => detector_adversarial(&out, &batch.gt, self.window)?,
        };
        let info = optimizer_step(&mut self.det_opt, self.detector.store(), &loss, "detector", self.last_norm)?;
        self.last_norm = info.grad_norm;
        self.generator.store().set_frozen(false);
        Ok((info, report))
    }

    pub fn checkpoint(&self, epoch: usize, step: usize) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            epoch,
            step,
            phase: Phase::Adversarial,
            seed: self.cfg.train.seed,
            detector: StoreSnapshot::of(self.detector.store()),
            generator: Some(StoreSnapshot::of(self.generator.store())),
            optimizers: vec![
                ("detector".into(), self.det_opt.state().clone()),
                ("generator".into(), self.gen_opt.state().clone()),
            ],
        }
    }
}

pub struct AdversarialOutcome {
    pub detector: Detector<f32>,
    pub generator: Generator<f32>,
    pub checkpoint: Checkpoint,
    pub history: Vec<StepLog>,
}

/// Alternates generator and detector updates starting from a pretrained
/// detector. Model settings come from the checkpoint; schedule and loss
/// settings from `cfg`.
pub fn adversarial_train(
    cfg: &Config,
    dataset: &[Sample],
    init: &Checkpoint,
    mut log: Option<&mut dyn Write>,
) -> Result<AdversarialOutcome> {
    let mut cfg = cfg.clone();
    cfg.model = init.config.model.clone();
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(IcegError::Parameter("training set is empty".into()));
    }
    let t = cfg.train.clone();
    let samples = prepare(dataset, t.image_size)?;
    let detector = init.detector()?;
    let generator = match init.generator()? {
        Some(g) => g,
        None => Generator::new(&cfg.generator, t.seed.wrapping_add(1)),
    };
    let mut trainer = AdversarialTrainer::new(&cfg, detector, generator);
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed ^ 0x0bad_5eed);
    let mut history = Vec::new();
    let (mut step, mut epochs_run) = (0usize, 0usize);
    let mut log_step = |trainer_phase: &'static str, epoch: usize, lr: f64, info: StepInfo, report: LossReport, step: usize, history: &mut Vec<StepLog>| {
        emit(
            &mut log,
            history,
            StepLog {
                step,
                epoch,
                phase: trainer_phase,
                lr,
                grad_norm: info.grad_norm,
                clipped: info.clipped,
                losses: report,
            },
        )
    };
    'outer: for epoch in 0..t.adv_epochs {
        let lr = trainer.set_epoch(epoch);
        epochs_run = epoch + 1;
        let order = epoch_batches(samples.len(), t.batch_size, &mut rng);
        let batches = order
            .iter()
            .map(|idx| make_batch(&samples, idx, t.hflip, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        match t.alternation {
            Alternation::PerBatch => {
                for batch in &batches {
                    if t.max_steps.is_some_and(|m| step >= m) {
                        break 'outer;
                    }
                    step += 1;
                    let (info, rep) = trainer.generator_step(batch)?;
                    log_step("generator", epoch, lr, info, rep, step, &mut history)?;
                    let (info, rep) = trainer.detector_step(batch)?;
                    log_step("detector", epoch, lr, info, rep, step, &mut history)?;
                }
            }
            Alternation::PerEpoch => {
                for phase in ["generator", "detector"] {
                    for batch in &batches {
                        if t.max_steps.is_some_and(|m| step >= m) {
                            break 'outer;
                        }
                        if phase == "detector" {
                            step += 1;
                        }
                        let (info, rep) = if phase == "generator" {
                            trainer.generator_step(batch)?
                        } else {
                            trainer.detector_step(batch)?
                        };
                        log_step(phase, epoch, lr, info, rep, step, &mut history)?;
                    }
                }
            }
        }
    }
    let checkpoint = trainer.checkpoint(epochs_run, step);
    Ok(AdversarialOutcome {
        detector: trainer.detector,
        generator: trainer.generator,
        checkpoint,
        history,
    })
}

/// Predictions in `[0, 1]` at each sample's own resolution.
pub fn predict_samples(detector: &Detector<f32>, samples: &[Sample], image_size: usize, batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let resized = prepare(chunk, image_size)?;
        let refs: Vec<&Sample> = resized.iter().collect();
        let b = Batch::<f32>::from_samples(&refs)?;
        let p = detector.predict(&b.images)?;
        let plane = image_size * image_size;
        for (i, s) in chunk.iter().enumerate() {
            let slice = p.data()[i * plane..(i + 1) * plane].to_vec();
            let full = if (s.height, s.width) == (image_size, image_size) {
                slice
            } else {
                Tensor::from_vec(slice, &[1, 1, image_size, image_size])?
                    .resize_bilinear(s.height, s.width)?
                    .to_vec()
            };
            preds.push(full.iter().map(|&v| (v as f64).clamp(0.0, 1.0)).collect());
        }
    }
    Ok(preds)
}

/// Runs the detector on the real images and scores it with all four
/// metrics at ground-truth resolution.
pub fn evaluate(detector: &Detector<f32>, samples: &[Sample], image_size: usize, batch: usize, per_image: bool) -> Result<MetricReport> {
    let preds = predict_samples(detector, samples, image_size, batch)?;
    let items: Vec<EvalItem> = samples
        .iter()
        .zip(preds)
        .map(|(s, pred)| EvalItem {
            id: s.id.clone(),
            height: s.height,
            width: s.width,
            pred,
            gt: s.mask.iter().map(|&v| v as f64).collect(),
        })
        .collect();
    evaluate_items(&items, per_image)
}
