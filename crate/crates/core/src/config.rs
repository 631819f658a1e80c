//! Run configuration and its flat `key = value` text form.
//!
//! Lines are `section.key = value`; `#` starts a comment. Lists are comma
//! separated. Unknown keys are rejected so typos do not silently fall back to
//! defaults.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{IcegError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Stride-2 stem plus four residual stages.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Output channels of the five pyramid levels.
    pub channels: [usize; 5],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Desk,
            channels: [16, 32, 64, 96, 128],
        }
    }
}

/// How the background attention mask is derived from the previous logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMask {
    /// `1 - sigmoid(p)`.
    OneMinusSigmoid,
    /// `sigmoid(1 - p)`.
    SigmoidOfReversedLogits,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    /// Working width of the aggregation and decoder features.
    pub width: usize,
    pub encoder: EncoderConfig,
    pub aspp_dilations: Vec<usize>,
    /// Apply the sigmoid before upsampling the previous prediction instead
    /// of upsampling the logits.
    pub sigmoid_before_resample: bool,
    pub background_mask: BackgroundMask,
    /// Channel reduction inside attention blocks.
    pub attention_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 64,
            encoder: EncoderConfig::default(),
            aspp_dilations: vec![1, 2, 4],
            sigmoid_before_resample: false,
            background_mask: BackgroundMask::OneMinusSigmoid,
            attention_reduction: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeneratorConfig {
    pub widths: [usize; 3],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { widths: [32, 64, 128] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossConfig {
    /// Weight of the concealment term in the generator objective.
    pub lambda: f64,
    /// Weight of the consistency term in the detector objective.
    pub beta: f64,
    /// Weight of the background fidelity term in the generator objective.
    pub fidelity_weight: f64,
    /// Window of the boundary-emphasis average pool; derived from the image
    /// size when unset.
    pub pool_window: Option<usize>,
    /// Apply the adversarial target to every segmentation map rather than
    /// only the final prediction.
    pub adv_all_maps: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.1,
            beta: 0.1,
            fidelity_weight: 1.0,
            pool_window: None,
            adv_all_maps: false,
        }
    }
}

impl LossConfig {
    /// 31 at 352 pixels, scaled linearly and kept odd.
    pub fn window_for(&self, image_size: usize) -> usize {
        self.pool_window.unwrap_or_else(|| {
            let k = (31.0 * image_size as f64 / 352.0).round() as usize;
            (k | 1).max(1)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternation {
    PerBatch,
    PerEpoch,
}

/// Supervision used for the detector while it trains on generated images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorLoss {
    /// Full deep-supervised objective with edge and consistency terms.
    Total,
    /// Weighted BCE + IoU on the final prediction only.
    Segmentation,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub image_size: usize,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub adv_epochs: usize,
    pub lr_pretrain: f64,
    /// The pretraining rate is multiplied by 0.1 every this many epochs.
    pub lr_pretrain_decay_every: usize,
    pub lr_adv: f64,
    pub lr_adv_decay_every: usize,
    pub adam_betas_pretrain: (f64, f64),
    pub adam_betas_adv: (f64, f64),
    pub alternation: Alternation,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Stops a phase after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub hflip: bool,
    /// Fraction of real images mixed into detector batches while training
    /// against the generator.
    pub real_mix: f64,
    pub detector_loss: DetectorLoss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            image_size: 64,
            batch_size: 4,
            pretrain_epochs: 100,
            adv_epochs: 30,
            lr_pretrain: 1e-4,
            lr_pretrain_decay_every: 50,
            lr_adv: 1e-4,
            lr_adv_decay_every: 15,
            adam_betas_pretrain: (0.9, 0.999),
            adam_betas_adv: (0.5, 0.99),
            alternation: Alternation::PerBatch,
            seed: 0,
            clip_norm: Some(5.0),
            max_steps: None,
            hflip: false,
            real_mix: 0.0,
            detector_loss: DetectorLoss::Total,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Config {
    pub model: ModelConfig,
    pub generator: GeneratorConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| IcegError::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse(key, p)).collect()
}

fn parse_array<T: FromStr + Copy, const N: usize>(key: &str, v: &str) -> Result<[T; N]> {
    let items: Vec<T> = parse_list(key, v)?;
    items
        .try_into()
        .map_err(|_| IcegError::Config(format!("`{key}` needs exactly {N} values")))
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    let [a, b] = parse_array::<f64, 2>(key, v)?;
    Ok((a, b))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(IcegError::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| IcegError::io(format!("reading config {}", path.display()), e))?;
        let mut cfg = Config::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| IcegError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    /// Sets one dotted key. Used by both the file parser and flag overrides.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let l = &mut self.loss;
        let t = &mut self.train;
        match key {
            "model.width" => m.width = parse(key, v)?,
            "model.aspp_dilations" => m.aspp_dilations = parse_list(key, v)?,
            "model.sigmoid_before_resample" => m.sigmoid_before_resample = parse_bool(key, v)?,
            "model.attention_reduction" => m.attention_reduction = parse(key, v)?,
            "model.background_mask" => {
                m.background_mask = match v {
                    "one_minus_sigmoid" => BackgroundMask::OneMinusSigmoid,
                    "sigmoid_of_reversed_logits" => BackgroundMask::SigmoidOfReversedLogits,
                    _ => return Err(IcegError::Config(format!("unknown background mask `{v}`"))),
                }
            }
            "encoder.kind" => {
                m.encoder.kind = match v {
                    "desk" => EncoderKind::Desk,
                    _ => return Err(IcegError::Config(format!("unsupported encoder `{v}`"))),
                }
            }
            "encoder.channels" => m.encoder.channels = parse_array(key, v)?,
            "generator.widths" => self.generator.widths = parse_array(key, v)?,
            "loss.lambda" => l.lambda = parse(key, v)?,
            "loss.beta" => l.beta = parse(key, v)?,
            "loss.fidelity_weight" => l.fidelity_weight = parse(key, v)?,
            "loss.pool_window" => l.pool_window = if v == "auto" { None } else { Some(parse(key, v)?) },
            "loss.adv_all_maps" => l.adv_all_maps = parse_bool(key, v)?,
            "train.image_size" => t.image_size = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.pretrain_epochs" => t.pretrain_epochs = parse(key, v)?,
            "train.adv_epochs" => t.adv_epochs = parse(key, v)?,
            "train.lr_pretrain" => t.lr_pretrain = parse(key, v)?,
            "train.lr_pretrain_decay_every" => t.lr_pretrain_decay_every = parse(key, v)?,
            "train.lr_adv" => t.lr_adv = parse(key, v)?,
            "train.lr_adv_decay_every" => t.lr_adv_decay_every = parse(key, v)?,
            "train.adam_betas_pretrain" => t.adam_betas_pretrain = parse_pair(key, v)?,
            "train.adam_betas_adv" => t.adam_betas_adv = parse_pair(key, v)?,
            "train.alternation" => {
                t.alternation = match v {
                    "per_batch" => Alternation::PerBatch,
                    "per_epoch" => Alternation::PerEpoch,
                    _ => return Err(IcegError::Config(format!("unknown alternation `{v}`"))),
                }
            }
            "train.seed" => t.seed = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = if v == "none" { None } else { Some(parse(key, v)?) },
            "train.max_steps" => t.max_steps = if v == "none" { None } else { Some(parse(key, v)?) },
            "train.hflip" => t.hflip = parse_bool(key, v)?,
            "adv.real_mix" => t.real_mix = parse(key, v)?,
            "adv.detector_loss" => {
                t.detector_loss = match v {
                    "total" => DetectorLoss::Total,
                    "segmentation" => DetectorLoss::Segmentation,
                    _ => return Err(IcegError::Config(format!("unknown detector loss `{v}`"))),
                }
            }
            _ => return Err(IcegError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let bad = |msg: String| Err(IcegError::Config(msg));
        if self.loss.lambda < 0.0 || self.loss.beta < 0.0 || self.loss.fidelity_weight < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if t.lr_pretrain <= 0.0 || t.lr_adv <= 0.0 {
            return bad("learning rates must be positive".into());
        }
        if t.pretrain_epochs == 0 || t.adv_epochs == 0 || t.batch_size == 0 {
            return bad("epochs and batch size must be at least 1".into());
        }
        if t.lr_pretrain_decay_every == 0 || t.lr_adv_decay_every == 0 {
            return bad("decay intervals must be at least 1".into());
        }
        if t.image_size == 0 || t.image_size % 32 != 0 {
            return bad(format!("image size {} is not a multiple of 32", t.image_size));
        }
        if !(0.0..=1.0).contains(&t.real_mix) {
            return bad("adv.real_mix must lie in [0, 1]".into());
        }
        if self.model.width == 0 || self.model.attention_reduction == 0 || self.model.aspp_dilations.is_empty() {
            return bad("model widths, reduction and dilations must be non-empty".into());
        }
        if self.model.encoder.channels.contains(&0) || self.generator.widths.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.loss.pool_window.is_some_and(|w| w % 2 == 0) {
            return bad("loss.pool_window must be odd".into());
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let l = &self.loss;
        let t = &self.train;
        let opt = |o: Option<String>, none: &str| o.unwrap_or_else(|| none.to_string());
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("model.width", m.width.to_string());
        put("model.aspp_dilations", join(&m.aspp_dilations));
        put("model.sigmoid_before_resample", m.sigmoid_before_resample.to_string());
        put("model.attention_reduction", m.attention_reduction.to_string());
        put(
            "model.background_mask",
            match m.background_mask {
                BackgroundMask::OneMinusSigmoid => "one_minus_sigmoid",
                BackgroundMask::SigmoidOfReversedLogits => "sigmoid_of_reversed_logits",
            }
            .into(),
        );
        put("encoder.kind", "desk".into());
        put("encoder.channels", join(&m.encoder.channels));
        put("generator.widths", join(&self.generator.widths));
        put("loss.lambda", l.lambda.to_string());
        put("loss.beta", l.beta.to_string());
        put("loss.fidelity_weight", l.fidelity_weight.to_string());
        put("loss.pool_window", opt(l.pool_window.map(|w| w.to_string()), "auto"));
        put("loss.adv_all_maps", l.adv_all_maps.to_string());
        put("train.image_size", t.image_size.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.pretrain_epochs", t.pretrain_epochs.to_string());
        put("train.adv_epochs", t.adv_epochs.to_string());
        put("train.lr_pretrain", t.lr_pretrain.to_string());
        put("train.lr_pretrain_decay_every", t.lr_pretrain_decay_every.to_string());
        put("train.lr_adv", t.lr_adv.to_string());
        put("train.lr_adv_decay_every", t.lr_adv_decay_every.to_string());
        put("train.adam_betas_pretrain", format!("{},{}", t.adam_betas_pretrain.0, t.adam_betas_pretrain.1));
        put("train.adam_betas_adv", format!("{},{}", t.adam_betas_adv.0, t.adam_betas_adv.1));
        put(
            "train.alternation",
            match t.alternation {
                Alternation::PerBatch => "per_batch",
                Alternation::PerEpoch => "per_epoch",
            }
            .into(),
        );
        put("train.seed", t.seed.to_string());
        put("train.clip_norm", opt(t.clip_norm.map(|c| c.to_string()), "none"));
        put("train.max_steps", opt(t.max_steps.map(|c| c.to_string()), "none"));
        put("train.hflip", t.hflip.to_string());
        put("adv.real_mix", t.real_mix.to_string());
        put(
            "adv.detector_loss",
            match t.detector_loss {
                DetectorLoss::Total => "total",
                DetectorLoss::Segmentation => "segmentation",
            }
            .into(),
        );
        s
    }

    /// SHA-256 of the canonical text form, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
