//! Edge-guided segmentation decoder.
//!
//! Levels run from the deepest (`k = 4`) to the finest (`k = 1`). Each level
//! first reconstructs an edge map from the integrated features gated by the
//! previous edge prediction, then calibrates foreground and background
//! features separately under the previous segmentation prediction, with a
//! per-pixel scale and shift predicted from the previous edge features.

use iceg_tensor::{Element, Scope, Tensor};

use crate::cfc::CFC_LEVELS;
use crate::config::BackgroundMask;
use crate::error::{IcegError, Result};
use crate::nn::{resize_to, Conv2d, Crb, Mode, Rcab};

/// Options that change how previous predictions become attention masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderFlags {
    pub sigmoid_before_resample: bool,
    pub background_mask: BackgroundMask,
}

impl Default for DecoderFlags {
    fn default() -> Self {
        DecoderFlags {
            sigmoid_before_resample: false,
            background_mask: BackgroundMask::OneMinusSigmoid,
        }
    }
}

/// Edge reconstruction: `fe = CRB([fl * s(pe_prev) + fl, fs_prev])`,
/// `pe = conv3(fe)`.
#[derive(Clone)]
pub struct EdgeReconstruct<T: Element> {
    crb: Crb<T>,
    predict: Conv2d<T>,
}

impl<T: Element> EdgeReconstruct<T> {
    pub fn new(s: &Scope<T>, width: usize, prev_seg_width: usize) -> Self {
        EdgeReconstruct {
            crb: Crb::new(&s.sub("crb"), width + prev_seg_width, width),
            predict: Conv2d::new(&s.sub("predict"), width, 1, 3),
        }
    }

    /// Inputs are already aligned to the level resolution; `edge_gate` is
    /// the sigmoided previous edge map.
    pub fn forward(
        &self,
        fl: &Tensor<T>,
        edge_gate: &Tensor<T>,
        fs_prev: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let modulated = fl.mul(edge_gate)?.add(fl)?;
        let fe = self.crb.forward(&Tensor::cat_channels(&[&modulated, fs_prev])?, mode)?;
        let pe = self.predict.forward(&fe)?;
        Ok((fe, pe))
    }
}

/// Predicts a per-pixel scale and shift from edge features.
#[derive(Clone)]
pub struct AdaptiveNorm<T: Element> {
    sigma_crb: Crb<T>,
    sigma: Conv2d<T>,
    mu_crb: Crb<T>,
    mu: Conv2d<T>,
}

impl<T: Element> AdaptiveNorm<T> {
    /// The output convolutions start at scale 1 and shift 0 so calibration
    /// begins as the identity.
    pub fn new(s: &Scope<T>, width: usize) -> Self {
        AdaptiveNorm {
            sigma_crb: Crb::new(&s.sub("sigma_crb"), width, width),
            sigma: Conv2d::constant(&s.sub("sigma"), width, width, 3, 1.0),
            mu_crb: Crb::new(&s.sub("mu_crb"), width, width),
            mu: Conv2d::constant(&s.sub("mu"), width, width, 3, 0.0),
        }
    }

    pub fn forward(&self, fe_prev: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tensor<T>)> {
        let sigma = self.sigma.forward(&self.sigma_crb.forward(fe_prev, mode)?)?;
        let mu = self.mu.forward(&self.mu_crb.forward(fe_prev, mode)?)?;
        Ok((sigma, mu))
    }
}

/// One attentive branch of the separated calibration.
#[derive(Clone)]
pub struct CalibrationBranch<T: Element> {
    rcab: Rcab<T>,
    norm: AdaptiveNorm<T>,
}

impl<T: Element> CalibrationBranch<T> {
    pub fn new(s: &Scope<T>, width: usize, reduction: usize) -> Self {
        CalibrationBranch {
            rcab: Rcab::new(&s.sub("rcab"), width, reduction),
            norm: AdaptiveNorm::new(&s.sub("an"), width),
        }
    }

    /// Returns `(features, sigma, mu)`.
    pub fn forward(
        &self,
        fl: &Tensor<T>,
        gate: &Tensor<T>,
        fe_prev: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (sigma, mu) = self.norm.forward(fe_prev, mode)?;
        let att = self.rcab.forward(&fl.mul(gate)?.add(fl)?)?;
        Ok((sigma.mul(&att)?.add(&mu)?, sigma, mu))
    }
}

#[derive(Clone)]
pub struct SeparatedCalibration<T: Element> {
    pub foreground: CalibrationBranch<T>,
    pub background: CalibrationBranch<T>,
    predict: Conv2d<T>,
}

/// Outputs of one calibration step.
#[derive(Clone)]
pub struct CalibrationOutput<T: Element> {
    pub fg_gate: Tensor<T>,
    pub bg_gate: Tensor<T>,
    pub fsf: Tensor<T>,
    pub fsb: Tensor<T>,
    pub sigma_f: Tensor<T>,
    pub mu_f: Tensor<T>,
    pub sigma_b: Tensor<T>,
    pub mu_b: Tensor<T>,
    pub fs: Tensor<T>,
    pub ps: Tensor<T>,
}

impl<T: Element> SeparatedCalibration<T> {
    pub fn new(s: &Scope<T>, width: usize, reduction: usize) -> Self {
        SeparatedCalibration {
            foreground: CalibrationBranch::new(&s.sub("fg"), width, reduction),
            background: CalibrationBranch::new(&s.sub("bg"), width, reduction),
            predict: Conv2d::new(&s.sub("predict"), 2 * width, 1, 3),
        }
    }

    /// The same module with the two branches exchanged.
    pub fn swapped(&self) -> Self {
        SeparatedCalibration {
            foreground: self.background.clone(),
            background: self.foreground.clone(),
            predict: self.predict.clone(),
        }
    }

    /// `fg_gate` and `bg_gate` are the aligned attention masks.
    pub fn forward(
        &self,
        fl: &Tensor<T>,
        fg_gate: &Tensor<T>,
        bg_gate: &Tensor<T>,
        fe_prev: &Tensor<T>,
        mode: Mode,
    ) -> Result<CalibrationOutput<T>> {
        let (fsf, sigma_f, mu_f) = self.foreground.forward(fl, fg_gate, fe_prev, mode)?;
        let (fsb, sigma_b, mu_b) = self.background.forward(fl, bg_gate, fe_prev, mode)?;
        let fs = Tensor::cat_channels(&[&fsf, &fsb])?;
        let ps = self.predict.forward(&fs)?;
        Ok(CalibrationOutput {
            fg_gate: fg_gate.clone(),
            bg_gate: bg_gate.clone(),
            fsf,
            fsb,
            sigma_f,
            mu_f,
            sigma_b,
            mu_b,
            fs,
            ps,
        })
    }
}

/// Per-level state of the decoder.
#[derive(Clone)]
pub struct LevelState<T: Element> {
    pub fe: Tensor<T>,
    pub pe: Tensor<T>,
    pub calibration: CalibrationOutput<T>,
}

#[derive(Clone)]
pub struct DecoderOutputs<T: Element> {
    /// Segmentation logits `p_1 .. p_5` (index `k - 1`).
    pub seg: Vec<Tensor<T>>,
    /// Edge logits `p_1 .. p_4` (index `k - 1`).
    pub edge: Vec<Tensor<T>>,
    /// `p_1` resized to the input resolution, still logits.
    pub final_logits: Tensor<T>,
    /// Level states, index `k - 1`.
    pub levels: Vec<LevelState<T>>,
}

impl<T: Element> DecoderOutputs<T> {
    pub fn final_prediction(&self) -> Tensor<T> {
        self.final_logits.sigmoid()
    }
}

#[derive(Clone)]
pub struct Decoder<T: Element> {
    er: Vec<EdgeReconstruct<T>>,
    esc: Vec<SeparatedCalibration<T>>,
    flags: DecoderFlags,
    width: usize,
}

impl<T: Element> Decoder<T> {
    /// `coarse_width` is the channel count of the pooled deepest features.
    pub fn new(s: &Scope<T>, width: usize, coarse_width: usize, reduction: usize, flags: DecoderFlags) -> Self {
        let mut er = Vec::new();
        let mut esc = Vec::new();
        for k in 1..=CFC_LEVELS {
            let l = s.sub(format!("level{k}"));
            let prev_seg = if k == CFC_LEVELS { coarse_width } else { 2 * width };
            er.push(EdgeReconstruct::new(&l.sub("er"), width, prev_seg));
            esc.push(SeparatedCalibration::new(&l.sub("esc"), width, reduction));
        }
        Decoder { er, esc, flags, width }
    }

    pub fn level_modules(&self, k: usize) -> (&EdgeReconstruct<T>, &SeparatedCalibration<T>) {
        (&self.er[k - 1], &self.esc[k - 1])
    }

    /// Attention masks from previous segmentation logits at level size.
    pub fn gates(&self, ps_prev: &Tensor<T>, h: usize, w: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let fg = if self.flags.sigmoid_before_resample {
            resize_to(&ps_prev.sigmoid(), h, w)?
        } else {
            resize_to(ps_prev, h, w)?.sigmoid()
        };
        let bg = match self.flags.background_mask {
            BackgroundMask::OneMinusSigmoid => fg.one_minus(),
            BackgroundMask::SigmoidOfReversedLogits => resize_to(&ps_prev.one_minus(), h, w)?.sigmoid(),
        };
        Ok((fg, bg))
    }

    fn edge_gate(&self, pe_prev: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        Ok(if self.flags.sigmoid_before_resample {
            resize_to(&pe_prev.sigmoid(), h, w)?
        } else {
            resize_to(pe_prev, h, w)?.sigmoid()
        })
    }

    /// Runs levels 4 to 1. `fl[k - 1]` are the integrated features.
    pub fn forward(
        &self,
        fl: &[Tensor<T>],
        f5s: &Tensor<T>,
        p5s: &Tensor<T>,
        input_hw: (usize, usize),
        mode: Mode,
    ) -> Result<DecoderOutputs<T>> {
        if fl.len() != CFC_LEVELS {
            return Err(IcegError::Dimension("decoder needs four feature levels".into()));
        }
        let (b, _, h4, w4) = fl[CFC_LEVELS - 1].dims4()?;
        if p5s.shape() != [b, 1, h4, w4] {
            return Err(IcegError::Dimension(format!(
                "coarse prediction {:?} does not match the deepest level",
                p5s.shape()
            )));
        }
        let mut fe_prev = Tensor::zeros(&[b, self.width, h4, w4]);
        let mut pe_prev = Tensor::zeros(&[b, 1, h4, w4]);
        let mut fs_prev = f5s.clone();
        let mut ps_prev = p5s.clone();
        let mut levels = Vec::with_capacity(CFC_LEVELS);
        for k in (1..=CFC_LEVELS).rev() {
            let f = &fl[k - 1];
            let (_, _, h, w) = f.dims4()?;
            let fe_up = resize_to(&fe_prev, h, w)?;
            let fs_up = resize_to(&fs_prev, h, w)?;
            let (fe, pe) = self.er[k - 1].forward(f, &self.edge_gate(&pe_prev, h, w)?, &fs_up, mode)?;
            let (fg, bg) = self.gates(&ps_prev, h, w)?;
            let cal = self.esc[k - 1].forward(f, &fg, &bg, &fe_up, mode)?;
            fe_prev = fe.clone();
            pe_prev = pe.clone();
            fs_prev = cal.fs.clone();
            ps_prev = cal.ps.clone();
            levels.push(LevelState {
                fe,
                pe,
                calibration: cal,
            });
        }
        levels.reverse();
        let mut seg: Vec<Tensor<T>> = levels.iter().map(|l| l.calibration.ps.clone()).collect();
        seg.push(p5s.clone());
        let edge = levels.iter().map(|l| l.pe.clone()).collect();
        let final_logits = resize_to(&seg[0], input_hw.0, input_hw.1)?;
        Ok(DecoderOutputs {
            seg,
            edge,
            final_logits,
            levels,
        })
    }
}
