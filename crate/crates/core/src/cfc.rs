//! Feature coherence stage: per-level multi-scale aggregation, top-down
//! contextual aggregation with attention, integration, and the consistency
//! loss that pulls foreground features toward their own prototype.
//!
//! Vectors in this module are indexed by `k - 1` for pyramid levels
//! `k = 1..=4`.

use iceg_tensor::{Element, Scope, Tensor};

use crate::error::{IcegError, Result};
use crate::nn::{resize_to, ChannelAttention, Conv2d, Crb, Mode, SpatialAttention};

pub const CFC_LEVELS: usize = 4;
const NORM_EPS: f64 = 1e-12;

/// Intermediate maps of one intra-layer aggregation.
#[derive(Clone)]
pub struct IntraLayerFeatures<T: Element> {
    pub reduced: Tensor<T>,
    pub f3: Tensor<T>,
    pub f5: Tensor<T>,
    pub f35: Tensor<T>,
    pub fa: Tensor<T>,
}

/// 3x3 and 5x5 branches over a channel-reduced input, their cross-scale
/// product, and a CRB fusion added back onto the reduced input.
#[derive(Clone)]
pub struct Ifa<T: Element> {
    reduce: Conv2d<T>,
    conv3: Conv2d<T>,
    conv5: Conv2d<T>,
    cross3: Conv2d<T>,
    cross5: Conv2d<T>,
    fuse: Crb<T>,
}

impl<T: Element> Ifa<T> {
    pub fn new(s: &Scope<T>, cin: usize, width: usize) -> Self {
        Ifa {
            reduce: Conv2d::new(&s.sub("reduce"), cin, width, 1),
            conv3: Conv2d::new(&s.sub("conv3"), width, width, 3),
            conv5: Conv2d::new(&s.sub("conv5"), width, width, 5),
            cross3: Conv2d::new(&s.sub("cross3"), 2 * width, width, 3),
            cross5: Conv2d::new(&s.sub("cross5"), 2 * width, width, 5),
            fuse: Crb::new(&s.sub("fuse"), 3 * width, width),
        }
    }

    pub fn forward(&self, fk: &Tensor<T>, mode: Mode) -> Result<IntraLayerFeatures<T>> {
        let reduced = self.reduce.forward(fk)?;
        let f3 = self.conv3.forward(&reduced)?;
        let f5 = self.conv5.forward(&reduced)?;
        let both = Tensor::cat_channels(&[&f3, &f5])?;
        let f35 = self.cross3.forward(&both)?.mul(&self.cross5.forward(&both)?)?;
        let fused = self.fuse.forward(&Tensor::cat_channels(&[&f3, &f5, &f35])?, mode)?;
        let fa = reduced.add(&fused)?;
        Ok(IntraLayerFeatures {
            reduced,
            f3,
            f5,
            f35,
            fa,
        })
    }
}

/// Top-down recursion: the deepest level passes through unchanged; every
/// shallower level fuses the upsampled deeper context with its own
/// aggregated features, then applies channel and spatial attention.
#[derive(Clone)]
pub struct Cfa<T: Element> {
    levels: Vec<(Conv2d<T>, ChannelAttention<T>, SpatialAttention<T>)>,
}

impl<T: Element> Cfa<T> {
    pub fn new(s: &Scope<T>, width: usize, reduction: usize) -> Self {
        let levels = (1..CFC_LEVELS)
            .map(|k| {
                let l = s.sub(format!("level{k}"));
                (
                    Conv2d::new(&l.sub("conv"), 2 * width, width, 3),
                    ChannelAttention::new(&l.sub("ca"), width, reduction),
                    SpatialAttention::new(&l.sub("sa")),
                )
            })
            .collect();
        Cfa { levels }
    }

    pub fn forward(&self, fa: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        if fa.len() != CFC_LEVELS {
            return Err(IcegError::Dimension(format!("expected {CFC_LEVELS} levels, got {}", fa.len())));
        }
        let mut fc = vec![fa[CFC_LEVELS - 1].clone()];
        for k in (1..CFC_LEVELS).rev() {
            let (_, _, h, w) = fa[k - 1].dims4()?;
            let up = resize_to(fc.last().expect("non-empty"), h, w)?;
            let (conv, ca, sa) = &self.levels[k - 1];
            let x = conv.forward(&Tensor::cat_channels(&[&up, &fa[k - 1]])?)?;
            fc.push(sa.forward(&ca.forward(&x)?)?);
        }
        fc.reverse();
        Ok(fc)
    }
}

/// 1x1 fusion of aggregated and contextual features; the deepest level is
/// passed through.
#[derive(Clone)]
pub struct Integrate<T: Element> {
    convs: Vec<Conv2d<T>>,
}

impl<T: Element> Integrate<T> {
    pub fn new(s: &Scope<T>, width: usize) -> Self {
        Integrate {
            convs: (1..CFC_LEVELS)
                .map(|k| Conv2d::new(&s.sub(format!("level{k}")), 2 * width, width, 1))
                .collect(),
        }
    }

    pub fn forward(&self, fa: &[Tensor<T>], fc: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        if fa.len() != CFC_LEVELS || fc.len() != CFC_LEVELS {
            return Err(IcegError::Dimension("integration needs four levels".into()));
        }
        let mut fl = Vec::with_capacity(CFC_LEVELS);
        for (k, conv) in self.convs.iter().enumerate() {
            fl.push(conv.forward(&Tensor::cat_channels(&[&fa[k], &fc[k]])?)?);
        }
        fl.push(fa[CFC_LEVELS - 1].clone());
        Ok(fl)
    }
}

#[derive(Clone)]
pub struct CfcOutput<T: Element> {
    pub intra: Vec<IntraLayerFeatures<T>>,
    pub fa: Vec<Tensor<T>>,
    pub fc: Vec<Tensor<T>>,
    pub fl: Vec<Tensor<T>>,
}

#[derive(Clone)]
pub struct Cfc<T: Element> {
    ifa: Vec<Ifa<T>>,
    cfa: Cfa<T>,
    integrate: Integrate<T>,
}

impl<T: Element> Cfc<T> {
    /// `channels[k - 1]` is the encoder width of level `k`.
    pub fn new(s: &Scope<T>, channels: &[usize], width: usize, reduction: usize) -> Self {
        Cfc {
            ifa: channels
                .iter()
                .enumerate()
                .map(|(i, &c)| Ifa::new(&s.sub(format!("ifa{}", i + 1)), c, width))
                .collect(),
            cfa: Cfa::new(&s.sub("cfa"), width, reduction),
            integrate: Integrate::new(&s.sub("integrate"), width),
        }
    }

    /// `features[k - 1]` is encoder level `k`.
    pub fn forward(&self, features: &[Tensor<T>], mode: Mode) -> Result<CfcOutput<T>> {
        if features.len() != CFC_LEVELS {
            return Err(IcegError::Dimension(format!(
                "expected {CFC_LEVELS} encoder levels, got {}",
                features.len()
            )));
        }
        let intra = self
            .ifa
            .iter()
            .zip(features)
            .map(|(m, f)| m.forward(f, mode))
            .collect::<Result<Vec<_>>>()?;
        let fa: Vec<Tensor<T>> = intra.iter().map(|i| i.fa.clone()).collect();
        let fc = self.cfa.forward(&fa)?;
        let fl = self.integrate.forward(&fa, &fc)?;
        Ok(CfcOutput { intra, fa, fc, fl })
    }
}

/// Masked channel means of `features` per sample, as constants.
///
/// Returns `B x C x 1 x 1` prototypes for weights `mask` and `1 - mask`,
/// plus the foreground mass of each sample.
pub fn feature_prototypes<T: Element>(
    features: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<f64>)> {
    let (b, c, h, w) = features.dims4()?;
    let plane = h * w;
    if mask.shape() != [b, 1, h, w] {
        return Err(IcegError::Dimension(format!(
            "mask {:?} does not match features {:?}",
            mask.shape(),
            features.shape()
        )));
    }
    let (f, m) = (features.data(), mask.data());
    let mut fg = vec![T::ZERO; b * c];
    let mut bg = vec![T::ZERO; b * c];
    let mut mass = Vec::with_capacity(b);
    for bi in 0..b {
        let mk = &m[bi * plane..(bi + 1) * plane];
        let mf: f64 = mk.iter().map(|v| v.to_f64()).sum();
        let mb = plane as f64 - mf;
        mass.push(mf);
        for ci in 0..c {
            let ch = &f[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
            let (mut sf, mut sb) = (0.0, 0.0);
            for (x, wt) in ch.iter().zip(mk) {
                sf += x.to_f64() * wt.to_f64();
                sb += x.to_f64() * (1.0 - wt.to_f64());
            }
            fg[bi * c + ci] = T::from_f64(if mf > 0.0 { sf / mf } else { 0.0 });
            bg[bi * c + ci] = T::from_f64(if mb > 0.0 { sb / mb } else { 0.0 });
        }
    }
    Ok((
        Tensor::from_vec(fg, &[b, c, 1, 1])?,
        Tensor::from_vec(bg, &[b, c, 1, 1])?,
        mass,
    ))
}

/// Consistency loss value and the number of samples skipped because their
/// foreground mass was zero.
#[derive(Clone)]
pub struct ConsistencyLoss<T: Element> {
    pub loss: Tensor<T>,
    pub skipped: usize,
}

/// Signed contrast between the distance of masked features to the object
/// prototype and to the background prototype.
///
/// Features are L2-normalised per pixel and the prototypes are detached.
/// For each sample the loss is the `mask`-weighted mean over pixels of
/// `|m f - P_o|^2 - |m f - P_b|^2`; samples are then averaged. The value is
/// negative whenever the foreground sits closer to its own prototype.
pub fn consistency_loss<T: Element>(fl4: &Tensor<T>, mask_down: &Tensor<T>) -> Result<ConsistencyLoss<T>> {
    let f = fl4.l2_normalize_channels(NORM_EPS)?;
    let (po, pb, mass) = feature_prototypes(&f.detach(), mask_down)?;
    let b = mass.len();
    let valid = mass.iter().filter(|&&m| m > 0.0).count();
    let coef: Vec<T> = mass
        .iter()
        .map(|&m| T::from_f64(if m > 0.0 { 1.0 / (m * valid as f64) } else { 0.0 }))
        .collect();
    let masked = f.mul(mask_down)?;
    let d_obj = masked.sub(&po)?.square().sum_keep(&[1])?;
    let d_bg = masked.sub(&pb)?.square().sum_keep(&[1])?;
    let per_sample = d_obj.sub(&d_bg)?.mul(mask_down)?.sum_keep(&[1, 2, 3])?;
    let loss = per_sample.mul(&Tensor::from_vec(coef, &[b, 1, 1, 1])?)?.sum_all();
    Ok(ConsistencyLoss {
        loss,
        skipped: b - valid,
    })
}

/// Mean over samples of the trace of the mask-weighted covariance of the
/// L2-normalised foreground features.
pub fn foreground_covariance_trace<T: Element>(fl4: &Tensor<T>, mask_down: &Tensor<T>) -> Result<f64> {
    let f = fl4.detach().l2_normalize_channels(NORM_EPS)?;
    let (po, _, mass) = feature_prototypes(&f, mask_down)?;
    let (b, c, h, w) = f.dims4()?;
    let plane = h * w;
    let (x, m, mu) = (f.data(), mask_down.data(), po.data());
    let (mut total, mut n) = (0.0, 0usize);
    for bi in 0..b {
        if mass[bi] <= 0.0 {
            continue;
        }
        let mut tr = 0.0;
        for ci in 0..c {
            let mean = mu[bi * c + ci].to_f64();
            for p in 0..plane {
                let d = x[(bi * c + ci) * plane + p].to_f64() - mean;
                tr += m[bi * plane + p].to_f64() * d * d;
            }
        }
        total += tr / mass[bi];
        n += 1;
    }
    if n == 0 {
        return Err(IcegError::DegenerateMask("no sample has foreground".into()));
    }
    Ok(total / n as f64)
}
