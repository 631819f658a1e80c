//! Supervision terms for the detector and the camouflage generator.
//!
//! Segmentation losses take logits. Per-sample values are averaged over the
//! batch, so every loss is invariant to the order of samples.

use iceg_tensor::{Element, Tensor};
use serde::Serialize;

use crate::cfc::consistency_loss;
use crate::config::LossConfig;
use crate::data::GroundTruthBundle;
use crate::error::{IcegError, Result};
use crate::model::DetectorOutput;

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(IcegError::Dimension(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Boundary-emphasis weights `1 + 5 |avgpool(y) - y|` with a stride-1 window
/// (zero padding counted in the mean).
pub fn boundary_weight<T: Element>(target: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    if window % 2 == 0 {
        return Err(IcegError::Parameter(format!("pool window must be odd, got {window}")));
    }
    let t = target.detach();
    let pooled = t.avg_pool2d(window, 1, window / 2)?;
    let d: Vec<T> = pooled
        .data()
        .iter()
        .zip(t.data())
        .map(|(&p, &y)| T::ONE + T::from_f64(5.0) * (p - y).abs())
        .collect();
    Ok(Tensor::from_vec(d, target.shape())?)
}

fn per_sample_sum<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(x.sum_keep(&[1, 2, 3])?)
}

/// `sum(w * bce) / sum(w)` per sample, averaged over the batch.
pub fn weighted_bce<T: Element>(logits: &Tensor<T>, target: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(logits, target, "weighted BCE target")?;
    same_shape(logits, weight, "weighted BCE weight")?;
    let num = per_sample_sum(&logits.bce_with_logits(target)?.mul(weight)?)?;
    let den = per_sample_sum(&weight.detach())?;
    Ok(num.div(&den)?.mean_all())
}

/// `1 - (sum w p t + 1) / (sum w (p + t - p t) + 1)` per sample.
pub fn weighted_iou<T: Element>(logits: &Tensor<T>, target: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(logits, target, "weighted IoU target")?;
    same_shape(logits, weight, "weighted IoU weight")?;
    let p = logits.sigmoid();
    let pt = p.mul(target)?;
    let inter = per_sample_sum(&pt.mul(weight)?)?.add_scalar(1.0);
    let union = per_sample_sum(&p.add(target)?.sub(&pt)?.mul(weight)?)?.add_scalar(1.0);
    Ok(inter.div(&union)?.one_minus().mean_all())
}

/// `1 - (2 sum p t + 1) / (sum p + sum t + 1)` per sample; soft targets allowed.
pub fn dice_loss<T: Element>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(logits, target, "dice target")?;
    let p = logits.sigmoid();
    let inter = per_sample_sum(&p.mul(target)?)?.scale(2.0).add_scalar(1.0);
    let total = per_sample_sum(&p)?.add(&per_sample_sum(target)?)?.add_scalar(1.0);
    Ok(inter.div(&total)?.one_minus().mean_all())
}

/// Area-average of `target` to the spatial size of `like`.
pub fn area_resample<T: Element>(target: &Tensor<T>, like: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = target.dims4()?;
    let (_, _, lh, lw) = like.dims4()?;
    if (lh, lw) == (h, w) {
        return Ok(target.detach());
    }
    if lh == 0 || h % lh != 0 || w % lw != 0 || h / lh != w / lw {
        return Err(IcegError::Dimension(format!(
            "cannot area-resample {h}x{w} to {lh}x{lw}"
        )));
    }
    let f = h / lh;
    Ok(target.detach().avg_pool2d(f, f, 0)?)
}

/// Weight of deep-supervision level `k` (1-based): `1 / 2^(k-1)`.
pub fn level_weight(k: usize) -> f64 {
    1.0 / (1u64 << (k - 1)) as f64
}

/// Deep-supervised weighted BCE + IoU.
pub struct SegmentationLoss<T: Element> {
    pub total: Tensor<T>,
    pub wbce: f64,
    pub wiou: f64,
}

/// `sum_k 2^-(k-1) (wBCE + wIoU)` over the five segmentation maps, each
/// compared with the area-averaged mask at its own resolution.
pub fn segmentation_loss<T: Element>(maps: &[Tensor<T>], mask: &Tensor<T>, window: usize) -> Result<SegmentationLoss<T>> {
    if maps.len() != 5 {
        return Err(IcegError::Parameter(format!("expected 5 segmentation maps, got {}", maps.len())));
    }
    deep_supervision(maps, mask, window)
}

fn deep_supervision<T: Element>(maps: &[Tensor<T>], mask: &Tensor<T>, window: usize) -> Result<SegmentationLoss<T>> {
    let mut total: Option<Tensor<T>> = None;
    let (mut wbce, mut wiou) = (0.0, 0.0);
    for (i, p) in maps.iter().enumerate() {
        let y = area_resample(mask, p)?;
        let w = boundary_weight(&y, window)?;
        let b = weighted_bce(p, &y, &w)?;
        let u = weighted_iou(p, &y, &w)?;
        let lw = level_weight(i + 1);
        wbce += lw * b.item().to_f64();
        wiou += lw * u.item().to_f64();
        let term = b.add(&u)?.scale(lw);
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(SegmentationLoss {
        total: total.ok_or_else(|| IcegError::Parameter("no maps".into()))?,
        wbce,
        wiou,
    })
}

/// `sum_k 2^-(k-1) dice(p_k, y_e)` over the four edge maps.
pub fn edge_loss<T: Element>(maps: &[Tensor<T>], edge_weight: &Tensor<T>) -> Result<Tensor<T>> {
    if maps.len() != 4 {
        return Err(IcegError::Parameter(format!("expected 4 edge maps, got {}", maps.len())));
    }
    let mut total: Option<Tensor<T>> = None;
    for (i, p) in maps.iter().enumerate() {
        let term = dice_loss(p, &area_resample(edge_weight, p)?)?.scale(level_weight(i + 1));
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("four maps"))
}

/// Mean squared difference over background elements only.
pub fn fidelity_loss<T: Element>(xg: &Tensor<T>, x: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(xg, x, "fidelity")?;
    let (_, c, _, _) = xg.dims4()?;
    let bg = mask.detach().one_minus();
    let count: f64 = bg.data().iter().map(|v| v.to_f64()).sum::<f64>() * c as f64;
    let diff = xg.sub(&x.detach())?.mul(&bg)?;
    Ok(diff.square().sum_all().scale(1.0 / count.max(1.0)))
}

/// Masked colour prototypes of each sample, as `B x 3 x 1 x 1` constants,
/// with the per-sample masses.
fn colour_prototypes<T: Element>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<(Tensor<T>, Vec<f64>)> {
    let (b, c, h, w) = x.dims4()?;
    let plane = h * w;
    let (xd, wd) = (x.data(), weight.data());
    let mut proto = vec![T::ZERO; b * c];
    let mut mass = Vec::with_capacity(b);
    for bi in 0..b {
        let wk = &wd[bi * plane..(bi + 1) * plane];
        let m: f64 = wk.iter().map(|v| v.to_f64()).sum();
        mass.push(m);
        for ci in 0..c {
            let ch = &xd[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
            let s: f64 = ch.iter().zip(wk).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
            proto[bi * c + ci] = T::from_f64(if m > 0.0 { s / m } else { 0.0 });
        }
    }
    Ok((Tensor::from_vec(proto, &[b, c, 1, 1])?, mass))
}

/// Weighted spread `sum_p m_p |x_p - P|^2 / (C sum m)` per sample around a
/// detached prototype, summed with per-sample coefficients.
fn weighted_spread<T: Element>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<(Tensor<T>, usize)> {
    let (b, c, _, _) = x.dims4()?;
    let (proto, mass) = colour_prototypes(&x.detach(), weight)?;
    let valid = mass.iter().filter(|&&m| m > 0.0).count();
    let coef: Vec<T> = mass
        .iter()
        .map(|&m| T::from_f64(if m > 0.0 { 1.0 / (m * c as f64 * valid as f64) } else { 0.0 }))
        .collect();
    let spread = per_sample_sum(&x.sub(&proto)?.square().mul(weight)?)?;
    Ok((spread.mul(&Tensor::from_vec(coef, &[b, 1, 1, 1])?)?.sum_all(), b - valid))
}

/// Concealment value and the number of samples without foreground.
pub struct ConcealmentLoss<T: Element> {
    pub loss: Tensor<T>,
    pub skipped: usize,
}

/// Spread of the generated foreground around its mean colour plus the
/// edge-weighted spread around the edge colour; both prototypes come from
/// the generated image itself and are held constant.
pub fn concealment_loss<T: Element>(xg: &Tensor<T>, gt: &GroundTruthBundle<T>) -> Result<ConcealmentLoss<T>> {
    let (obj, skipped) = weighted_spread(xg, &gt.mask.detach())?;
    let (edge, _) = weighted_spread(xg, &gt.edge_weight.detach())?;
    Ok(ConcealmentLoss {
        loss: obj.add(&edge)?,
        skipped,
    })
}

/// Weighted BCE + IoU against an all-zero target.
pub fn adversarial_gen_loss<T: Element>(maps: &[Tensor<T>], zero: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    Ok(deep_supervision(maps, zero, window)?.total)
}

/// Named scalar losses of one step. Terms that were not computed are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub wbce: f64,
    pub wiou: f64,
    pub dice: f64,
    pub seg: f64,
    pub edge: f64,
    pub cc: f64,
    pub total: f64,
    pub fidelity: f64,
    pub conceal: f64,
    pub adv_gen: f64,
    pub gen_total: f64,
    pub det_adv: f64,
    pub lambda: f64,
    pub beta: f64,
}

fn scalar<T: Element>(t: &Tensor<T>) -> f64 {
    t.item().to_f64()
}

/// Detector objective `L_s + L_e + beta L_cc`.
pub fn detector_total<T: Element>(
    out: &DetectorOutput<T>,
    gt: &GroundTruthBundle<T>,
    cfg: &LossConfig,
    window: usize,
) -> Result<(Tensor<T>, LossReport)> {
    let seg = segmentation_loss(&out.decoder.seg, &gt.mask, window)?;
    let edge = edge_loss(&out.decoder.edge, &gt.edge_weight)?;
    let mut total = seg.total.add(&edge)?;
    let mut cc_value = 0.0;
    if cfg.beta > 0.0 {
        let cc = consistency_loss(out.fl4(), &gt.mask_down)?;
        cc_value = scalar(&cc.loss);
        total = total.add(&cc.loss.scale(cfg.beta))?;
    }
    let report = LossReport {
        wbce: seg.wbce,
        wiou: seg.wiou,
        dice: scalar(&edge),
        seg: scalar(&seg.total),
        edge: scalar(&edge),
        cc: cc_value,
        total: scalar(&total),
        lambda: cfg.lambda,
        beta: cfg.beta,
        ..LossReport::default()
    };
    Ok((total, report))
}

/// Weighted BCE + IoU of the final prediction against the true mask.
pub fn detector_adversarial<T: Element>(
    out: &DetectorOutput<T>,
    gt: &GroundTruthBundle<T>,
    window: usize,
) -> Result<(Tensor<T>, LossReport)> {
    let y = &gt.mask;
    let w = boundary_weight(y, window)?;
    let l = weighted_bce(out.final_logits(), y, &w)?.add(&weighted_iou(out.final_logits(), y, &w)?)?;
    let report = LossReport {
        det_adv: scalar(&l),
        ..LossReport::default()
    };
    Ok((l, report))
}

/// Generator objective `L_s^a + mu L_f + lambda L_cl` (mu is
/// `fidelity_weight`, 1 by default) for detector outputs on
/// the generated images.
pub fn generator_objective<T: Element>(
    xg: &Tensor<T>,
    x: &Tensor<T>,
    out: &DetectorOutput<T>,
    gt: &GroundTruthBundle<T>,
    cfg: &LossConfig,
    window: usize,
) -> Result<(Tensor<T>, LossReport)> {
    if cfg.lambda < 0.0 {
        return Err(IcegError::Config("lambda must be non-negative".into()));
    }
    let adv = if cfg.adv_all_maps {
        adversarial_gen_loss(&out.decoder.seg, &gt.zero_mask, window)?
    } else {
        adversarial_gen_loss(std::slice::from_ref(out.final_logits()), &gt.zero_mask, window)?
    };
    let fid = fidelity_loss(xg, x, &gt.mask)?;
    let conceal = concealment_loss(xg, gt)?;
    let total = adv.add(&fid.scale(cfg.fidelity_weight))?.add(&conceal.loss.scale(cfg.lambda))?;
    let report = LossReport {
        fidelity: scalar(&fid),
        conceal: scalar(&conceal.loss),
        adv_gen: scalar(&adv),
        gen_total: scalar(&total),
        lambda: cfg.lambda,
        beta: cfg.beta,
        ..LossReport::default()
    };
    Ok((total, report))
}
