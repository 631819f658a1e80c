//! Image/mask samples, derived ground-truth auxiliaries, dataset IO and the
//! synthetic camouflage generator.

mod io;
mod synth;

pub use io::{load_dataset, quantize, read_gray, read_image, read_mask, save_dataset, write_gray, write_image, Split};
pub use synth::{synth_dataset, SynthParams};

use iceg_tensor::{Element, Tensor};

use crate::error::{IcegError, Result};

/// Number of stride-2 stages between the input and the deepest feature.
pub const DEEPEST_STRIDE: usize = 32;

/// One image/mask pair with its Gaussian-dilated edge weights.
///
/// Planes are stored row-major; the image is channel-major (3 x H x W) with
/// values in `[0, 1]`, the mask holds exactly `0.0` or `1.0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub mask: Vec<f32>,
    pub edge_weight: Vec<f32>,
}

/// Kernel of the Gaussian boundary dilation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeParams {
    pub kernel_size: usize,
    pub sigma: f64,
}

impl EdgeParams {
    /// Kernel 11 and sigma 3 at 352 pixels, scaled linearly with the side;
    /// the kernel stays odd and at least 3.
    pub fn for_side(side: usize) -> Self {
        let ratio = side as f64 / 352.0;
        let mut k = (11.0 * ratio).round() as usize;
        if k % 2 == 0 {
            k += 1;
        }
        EdgeParams {
            kernel_size: k.max(3),
            sigma: (3.0 * ratio).max(0.5),
        }
    }
}

impl Sample {
    /// Builds a sample, thresholding the mask at 0.5 and deriving the edge
    /// weights.
    pub fn new(
        id: impl Into<String>,
        height: usize,
        width: usize,
        image: Vec<f32>,
        mask: Vec<f32>,
        edge: EdgeParams,
    ) -> Result<Self> {
        let plane = height * width;
        if image.len() != 3 * plane {
            return Err(IcegError::Dimension(format!(
                "image has {} values, expected 3x{height}x{width}",
                image.len()
            )));
        }
        if mask.len() != plane {
            return Err(IcegError::Dimension(format!(
                "mask has {} values, expected {height}x{width}",
                mask.len()
            )));
        }
        let mask: Vec<f32> = mask.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
        let edge_weight = derive_edge_weight(&mask, height, width, edge.kernel_size, edge.sigma)?;
        Ok(Sample {
            id: id.into(),
            height,
            width,
            image,
            mask,
            edge_weight,
        })
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().map(|&v| v as f64).sum::<f64>() / self.mask.len() as f64
    }

    /// Mirror image of the sample about its vertical axis.
    pub fn flipped(&self) -> Sample {
        let (h, w) = (self.height, self.width);
        let flip = |plane: &[f32]| -> Vec<f32> {
            let mut out = plane.to_vec();
            for chunk in out.chunks_mut(w) {
                chunk.reverse();
            }
            let _ = h;
            out
        };
        Sample {
            id: self.id.clone(),
            height: h,
            width: w,
            image: flip(&self.image),
            mask: flip(&self.mask),
            edge_weight: flip(&self.edge_weight),
        }
    }

    /// Resamples to `size x size`: bilinear for the image, nearest for the
    /// mask, then re-derives the edge weights at the new resolution.
    pub fn resized(&self, size: usize, edge: EdgeParams) -> Result<Sample> {
        if self.height == size && self.width == size {
            return Ok(self.clone());
        }
        let img = Tensor::<f32>::from_vec(self.image.clone(), &[1, 3, self.height, self.width])?
            .resize_bilinear(size, size)?;
        let mut mask = vec![0.0f32; size * size];
        for y in 0..size {
            let sy = ((y as f64 + 0.5) * self.height as f64 / size as f64) as usize;
            for x in 0..size {
                let sx = ((x as f64 + 0.5) * self.width as f64 / size as f64) as usize;
                mask[y * size + x] = self.mask[sy.min(self.height - 1) * self.width + sx.min(self.width - 1)];
            }
        }
        Sample::new(self.id.clone(), size, size, img.to_vec(), mask, edge)
    }
}

/// One-pixel inner contour: foreground pixels with at least one
/// 4-neighbour outside the mask (pixels beyond the border count as outside).
pub fn boundary(mask: &[f32], h: usize, w: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize] >= 0.5
    };
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

/// Gaussian dilation of the mask boundary.
///
/// Each pixel takes `max exp(-d^2 / 2 sigma^2)` over boundary pixels at
/// Euclidean distance `d <= kernel_size / 2`, so the weight is exactly 1 on
/// the contour, decays with distance and is 0 outside the kernel support.
pub fn derive_edge_weight(mask: &[f32], h: usize, w: usize, kernel_size: usize, sigma: f64) -> Result<Vec<f32>> {
    if kernel_size % 2 == 0 || kernel_size == 0 {
        return Err(IcegError::Parameter(format!(
            "edge kernel size must be odd, got {kernel_size}"
        )));
    }
    if sigma <= 0.0 {
        return Err(IcegError::Parameter(format!("edge sigma must be positive, got {sigma}")));
    }
    if mask.len() != h * w {
        return Err(IcegError::Dimension(format!("mask length {} != {h}x{w}", mask.len())));
    }
    let r = (kernel_size / 2) as isize;
    let mut taps = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dy * dy + dx * dx) as f64;
            if d2 <= (r * r) as f64 {
                taps.push((dy, dx, (-d2 / (2.0 * sigma * sigma)).exp() as f32));
            }
        }
    }
    let edge = boundary(mask, h, w);
    let mut out = vec![0.0f32; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !edge[y as usize * w + x as usize] {
                continue;
            }
            for &(dy, dx, g) in &taps {
                let (py, px) = (y + dy, x + dx);
                if py < 0 || px < 0 || py >= h as isize || px >= w as isize {
                    continue;
                }
                let o = &mut out[py as usize * w + px as usize];
                if g > *o {
                    *o = g;
                }
            }
        }
    }
    Ok(out)
}

/// Mean of each `factor x factor` block; soft values are kept.
pub fn area_downsample(plane: &[f32], h: usize, w: usize, factor: usize) -> Result<Vec<f32>> {
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(IcegError::Dimension(format!(
            "{h}x{w} is not divisible by {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0f32; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0f64;
            for y in oy * factor..(oy + 1) * factor {
                for x in ox * factor..(ox + 1) * factor {
                    acc += plane[y * w + x] as f64;
                }
            }
            out[oy * ow + ox] = (acc * inv) as f32;
        }
    }
    Ok(out)
}

/// Mean foreground colour and edge-weighted mean colour of an image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImagePrototypes {
    pub object: [f64; 3],
    pub edge: [f64; 3],
}

pub fn compute_image_prototypes(image: &[f32], mask: &[f32], edge_weight: &[f32]) -> Result<ImagePrototypes> {
    let plane = mask.len();
    if image.len() != 3 * plane || edge_weight.len() != plane {
        return Err(IcegError::Dimension("prototype inputs disagree in size".into()));
    }
    let fg: f64 = mask.iter().map(|&v| v as f64).sum();
    if fg <= 0.0 {
        return Err(IcegError::DegenerateMask("prototype of an empty foreground".into()));
    }
    let ew: f64 = edge_weight.iter().map(|&v| v as f64).sum();
    let mut proto = ImagePrototypes {
        object: [0.0; 3],
        edge: [0.0; 3],
    };
    for c in 0..3 {
        let ch = &image[c * plane..(c + 1) * plane];
        proto.object[c] = ch.iter().zip(mask).map(|(&x, &m)| x as f64 * m as f64).sum::<f64>() / fg;
        proto.edge[c] = if ew > 0.0 {
            ch.iter().zip(edge_weight).map(|(&x, &e)| x as f64 * e as f64).sum::<f64>() / ew
        } else {
            0.0
        };
    }
    Ok(proto)
}

/// Ground truth of one batch on the autograd side.
#[derive(Clone, Debug)]
pub struct GroundTruthBundle<T: Element> {
    /// `B x 1 x H x W` binary mask.
    pub mask: Tensor<T>,
    /// `B x 1 x H x W` edge weights.
    pub edge_weight: Tensor<T>,
    /// `B x 1 x H/32 x W/32` area-averaged mask.
    pub mask_down: Tensor<T>,
    /// All-zero mask shaped like `mask`.
    pub zero_mask: Tensor<T>,
}

/// Stacked images plus ground truth.
#[derive(Clone, Debug)]
pub struct Batch<T: Element> {
    pub ids: Vec<String>,
    pub images: Tensor<T>,
    pub gt: GroundTruthBundle<T>,
}

fn to_elem<T: Element>(v: &[f32]) -> impl Iterator<Item = T> + '_ {
    v.iter().map(|&x| T::from_f64(x as f64))
}

impl<T: Element> Batch<T> {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| IcegError::Parameter("empty batch".into()))?;
        let (h, w) = (first.height, first.width);
        if h % DEEPEST_STRIDE != 0 || w % DEEPEST_STRIDE != 0 {
            return Err(IcegError::Dimension(format!(
                "{h}x{w} input is not divisible by {DEEPEST_STRIDE}"
            )));
        }
        let b = samples.len();
        let mut images = Vec::with_capacity(b * 3 * h * w);
        let mut masks = Vec::with_capacity(b * h * w);
        let mut edges = Vec::with_capacity(b * h * w);
        let mut down = Vec::new();
        for s in samples {
            if (s.height, s.width) != (h, w) {
                return Err(IcegError::Dimension(format!(
                    "sample {} is {}x{}, batch is {h}x{w}",
                    s.id, s.height, s.width
                )));
            }
            images.extend(to_elem::<T>(&s.image));
            masks.extend(to_elem::<T>(&s.mask));
            edges.extend(to_elem::<T>(&s.edge_weight));
            down.extend(to_elem::<T>(&area_downsample(&s.mask, h, w, DEEPEST_STRIDE)?));
        }
        let (dh, dw) = (h / DEEPEST_STRIDE, w / DEEPEST_STRIDE);
        Ok(Batch {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            images: Tensor::from_vec(images, &[b, 3, h, w])?,
            gt: GroundTruthBundle {
                mask: Tensor::from_vec(masks, &[b, 1, h, w])?,
                edge_weight: Tensor::from_vec(edges, &[b, 1, h, w])?,
                mask_down: Tensor::from_vec(down, &[b, 1, dh, dw])?,
                zero_mask: Tensor::zeros(&[b, 1, h, w]),
            },
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Same ground truth with different input images (e.g. generated ones).
    pub fn with_images(&self, images: Tensor<T>) -> Batch<T> {
        Batch {
            ids: self.ids.clone(),
            images,
            gt: self.gt.clone(),
        }
    }
}
