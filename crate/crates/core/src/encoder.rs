//! Five-level residual backbone and the coarse prediction head.
//!
//! Level `k` has resolution `H / 2^(k+1)`. Level 0 is produced for
//! completeness; only levels 1 to 4 feed the aggregation stage.

use iceg_tensor::{Element, Scope, Tensor};

use crate::config::{EncoderConfig, EncoderKind};
use crate::error::{IcegError, Result};
use crate::nn::{Aspp, BatchNorm2d, Conv2d, Mode};

pub const LEVELS: usize = 5;

/// Encoder outputs `f_0 .. f_4`, finest first.
#[derive(Clone)]
pub struct FeaturePyramid<T: Element> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Element> FeaturePyramid<T> {
    pub fn level(&self, k: usize) -> &Tensor<T> {
        &self.levels[k]
    }

    pub fn deepest(&self) -> &Tensor<T> {
        &self.levels[LEVELS - 1]
    }
}

#[derive(Clone)]
struct BasicBlock<T: Element> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    shortcut: Option<(Conv2d<T>, BatchNorm2d<T>)>,
}

impl<T: Element> BasicBlock<T> {
    fn new(s: &Scope<T>, cin: usize, cout: usize, stride: usize) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::strided(&s.sub("proj"), cin, cout, 1, stride),
                BatchNorm2d::new(&s.sub("proj_bn"), cout),
            )
        });
        BasicBlock {
            conv1: Conv2d::strided(&s.sub("conv1"), cin, cout, 3, stride),
            bn1: BatchNorm2d::new(&s.sub("bn1"), cout),
            conv2: Conv2d::new(&s.sub("conv2"), cout, cout, 3),
            bn2: BatchNorm2d::new(&s.sub("bn2"), cout),
            shortcut,
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu();
        let h = self.bn2.forward(&self.conv2.forward(&h)?, mode)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok(h.add(&skip)?.relu())
    }
}

/// Stride-2 stem followed by four residual stages of two blocks each.
#[derive(Clone)]
pub struct Encoder<T: Element> {
    stem: Conv2d<T>,
    stem_bn: BatchNorm2d<T>,
    stages: Vec<[BasicBlock<T>; 2]>,
    channels: [usize; LEVELS],
}

impl<T: Element> Encoder<T> {
    pub fn new(s: &Scope<T>, cfg: &EncoderConfig) -> Self {
        match cfg.kind {
            EncoderKind::Desk => {}
        }
        let c = cfg.channels;
        let stages = (1..LEVELS)
            .map(|k| {
                let st = s.sub(format!("stage{k}"));
                [
                    BasicBlock::new(&st.sub("block0"), c[k - 1], c[k], 2),
                    BasicBlock::new(&st.sub("block1"), c[k], c[k], 1),
                ]
            })
            .collect();
        Encoder {
            stem: Conv2d::strided(&s.sub("stem"), 3, c[0], 3, 2),
            stem_bn: BatchNorm2d::new(&s.sub("stem_bn"), c[0]),
            stages,
            channels: c,
        }
    }

    pub fn channels(&self) -> [usize; LEVELS] {
        self.channels
    }

    pub fn extract(&self, image: &Tensor<T>, mode: Mode) -> Result<FeaturePyramid<T>> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(IcegError::Dimension(format!("expected 3 image channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(IcegError::Dimension(format!(
                "{h}x{w} input is not divisible by 32"
            )));
        }
        let mut x = self.stem_bn.forward(&self.stem.forward(image)?, mode)?.relu();
        let mut levels = vec![x.clone()];
        for [a, b] in &self.stages {
            x = b.forward(&a.forward(&x, mode)?, mode)?;
            levels.push(x.clone());
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Pooling pyramid over the deepest level plus a 3x3 projection to one
/// channel of logits at the same resolution.
#[derive(Clone)]
pub struct CoarseHead<T: Element> {
    aspp: Aspp<T>,
    predict: Conv2d<T>,
}

impl<T: Element> CoarseHead<T> {
    pub fn new(s: &Scope<T>, cin: usize, width: usize, dilations: &[usize]) -> Self {
        CoarseHead {
            aspp: Aspp::new(&s.sub("aspp"), cin, width, dilations),
            predict: Conv2d::new(&s.sub("predict"), width, 1, 3),
        }
    }

    /// Returns the pooled features and the coarse logits.
    pub fn forward(&self, f4: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tensor<T>)> {
        let f5s = self.aspp.forward(f4, mode)?;
        let p5s = self.predict.forward(&f5s)?;
        Ok((f5s, p5s))
    }
}
