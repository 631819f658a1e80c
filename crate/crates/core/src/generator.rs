//! Residual U-Net that predicts an additive change to the input image.

use iceg_tensor::{Element, ParamStore, Scope, Tensor};

use crate::config::GeneratorConfig;
use crate::error::{IcegError, Result};
use crate::nn::{resample, Conv2d};

#[derive(Clone)]
struct ResBlock<T: Element> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
}

impl<T: Element> ResBlock<T> {
    fn new(s: &Scope<T>, c: usize) -> Self {
        ResBlock {
            conv1: Conv2d::new(&s.sub("conv1"), c, c, 3),
            conv2: Conv2d::new(&s.sub("conv2"), c, c, 3),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv2.forward(&self.conv1.forward(x)?.relu())?;
        Ok(h.add(x)?.relu())
    }
}

pub struct Generator<T: Element> {
    store: ParamStore<T>,
    inc: Conv2d<T>,
    enc: [ResBlock<T>; 3],
    down: [Conv2d<T>; 3],
    bottleneck: ResBlock<T>,
    up: [Conv2d<T>; 3],
    head: Conv2d<T>,
}

impl<T: Element> Generator<T> {
    /// The output head starts at zero, so a fresh generator returns its
    /// input unchanged.
    pub fn new(cfg: &GeneratorConfig, seed: u64) -> Self {
        let store = ParamStore::new(seed);
        let s = store.root();
        let [w0, w1, w2] = cfg.widths;
        Generator {
            inc: Conv2d::new(&s.sub("inc"), 3, w0, 3),
            enc: [
                ResBlock::new(&s.sub("enc0"), w0),
                ResBlock::new(&s.sub("enc1"), w1),
                ResBlock::new(&s.sub("enc2"), w2),
            ],
            down: [
                Conv2d::strided(&s.sub("down1"), w0, w1, 3, 2),
                Conv2d::strided(&s.sub("down2"), w1, w2, 3, 2),
                Conv2d::strided(&s.sub("down3"), w2, w2, 3, 2),
            ],
            bottleneck: ResBlock::new(&s.sub("bottleneck"), w2),
            up: [
                Conv2d::new(&s.sub("up1"), w1 + w0, w0, 3),
                Conv2d::new(&s.sub("up2"), w2 + w1, w1, 3),
                Conv2d::new(&s.sub("up3"), w2 + w2, w2, 3),
            ],
            head: Conv2d::constant(&s.sub("head"), w0, 3, 3, 0.0),
            store,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    /// The additive change before clamping.
    pub fn delta(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(IcegError::Dimension(format!("expected 3 image channels, got {c}")));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(IcegError::Dimension(format!("{h}x{w} input is not divisible by 8")));
        }
        let s0 = self.enc[0].forward(&self.inc.forward(x)?.relu())?;
        let s1 = self.enc[1].forward(&self.down[0].forward(&s0)?.relu())?;
        let s2 = self.enc[2].forward(&self.down[1].forward(&s1)?.relu())?;
        let mut y = self.bottleneck.forward(&self.down[2].forward(&s2)?.relu())?;
        for (skip, up) in [&s2, &s1, &s0].into_iter().zip(self.up.iter().rev()) {
            let u = resample(&y, 2, 1)?;
            y = up.forward(&Tensor::cat_channels(&[&u, skip])?)?.relu();
        }
        self.head.forward(&y)
    }

    /// `clamp(x + delta(x), 0, 1)`.
    pub fn generate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.add(&self.delta(x)?)?.clamp(0.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_generator_is_identity() {
        let g = Generator::<f32>::new(&GeneratorConfig { widths: [4, 8, 8] }, 0);
        let x = Tensor::from_vec((0..3 * 32 * 32).map(|i| (i % 97) as f32 / 96.0).collect(), &[1, 3, 32, 32]).unwrap();
        let y = g.generate(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn rejects_indivisible_input() {
        let g = Generator::<f32>::new(&GeneratorConfig { widths: [4, 8, 8] }, 0);
        assert!(matches!(g.generate(&Tensor::zeros(&[1, 3, 20, 20])), Err(IcegError::Dimension(_))));
    }
}
