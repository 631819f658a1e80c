//! Differentiable building blocks shared by the detector and the generator.

use std::rc::Rc;

use iceg_tensor::{Buffer, Conv2dConfig, Element, Init, Param, Scope, Tensor};

use crate::error::{IcegError, Result};

/// Whether batch norm uses batch statistics (and updates running averages)
/// or the stored running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone)]
pub struct Conv2d<T: Element> {
    weight: Rc<Param<T>>,
    bias: Option<Rc<Param<T>>>,
    cfg: Conv2dConfig,
}

impl<T: Element> Conv2d<T> {
    /// Stride-1 convolution with "same" padding and a bias.
    pub fn new(s: &Scope<T>, cin: usize, cout: usize, kernel: usize) -> Self {
        Self::with(s, cin, cout, kernel, Conv2dConfig::same(kernel, 1), None, true)
    }

    pub fn dilated(s: &Scope<T>, cin: usize, cout: usize, kernel: usize, dilation: usize) -> Self {
        Self::with(s, cin, cout, kernel, Conv2dConfig::same(kernel, dilation), None, true)
    }

    pub fn strided(s: &Scope<T>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        let cfg = Conv2dConfig {
            stride,
            padding: kernel / 2,
            dilation: 1,
        };
        Self::with(s, cin, cout, kernel, cfg, None, true)
    }

    /// All weights zero and every bias equal to `bias`.
    pub fn constant(s: &Scope<T>, cin: usize, cout: usize, kernel: usize, bias: f64) -> Self {
        Self::with(s, cin, cout, kernel, Conv2dConfig::same(kernel, 1), Some((0.0, bias)), true)
    }

    fn with(
        s: &Scope<T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        cfg: Conv2dConfig,
        constant: Option<(f64, f64)>,
        bias: bool,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let (wi, bi) = match constant {
            Some((w, b)) => (Init::Const(w), Init::Const(b)),
            None => (Init::FanInUniform { fan_in }, Init::FanInUniform { fan_in }),
        };
        Conv2d {
            weight: s.param("weight", &[cout, cin, kernel, kernel], wi),
            bias: bias.then(|| s.param("bias", &[cout], bi)),
            cfg,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.bias.as_ref().map(|b| b.tensor());
        Ok(x.conv2d(&self.weight.tensor(), b.as_ref(), self.cfg)?)
    }

    pub fn weight(&self) -> &Rc<Param<T>> {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Rc<Param<T>>> {
        self.bias.as_ref()
    }

    /// Sets every weight and bias to zero.
    pub fn zero(&self) -> Result<()> {
        self.weight.set_values(vec![T::ZERO; self.weight.numel()])?;
        if let Some(b) = &self.bias {
            b.set_values(vec![T::ZERO; b.numel()])?;
        }
        Ok(())
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone)]
pub struct BatchNorm2d<T: Element> {
    gamma: Rc<Param<T>>,
    beta: Rc<Param<T>>,
    running_mean: Rc<Buffer<T>>,
    running_var: Rc<Buffer<T>>,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(s: &Scope<T>, channels: usize) -> Self {
        BatchNorm2d {
            gamma: s.param("gamma", &[channels], Init::Const(1.0)),
            beta: s.param("beta", &[channels], Init::Const(0.0)),
            running_mean: s.buffer("running_mean", vec![T::ZERO; channels]),
            running_var: s.buffer("running_var", vec![T::ONE; channels]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (g, b) = (self.gamma.tensor(), self.beta.tensor());
        match mode {
            Mode::Train => {
                let (y, stats) = x.batch_norm_train(&g, &b, BN_EPS)?;
                let m = T::from_f64(BN_MOMENTUM);
                let keep = T::ONE - m;
                self.running_mean.update(|rm| {
                    rm.iter_mut().zip(&stats.mean).for_each(|(r, &v)| *r = keep * *r + m * v)
                });
                self.running_var.update(|rv| {
                    rv.iter_mut()
                        .zip(&stats.var_unbiased)
                        .for_each(|(r, &v)| *r = keep * *r + m * v)
                });
                Ok(y)
            }
            Mode::Eval => Ok(x.batch_norm_eval(
                &g,
                &b,
                &self.running_mean.values(),
                &self.running_var.values(),
                BN_EPS,
            )?),
        }
    }
}

/// 3x3 convolution, ReLU, batch norm.
#[derive(Clone)]
pub struct Crb<T: Element> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

impl<T: Element> Crb<T> {
    pub fn new(s: &Scope<T>, cin: usize, cout: usize) -> Self {
        Crb {
            conv: Conv2d::new(&s.sub("conv"), cin, cout, 3),
            bn: BatchNorm2d::new(&s.sub("bn"), cout),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.bn.forward(&self.conv.forward(x)?.relu(), mode)
    }

    /// Activation entering the batch norm (non-negative).
    pub fn pre_norm(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.conv.forward(x)?.relu())
    }
}

fn hidden(channels: usize, reduction: usize) -> usize {
    (channels / reduction).max(1)
}

/// Channel gate from average- and max-pooled descriptors through a shared
/// bottleneck.
#[derive(Clone)]
pub struct ChannelAttention<T: Element> {
    down: Conv2d<T>,
    up: Conv2d<T>,
}

impl<T: Element> ChannelAttention<T> {
    pub fn new(s: &Scope<T>, channels: usize, reduction: usize) -> Self {
        let h = hidden(channels, reduction);
        ChannelAttention {
            down: Conv2d::new(&s.sub("down"), channels, h, 1),
            up: Conv2d::new(&s.sub("up"), h, channels, 1),
        }
    }

    pub fn gate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mlp = |d: Tensor<T>| -> Result<Tensor<T>> { self.up.forward(&self.down.forward(&d)?.relu()) };
        let avg = mlp(x.mean_keep(&[2, 3])?)?;
        let max = mlp(x.max_keep(&[2, 3])?)?;
        Ok(avg.add(&max)?.sigmoid())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.mul(&self.gate(x)?)?)
    }
}

/// Location gate from the channel mean and max, through a 7x7 convolution.
#[derive(Clone)]
pub struct SpatialAttention<T: Element> {
    conv: Conv2d<T>,
}

impl<T: Element> SpatialAttention<T> {
    pub fn new(s: &Scope<T>) -> Self {
        SpatialAttention {
            conv: Conv2d::new(&s.sub("conv"), 2, 1, 7),
        }
    }

    pub fn gate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = Tensor::cat_channels(&[&x.mean_keep(&[1])?, &x.max_keep(&[1])?])?;
        Ok(self.conv.forward(&pooled)?.sigmoid())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.mul(&self.gate(x)?)?)
    }
}

/// Residual channel attention block: two 3x3 convolutions, a squeeze
/// gate on their output, and a skip connection.
#[derive(Clone)]
pub struct Rcab<T: Element> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    squeeze: Conv2d<T>,
    excite: Conv2d<T>,
}

impl<T: Element> Rcab<T> {
    pub fn new(s: &Scope<T>, channels: usize, reduction: usize) -> Self {
        let h = hidden(channels, reduction);
        Rcab {
            conv1: Conv2d::new(&s.sub("conv1"), channels, channels, 3),
            conv2: Conv2d::new(&s.sub("conv2"), channels, channels, 3),
            squeeze: Conv2d::new(&s.sub("squeeze"), channels, h, 1),
            excite: Conv2d::new(&s.sub("excite"), h, channels, 1),
        }
    }

    pub fn gate(&self, residual: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = residual.mean_keep(&[2, 3])?;
        Ok(self.excite.forward(&self.squeeze.forward(&pooled)?.relu())?.sigmoid())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let r = self.conv2.forward(&self.conv1.forward(x)?.relu())?;
        Ok(x.add(&r.mul(&self.gate(&r)?)?)?)
    }

    /// Zeroes the last convolution of the residual branch, making the block
    /// an exact identity.
    pub fn zero_residual(&self) -> Result<()> {
        self.conv2.zero()
    }
}

/// Parallel dilated 3x3 branches plus an image-level pooling branch,
/// concatenated and fused by a 1x1 convolution.
#[derive(Clone)]
pub struct Aspp<T: Element> {
    branches: Vec<(Conv2d<T>, BatchNorm2d<T>)>,
    pool: Conv2d<T>,
    fuse: Conv2d<T>,
    fuse_bn: BatchNorm2d<T>,
}

impl<T: Element> Aspp<T> {
    pub fn new(s: &Scope<T>, cin: usize, cout: usize, dilations: &[usize]) -> Self {
        let branches = dilations
            .iter()
            .map(|&d| {
                let b = s.sub(format!("d{d}"));
                (Conv2d::dilated(&b.sub("conv"), cin, cout, 3, d), BatchNorm2d::new(&b.sub("bn"), cout))
            })
            .collect();
        Aspp {
            branches,
            pool: Conv2d::new(&s.sub("pool"), cin, cout, 1),
            fuse: Conv2d::new(&s.sub("fuse"), (dilations.len() + 1) * cout, cout, 1),
            fuse_bn: BatchNorm2d::new(&s.sub("fuse_bn"), cout),
        }
    }

    /// Output of every dilated branch, in configuration order.
    pub fn branch_outputs(&self, x: &Tensor<T>, mode: Mode) -> Result<Vec<Tensor<T>>> {
        self.branches
            .iter()
            .map(|(conv, bn)| Ok(bn.forward(&conv.forward(x)?, mode)?.relu()))
            .collect()
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (b, _, h, w) = x.dims4()?;
        let mut parts = self.branch_outputs(x, mode)?;
        let pooled = self.pool.forward(&x.mean_keep(&[2, 3])?)?.relu();
        let cout = pooled.shape()[1];
        parts.push(Tensor::zeros(&[b, cout, h, w]).add(&pooled)?);
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        let fused = self.fuse.forward(&Tensor::cat_channels(&refs)?)?;
        Ok(self.fuse_bn.forward(&fused, mode)?.relu())
    }
}

pub fn sigmoid_map<T: Element>(p: &Tensor<T>) -> Tensor<T> {
    p.sigmoid()
}

/// `1 - q`.
pub fn reverse_map<T: Element>(q: &Tensor<T>) -> Tensor<T> {
    q.one_minus()
}

/// Bilinear resampling by the rational factor `num / den`.
pub fn resample<T: Element>(x: &Tensor<T>, num: usize, den: usize) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4()?;
    if den == 0 || (h * num) % den != 0 || (w * num) % den != 0 || num == 0 {
        return Err(IcegError::Dimension(format!(
            "{h}x{w} scaled by {num}/{den} is not integral"
        )));
    }
    resize_to(x, h * num / den, w * num / den)
}

pub fn resize_to<T: Element>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    Ok(x.resize_bilinear(h, w)?)
}
