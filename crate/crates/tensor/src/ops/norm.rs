//! Batch normalization and channel-wise L2 normalization.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{Backward, Tensor};

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running-average updates.
    pub var_unbiased: Vec<T>,
}

struct BatchNormBackward<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    training: bool,
    dims: (usize, usize, usize),
}

impl<T: Element> Backward<T> for BatchNormBackward<T> {
    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (b, c, plane) = self.dims;
        let gamma = parents[1].data();
        let mut sum_g = vec![T::ZERO; c];
        let mut sum_gx = vec![T::ZERO; c];
        for bi in 0..b {
            for ci in 0..c {
                let s = (bi * c + ci) * plane;
                for i in s..s + plane {
                    sum_g[ci] += grad[i];
                    sum_gx[ci] += grad[i] * self.xhat[i];
                }
            }
        }
        let gx = parents[0].requires_grad().then(|| {
            let mut gx = vec![T::ZERO; grad.len()];
            let n = T::from_f64((b * plane) as f64);
            for bi in 0..b {
                for ci in 0..c {
                    let s = (bi * c + ci) * plane;
                    let k = gamma[ci] * self.inv_std[ci];
                    if self.training {
                        let (mg, mgx) = (sum_g[ci] / n, sum_gx[ci] / n);
                        for i in s..s + plane {
                            gx[i] = k * (grad[i] - mg - self.xhat[i] * mgx);
                        }
                    } else {
                        for i in s..s + plane {
                            gx[i] = k * grad[i];
                        }
                    }
                }
            }
            gx
        });
        let ggamma = parents[1].requires_grad().then(|| sum_gx.clone());
        let gbeta = parents[2].requires_grad().then(|| sum_g.clone());
        vec![gx, ggamma, gbeta]
    }
}

impl<T: Element> Tensor<T> {
    /// Training-mode batch norm: normalizes each channel with the batch's
    /// own statistics and returns them for running-average bookkeeping.
    pub fn batch_norm_train(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: f64,
    ) -> Result<(Tensor<T>, BatchStats<T>)> {
        let (b, c, h, w) = self.dims4()?;
        check_affine(c, gamma, beta)?;
        let plane = h * w;
        let n = (b * plane) as f64;
        let x = self.data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for bi in 0..b {
            for ci in 0..c {
                let s = (bi * c + ci) * plane;
                mean[ci] += x[s..s + plane].iter().map(|v| v.to_f64()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for bi in 0..b {
            for ci in 0..c {
                let s = (bi * c + ci) * plane;
                var[ci] += x[s..s + plane]
                    .iter()
                    .map(|v| (v.to_f64() - mean[ci]).powi(2))
                    .sum::<f64>();
            }
        }
        let var_unbiased: Vec<T> = var
            .iter()
            .map(|v| T::from_f64(if n > 1.0 { v / (n - 1.0) } else { 0.0 }))
            .collect();
        let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v / n + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|m| T::from_f64(*m)).collect();
        let (y, xhat) = affine(x, (b, c, plane), &mean_t, &inv_std, gamma.data(), beta.data());
        let out = Tensor::from_op(
            y,
            vec![b, c, h, w],
            vec![self.clone(), gamma.clone(), beta.clone()],
            BatchNormBackward {
                xhat,
                inv_std,
                training: true,
                dims: (b, c, plane),
            },
        );
        Ok((
            out,
            BatchStats {
                mean: mean_t,
                var_unbiased,
            },
        ))
    }

    /// Inference-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4()?;
        check_affine(c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::Mismatch("running statistics length".into()));
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|v| T::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
            .collect();
        let (y, xhat) = affine(self.data(), (b, c, h * w), running_mean, &inv_std, gamma.data(), beta.data());
        Ok(Tensor::from_op(
            y,
            vec![b, c, h, w],
            vec![self.clone(), gamma.clone(), beta.clone()],
            BatchNormBackward {
                xhat,
                inv_std,
                training: false,
                dims: (b, c, h * w),
            },
        ))
    }

    /// Divides every pixel's channel vector by its Euclidean norm
    /// (`sqrt(sum x^2 + eps)`).
    pub fn l2_normalize_channels(&self, eps: f64) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4()?;
        let plane = h * w;
        let x = self.data();
        let mut norms = vec![T::ZERO; b * plane];
        for bi in 0..b {
            for p in 0..plane {
                let mut s = 0.0f64;
                for ci in 0..c {
                    s += x[(bi * c + ci) * plane + p].to_f64().powi(2);
                }
                norms[bi * plane + p] = T::from_f64((s + eps).sqrt());
            }
        }
        let mut y = vec![T::ZERO; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..plane {
                    let i = (bi * c + ci) * plane + p;
                    y[i] = x[i] / norms[bi * plane + p];
                }
            }
        }
        Ok(Tensor::from_op(
            y,
            vec![b, c, h, w],
            vec![self.clone()],
            L2NormBackward {
                norms,
                dims: (b, c, plane),
            },
        ))
    }
}

struct L2NormBackward<T> {
    norms: Vec<T>,
    dims: (usize, usize, usize),
}

impl<T: Element> Backward<T> for L2NormBackward<T> {
    fn backward(&self, _parents: &[Tensor<T>], out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        // y = x / n  =>  dx = (g - y <y, g>) / n
        let (b, c, plane) = self.dims;
        let mut gx = vec![T::ZERO; grad.len()];
        for bi in 0..b {
            for p in 0..plane {
                let mut dot = T::ZERO;
                for ci in 0..c {
                    let i = (bi * c + ci) * plane + p;
                    dot += out[i] * grad[i];
                }
                let n = self.norms[bi * plane + p];
                for ci in 0..c {
                    let i = (bi * c + ci) * plane + p;
                    gx[i] = (grad[i] - out[i] * dot) / n;
                }
            }
        }
        vec![Some(gx)]
    }
}

fn check_affine<T: Element>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.numel() != c || beta.numel() != c {
        return Err(TensorError::Mismatch(format!(
            "batch norm over {c} channels got affine params of {} and {}",
            gamma.numel(),
            beta.numel()
        )));
    }
    Ok(())
}

fn affine<T: Element>(
    x: &[T],
    (b, c, plane): (usize, usize, usize),
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::ZERO; x.len()];
    let mut xhat = vec![T::ZERO; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let s = (bi * c + ci) * plane;
            for i in s..s + plane {
                let xh = (x[i] - mean[ci]) * inv_std[ci];
                xhat[i] = xh;
                y[i] = gamma[ci] * xh + beta[ci];
            }
        }
    }
    (y, xhat)
}
