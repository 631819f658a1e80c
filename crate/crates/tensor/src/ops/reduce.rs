//! Sum, mean and max reductions.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops::elementwise::{pad4, Bcast};
use crate::tensor::{Backward, Tensor};

struct SumAllBackward;

impl<T: Element> Backward<T> for SumAllBackward {
    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![grad[0]; parents[0].numel()])]
    }
}

/// Reduction over a set of axes with the reduced axes kept as size 1.
struct SumKeepBackward {
    bc: Bcast,
    scale: f64,
}

impl<T: Element> Backward<T> for SumKeepBackward {
    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::ZERO; parents[0].numel()];
        let s = T::from_f64(self.scale);
        self.bc.for_each(|i, _, o| g[i] = grad[o] * s);
        vec![Some(g)]
    }
}

struct MaxKeepBackward {
    argmax: Vec<usize>,
}

impl<T: Element> Backward<T> for MaxKeepBackward {
    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::ZERO; parents[0].numel()];
        for (o, &i) in self.argmax.iter().enumerate() {
            g[i] += grad[o];
        }
        vec![Some(g)]
    }
}

fn kept_shape(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut out = shape.to_vec();
    for &a in axes {
        if a >= shape.len() {
            return Err(TensorError::Invalid(format!(
                "axis {a} out of range for shape {shape:?}"
            )));
        }
        out[a] = 1;
    }
    Ok(out)
}

impl<T: Element> Tensor<T> {
    /// Sum of all elements as a shape-`[1]` tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op(vec![s], vec![1], vec![self.clone()], SumAllBackward)
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_keep(&self, axes: &[usize]) -> Result<Tensor<T>> {
        self.reduce_keep(axes, false)
    }

    /// Means over `axes`, keeping them as size-1 dimensions.
    pub fn mean_keep(&self, axes: &[usize]) -> Result<Tensor<T>> {
        self.reduce_keep(axes, true)
    }

    fn reduce_keep(&self, axes: &[usize], mean: bool) -> Result<Tensor<T>> {
        let out_shape = kept_shape(self.shape(), axes)?;
        let (bc, _) = Bcast::new(self.shape(), &out_shape)?;
        let n_out: usize = out_shape.iter().product();
        let count = (self.numel() / n_out.max(1)).max(1);
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        let mut out = vec![T::ZERO; n_out];
        let x = self.data();
        bc.for_each(|i, _, o| out[o] += x[i]);
        if mean {
            let s = T::from_f64(scale);
            out.iter_mut().for_each(|v| *v *= s);
        }
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            SumKeepBackward { bc, scale },
        ))
    }

    /// Maximum over `axes`, keeping them as size-1 dimensions. The gradient
    /// is routed to the first maximal element.
    pub fn max_keep(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let out_shape = kept_shape(self.shape(), axes)?;
        pad4(self.shape())?;
        let (bc, _) = Bcast::new(self.shape(), &out_shape)?;
        let n_out: usize = out_shape.iter().product();
        let mut out: Vec<Option<T>> = vec![None; n_out];
        let mut argmax = vec![0usize; n_out];
        let x = self.data();
        bc.for_each(|i, _, o| {
            if out[o].is_none_or(|m| x[i] > m) {
                out[o] = Some(x[i]);
                argmax[o] = i;
            }
        });
        let out = out.into_iter().map(|v| v.unwrap_or(T::ZERO)).collect();
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            MaxKeepBackward { argmax },
        ))
    }
}
