use std::rc::Rc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{Backward, Tensor};

struct ReshapeBackward;

impl<T: Element> Backward<T> for ReshapeBackward {
    fn backward(&self, _parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.to_vec())]
    }
}

/// Channel concatenation of rank-4 tensors.
struct ConcatBackward {
    channels: Vec<usize>,
    batch: usize,
    plane: usize,
}

impl<T: Element> Backward<T> for ConcatBackward {
    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let total: usize = self.channels.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(parents.len());
        for (p, &c) in parents.iter().zip(&self.channels) {
            if p.requires_grad() {
                let mut g = Vec::with_capacity(self.batch * c * self.plane);
                for b in 0..self.batch {
                    let start = (b * total + offset) * self.plane;
                    g.extend_from_slice(&grad[start..start + c * self.plane]);
                }
                out.push(Some(g));
            } else {
                out.push(None);
            }
            offset += c;
        }
        out
    }
}

impl<T: Element> Tensor<T> {
    /// Same storage viewed with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: self.numel(),
            });
        }
        if !self.requires_grad() {
            return Ok(Tensor::leaf(
                Rc::clone(self.storage()),
                shape.to_vec(),
                false,
            ));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            ReshapeBackward,
        ))
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn cat_channels(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concatenation of zero tensors".into()))?;
        let (b, _, h, w) = first.dims4()?;
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let (pb, pc, ph, pw) = p.dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(TensorError::Mismatch(format!(
                    "cannot concatenate {:?} with {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
            channels.push(pc);
        }
        let plane = h * w;
        let total: usize = channels.iter().sum();
        let mut data = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for (p, &c) in parts.iter().zip(&channels) {
                let start = bi * c * plane;
                data.extend_from_slice(&p.data()[start..start + c * plane]);
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![b, total, h, w],
            parts.iter().map(|p| (*p).clone()).collect(),
            ConcatBackward {
                channels,
                batch: b,
                plane,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_gradients() {
        let a = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 1, 1, 2])
            .unwrap()
            .requires_grad_leaf();
        let b = Tensor::<f64>::from_vec(vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0], &[2, 2, 1, 2])
            .unwrap()
            .requires_grad_leaf();
        let c = Tensor::cat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3, 1, 2]);
        assert_eq!(
            c.data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let w = Tensor::from_vec((0..12).map(f64::from).collect(), &[2, 3, 1, 2]).unwrap();
        let g = c.mul(&w).unwrap().sum_all().backward();
        assert_eq!(g.get(&a).unwrap(), &[0.0, 1.0, 6.0, 7.0]);
        assert_eq!(g.get(&b).unwrap(), &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
    }
}
