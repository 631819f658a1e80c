use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{Backward, Tensor};

struct BceBackward;

impl<T: Element> Backward<T> for BceBackward {
    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, t) = (parents[0].data(), parents[1].data());
        let gx = parents[0].requires_grad().then(|| {
            grad.iter()
                .zip(x.iter().zip(t))
                .map(|(g, (x, t))| *g * (x.sigmoid() - *t))
                .collect()
        });
        let gt = parents[1]
            .requires_grad()
            .then(|| grad.iter().zip(x).map(|(g, x)| -*g * *x).collect());
        vec![gx, gt]
    }
}

impl<T: Element> Tensor<T> {
    /// Elementwise binary cross-entropy between `sigmoid(self)` and
    /// `target`, evaluated stably from the logits.
    pub fn bce_with_logits(&self, target: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != target.shape() {
            return Err(TensorError::Mismatch(format!(
                "bce logits {:?} vs target {:?}",
                self.shape(),
                target.shape()
            )));
        }
        let data = self
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| x.max(T::ZERO) - x * t + (T::ONE + (-x.abs()).exp()).ln())
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), target.clone()],
            BceBackward,
        ))
    }
}
