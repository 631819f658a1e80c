//! Elementwise unary and broadcasting binary operations.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{Backward, Tensor};

/// Shapes padded to rank 4 with leading ones.
pub(crate) fn pad4(shape: &[usize]) -> Result<[usize; 4]> {
    if shape.len() > 4 {
        return Err(TensorError::Invalid(format!(
            "broadcasting supports rank <= 4, got {shape:?}"
        )));
    }
    let mut out = [1usize; 4];
    out[4 - shape.len()..].copy_from_slice(shape);
    Ok(out)
}

fn strides4(dims: [usize; 4]) -> [usize; 4] {
    [dims[1] * dims[2] * dims[3], dims[2] * dims[3], dims[3], 1]
}

/// Strides of `dims` when viewed inside `out`; broadcast axes get stride 0.
fn bcast_strides(dims: [usize; 4], out: [usize; 4]) -> [usize; 4] {
    let s = strides4(dims);
    let mut r = [0; 4];
    for i in 0..4 {
        r[i] = if dims[i] == out[i] { s[i] } else { 0 };
    }
    r
}

#[derive(Clone, Copy)]
pub(crate) struct Bcast {
    out: [usize; 4],
    sa: [usize; 4],
    sb: [usize; 4],
}

impl Bcast {
    pub(crate) fn new(a: &[usize], b: &[usize]) -> Result<(Self, Vec<usize>)> {
        let a4 = pad4(a)?;
        let b4 = pad4(b)?;
        let mut out = [0; 4];
        for i in 0..4 {
            out[i] = match (a4[i], b4[i]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(TensorError::Broadcast {
                        lhs: a.to_vec(),
                        rhs: b.to_vec(),
                    })
                }
            };
        }
        let rank = a.len().max(b.len());
        let shape = out[4 - rank..].to_vec();
        Ok((
            Bcast {
                out,
                sa: bcast_strides(a4, out),
                sb: bcast_strides(b4, out),
            },
            shape,
        ))
    }

    /// Visits every output element with its flat output, `a` and `b` offsets.
    #[inline]
    pub(crate) fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [n0, n1, n2, n3] = self.out;
        let mut o = 0;
        for i0 in 0..n0 {
            for i1 in 0..n1 {
                for i2 in 0..n2 {
                    let ba = i0 * self.sa[0] + i1 * self.sa[1] + i2 * self.sa[2];
                    let bb = i0 * self.sb[0] + i1 * self.sb[1] + i2 * self.sb[2];
                    for i3 in 0..n3 {
                        f(o, ba + i3 * self.sa[3], bb + i3 * self.sb[3]);
                        o += 1;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinaryBackward {
    kind: BinaryKind,
    bc: Option<Bcast>,
}

impl<T: Element> Backward<T> for BinaryBackward {
    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (&parents[0], &parents[1]);
        let Some(bc) = self.bc else {
            // Same-shape fast path.
            let ga = a.requires_grad().then(|| match self.kind {
                BinaryKind::Add | BinaryKind::Sub => grad.to_vec(),
                BinaryKind::Mul => grad.iter().zip(b.data()).map(|(g, y)| *g * *y).collect(),
                BinaryKind::Div => grad.iter().zip(b.data()).map(|(g, y)| *g / *y).collect(),
            });
            let gb = b.requires_grad().then(|| match self.kind {
                BinaryKind::Add => grad.to_vec(),
                BinaryKind::Sub => grad.iter().map(|g| -*g).collect(),
                BinaryKind::Mul => grad.iter().zip(a.data()).map(|(g, x)| *g * *x).collect(),
                BinaryKind::Div => grad
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(g, (x, y))| -*g * *x / (*y * *y))
                    .collect(),
            });
            return vec![ga, gb];
        };
        let ga = a.requires_grad().then(|| {
            let mut acc = vec![T::ZERO; a.numel()];
            let bd = b.data();
            match self.kind {
                BinaryKind::Add | BinaryKind::Sub => bc.for_each(|o, ia, _| acc[ia] += grad[o]),
                BinaryKind::Mul => bc.for_each(|o, ia, ib| acc[ia] += grad[o] * bd[ib]),
                BinaryKind::Div => bc.for_each(|o, ia, ib| acc[ia] += grad[o] / bd[ib]),
            }
            acc
        });
        let gb = b.requires_grad().then(|| {
            let mut acc = vec![T::ZERO; b.numel()];
            let ad = a.data();
            let bd = b.data();
            match self.kind {
                BinaryKind::Add => bc.for_each(|o, _, ib| acc[ib] += grad[o]),
                BinaryKind::Sub => bc.for_each(|o, _, ib| acc[ib] -= grad[o]),
                BinaryKind::Mul => bc.for_each(|o, ia, ib| acc[ib] += grad[o] * ad[ia]),
                BinaryKind::Div => bc.for_each(|o, ia, ib| acc[ib] -= grad[o] * ad[ia] / (bd[ib] * bd[ib])),
            }
            acc
        });
        vec![ga, gb]
    }
}

fn binary<T: Element>(a: &Tensor<T>, b: &Tensor<T>, kind: BinaryKind) -> Result<Tensor<T>> {
    let f = |x: T, y: T| match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    };
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        return Ok(Tensor::from_op(
            data,
            a.shape().to_vec(),
            vec![a.clone(), b.clone()],
            BinaryBackward { kind, bc: None },
        ));
    }
    let (bc, shape) = Bcast::new(a.shape(), b.shape())?;
    let n = shape.iter().product();
    let mut data = vec![T::ZERO; n];
    let (ad, bd) = (a.data(), b.data());
    bc.for_each(|o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Ok(Tensor::from_op(
        data,
        shape,
        vec![a.clone(), b.clone()],
        BinaryBackward { kind, bc: Some(bc) },
    ))
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind<T> {
    Relu,
    Sigmoid,
    Scale(T),
    AddScalar(T),
    Square,
    Clamp(T, T),
}

struct UnaryBackward<T> {
    kind: UnaryKind<T>,
}

impl<T: Element> Backward<T> for UnaryBackward<T> {
    fn backward(&self, parents: &[Tensor<T>], out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let x = parents[0].data();
        let g: Vec<T> = match self.kind {
            UnaryKind::Relu => grad
                .iter()
                .zip(x)
                .map(|(g, x)| if *x > T::ZERO { *g } else { T::ZERO })
                .collect(),
            UnaryKind::Sigmoid => grad
                .iter()
                .zip(out)
                .map(|(g, y)| *g * *y * (T::ONE - *y))
                .collect(),
            UnaryKind::Scale(s) => grad.iter().map(|g| *g * s).collect(),
            UnaryKind::AddScalar(_) => grad.to_vec(),
            UnaryKind::Square => grad
                .iter()
                .zip(x)
                .map(|(g, x)| *g * T::from_f64(2.0) * *x)
                .collect(),
            UnaryKind::Clamp(lo, hi) => grad
                .iter()
                .zip(x)
                .map(|(g, x)| if *x >= lo && *x <= hi { *g } else { T::ZERO })
                .collect(),
        };
        vec![Some(g)]
    }
}

fn unary<T: Element>(a: &Tensor<T>, kind: UnaryKind<T>) -> Tensor<T> {
    let f = |x: T| match kind {
        UnaryKind::Relu => x.max(T::ZERO),
        UnaryKind::Sigmoid => x.sigmoid(),
        UnaryKind::Scale(s) => x * s,
        UnaryKind::AddScalar(s) => x + s,
        UnaryKind::Square => x * x,
        UnaryKind::Clamp(lo, hi) => x.max(lo).min(hi),
    };
    let data = a.data().iter().map(|x| f(*x)).collect();
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        vec![a.clone()],
        UnaryBackward { kind },
    )
}

impl<T: Element> Tensor<T> {
    /// Elementwise sum with rank-4 broadcasting (axes equal or 1).
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinaryKind::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinaryKind::Div)
    }

    pub fn relu(&self) -> Tensor<T> {
        unary(self, UnaryKind::Relu)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        unary(self, UnaryKind::Sigmoid)
    }

    pub fn scale(&self, s: f64) -> Tensor<T> {
        unary(self, UnaryKind::Scale(T::from_f64(s)))
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<T> {
        unary(self, UnaryKind::AddScalar(T::from_f64(s)))
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Tensor<T> {
        self.neg().add_scalar(1.0)
    }

    pub fn square(&self) -> Tensor<T> {
        unary(self, UnaryKind::Square)
    }

    /// Clamps into `[lo, hi]`; the gradient is passed through inside the
    /// interval and zeroed outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<T> {
        unary(self, UnaryKind::Clamp(T::from_f64(lo), T::from_f64(hi)))
    }
}
