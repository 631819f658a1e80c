//! Bilinear resampling and average pooling.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{Backward, Tensor};

/// Source taps for one output coordinate (half-pixel centers, no corner
/// alignment): `(i0, i1, weight_of_i1)`.
fn taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = if i0 + 1 < in_len { i0 + 1 } else { i0 };
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

struct BilinearBackward {
    ty: Vec<(usize, usize, f64)>,
    tx: Vec<(usize, usize, f64)>,
    dims: (usize, usize, usize),
}

impl<T: Element> Backward<T> for BilinearBackward {
    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (planes, h, w) = self.dims;
        let (oh, ow) = (self.ty.len(), self.tx.len());
        let mut g = vec![T::ZERO; parents[0].numel()];
        for p in 0..planes {
            let src = &mut g[p * h * w..(p + 1) * h * w];
            let dst = &grad[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &(y0, y1, ly)) in self.ty.iter().enumerate() {
                let (ly1, ly0) = (T::from_f64(ly), T::from_f64(1.0 - ly));
                for (ox, &(x0, x1, lx)) in self.tx.iter().enumerate() {
                    let (lx1, lx0) = (T::from_f64(lx), T::from_f64(1.0 - lx));
                    let v = dst[oy * ow + ox];
                    src[y0 * w + x0] += v * ly0 * lx0;
                    src[y0 * w + x1] += v * ly0 * lx1;
                    src[y1 * w + x0] += v * ly1 * lx0;
                    src[y1 * w + x1] += v * ly1 * lx1;
                }
            }
        }
        vec![Some(g)]
    }
}

struct AvgPoolBackward {
    kernel: usize,
    stride: usize,
    padding: usize,
    dims: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl<T: Element> Backward<T> for AvgPoolBackward {
    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (planes, h, w) = self.dims;
        let (oh, ow) = self.out_hw;
        let inv = T::from_f64(1.0 / (self.kernel * self.kernel) as f64);
        let mut g = vec![T::ZERO; parents[0].numel()];
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    let v = grad[(p * oh + oy) * ow + ox] * inv;
                    for_window(oy, ox, self, h, w, |iy, ix| g[(p * h + iy) * w + ix] += v);
                }
            }
        }
        vec![Some(g)]
    }
}

#[inline]
fn for_window(oy: usize, ox: usize, pool: &AvgPoolBackward, h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
    let y0 = (oy * pool.stride) as isize - pool.padding as isize;
    let x0 = (ox * pool.stride) as isize - pool.padding as isize;
    for ky in 0..pool.kernel as isize {
        let iy = y0 + ky;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        for kx in 0..pool.kernel as isize {
            let ix = x0 + kx;
            if ix < 0 || ix >= w as isize {
                continue;
            }
            f(iy as usize, ix as usize);
        }
    }
}

impl<T: Element> Tensor<T> {
    /// Bilinear interpolation of an NCHW tensor to `(oh, ow)` using
    /// half-pixel centers (corners not aligned).
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4()?;
        if oh == 0 || ow == 0 || h == 0 || w == 0 {
            return Err(TensorError::Invalid("empty resize".into()));
        }
        if (oh, ow) == (h, w) {
            return Ok(self.clone());
        }
        let ty = taps(oh, h);
        let tx = taps(ow, w);
        let planes = b * c;
        let x = self.data();
        let mut out = vec![T::ZERO; planes * oh * ow];
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let (ly1, ly0) = (T::from_f64(ly), T::from_f64(1.0 - ly));
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let (lx1, lx0) = (T::from_f64(lx), T::from_f64(1.0 - lx));
                    let top = src[y0 * w + x0] * lx0 + src[y0 * w + x1] * lx1;
                    let bot = src[y1 * w + x0] * lx0 + src[y1 * w + x1] * lx1;
                    dst[oy * ow + ox] = top * ly0 + bot * ly1;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![b, c, oh, ow],
            vec![self.clone()],
            BilinearBackward {
                ty,
                tx,
                dims: (planes, h, w),
            },
        ))
    }

    /// Average pooling; padded cells count as zeros in the divisor.
    pub fn avg_pool2d(&self, kernel: usize, stride: usize, padding: usize) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4()?;
        if kernel == 0 || stride == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
            return Err(TensorError::Invalid(format!(
                "pool kernel {kernel} stride {stride} on {h}x{w}"
            )));
        }
        let oh = (h + 2 * padding - kernel) / stride + 1;
        let ow = (w + 2 * padding - kernel) / stride + 1;
        let pool = AvgPoolBackward {
            kernel,
            stride,
            padding,
            dims: (b * c, h, w),
            out_hw: (oh, ow),
        };
        let inv = T::from_f64(1.0 / (kernel * kernel) as f64);
        let x = self.data();
        let mut out = vec![T::ZERO; b * c * oh * ow];
        for p in 0..b * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::ZERO;
                    for_window(oy, ox, &pool, h, w, |iy, ix| acc += x[(p * h + iy) * w + ix]);
                    out[(p * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
        Ok(Tensor::from_op(out, vec![b, c, oh, ow], vec![self.clone()], pool))
    }
}
