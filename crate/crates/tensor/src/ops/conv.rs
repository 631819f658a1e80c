//! 2-D convolution via im2col and GEMM.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::exec;
use crate::tensor::{Backward, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dConfig {
    /// Stride-1 convolution that preserves spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cfg: Conv2dConfig,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.oh * self.ow
    }
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.cfg.stride == 1 && self.cfg.padding == 0
    }
}

/// Half-open range of output columns whose input column `o * stride + off`
/// falls inside `[0, len)`.
#[inline]
fn valid_range(off: isize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi = ((len as isize - off) + s - 1).div_euclid(s);
    let lo = lo.clamp(0, out_len as isize) as usize;
    let hi = hi.clamp(0, out_len as isize) as usize;
    (lo, hi.max(lo))
}

fn im2col<T: Element>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let (s, d, pad) = (g.cfg.stride, g.cfg.dilation, g.cfg.padding as isize);
    let p = g.p();
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let offy = (ky * d) as isize - pad;
            let (ylo, yhi) = valid_range(offy, s, g.h, g.oh);
            for kx in 0..g.kw {
                let offx = (kx * d) as isize - pad;
                let (xlo, xhi) = valid_range(offx, s, g.w, g.ow);
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if oy < ylo || oy >= yhi {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let iy = (oy as isize * s as isize + offy) as usize;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    line[..xlo].fill(T::ZERO);
                    line[xhi..].fill(T::ZERO);
                    if xlo == xhi {
                        continue;
                    }
                    if s == 1 {
                        let start = (xlo as isize + offx) as usize;
                        line[xlo..xhi].copy_from_slice(&src[start..start + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            line[ox] = src[(ox as isize * s as isize + offx) as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let (s, d, pad) = (g.cfg.stride, g.cfg.dilation, g.cfg.padding as isize);
    let p = g.p();
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let offy = (ky * d) as isize - pad;
            let (ylo, yhi) = valid_range(offy, s, g.h, g.oh);
            for kx in 0..g.kw {
                let offx = (kx * d) as isize - pad;
                let (xlo, xhi) = valid_range(offx, s, g.w, g.ow);
                let src = &cols[row * p..(row + 1) * p];
                for oy in ylo..yhi {
                    let iy = (oy as isize * s as isize + offy) as usize;
                    let line = &src[oy * g.ow..(oy + 1) * g.ow];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in xlo..xhi {
                        dst[(ox as isize * s as isize + offx) as usize] += line[ox];
                    }
                }
                row += 1;
            }
        }
    }
}

struct Conv2dBackward {
    geo: Geometry,
    has_bias: bool,
}

impl<T: Element> Backward<T> for Conv2dBackward {
    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let g = self.geo;
        let (x, w) = (&parents[0], &parents[1]);
        let (k, p, cout) = (g.k(), g.p(), g.cout);
        let in_len = g.cin * g.h * g.w;
        let out_len = cout * p;
        let wd = w.data();
        let xd = x.data();

        let need_x = x.requires_grad();
        let need_w = w.requires_grad();

        let gx = need_x.then(|| {
            let mut gx = vec![T::ZERO; g.batch * in_len];
            exec::for_each_chunk_mut(&mut gx, in_len, |b, gx_b| {
                let gb = &grad[b * out_len..(b + 1) * out_len];
                if g.pointwise() {
                    T::gemm(k, cout, p, T::ONE, wd, 1, k as isize, gb, p as isize, 1, T::ZERO, gx_b, p as isize, 1);
                } else {
                    let mut gcols = vec![T::ZERO; k * p];
                    T::gemm(k, cout, p, T::ONE, wd, 1, k as isize, gb, p as isize, 1, T::ZERO, &mut gcols, p as isize, 1);
                    col2im(&gcols, &g, gx_b);
                }
            });
            gx
        });

        let gw = need_w.then(|| {
            let partials = exec::map_indexed(g.batch, |b| {
                let gb = &grad[b * out_len..(b + 1) * out_len];
                let xb = &xd[b * in_len..(b + 1) * in_len];
                let mut part = vec![T::ZERO; cout * k];
                if g.pointwise() {
                    T::gemm(cout, p, k, T::ONE, gb, p as isize, 1, xb, 1, p as isize, T::ZERO, &mut part, k as isize, 1);
                } else {
                    let mut cols = vec![T::ZERO; k * p];
                    im2col(xb, &g, &mut cols);
                    T::gemm(cout, p, k, T::ONE, gb, p as isize, 1, &cols, 1, p as isize, T::ZERO, &mut part, k as isize, 1);
                }
                part
            });
            let mut gw = vec![T::ZERO; cout * k];
            for part in partials {
                gw.iter_mut().zip(&part).for_each(|(a, b)| *a += *b);
            }
            gw
        });

        let mut out = vec![gx, gw];
        if self.has_bias {
            let gbias = parents[2].requires_grad().then(|| {
                let mut gbias = vec![T::ZERO; cout];
                for b in 0..g.batch {
                    for (co, acc) in gbias.iter_mut().enumerate() {
                        let start = b * out_len + co * p;
                        *acc += grad[start..start + p].iter().copied().sum::<T>();
                    }
                }
                gbias
            });
            out.push(gbias);
        }
        out
    }
}

impl<T: Element> Tensor<T> {
    /// Cross-correlation of an NCHW input with an `out x in x kh x kw`
    /// weight, as in the usual deep-learning convention.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        cfg: Conv2dConfig,
    ) -> Result<Tensor<T>> {
        let (batch, cin, h, w) = self.dims4()?;
        let (cout, wcin, kh, kw) = weight.dims4()?;
        if wcin != cin {
            return Err(TensorError::Mismatch(format!(
                "conv2d input has {cin} channels, weight expects {wcin}"
            )));
        }
        if let Some(b) = bias {
            if b.numel() != cout {
                return Err(TensorError::Mismatch(format!(
                    "conv2d bias has {} entries, expected {cout}",
                    b.numel()
                )));
            }
        }
        if cfg.stride == 0 || cfg.dilation == 0 {
            return Err(TensorError::Invalid("stride and dilation must be positive".into()));
        }
        let span_h = cfg.dilation * (kh - 1) + 1;
        let span_w = cfg.dilation * (kw - 1) + 1;
        if h + 2 * cfg.padding < span_h || w + 2 * cfg.padding < span_w {
            return Err(TensorError::Mismatch(format!(
                "kernel {kh}x{kw} (dilation {}) larger than padded input {h}x{w}",
                cfg.dilation
            )));
        }
        let oh = (h + 2 * cfg.padding - span_h) / cfg.stride + 1;
        let ow = (w + 2 * cfg.padding - span_w) / cfg.stride + 1;
        let geo = Geometry {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            cfg,
        };
        let (k, p) = (geo.k(), geo.p());
        let in_len = cin * h * w;
        let out_len = cout * p;
        let xd = self.data();
        let wd = weight.data();
        let bd = bias.map(|b| b.data());

        let mut out = vec![T::ZERO; batch * out_len];
        exec::for_each_chunk_mut(&mut out, out_len, |b, ob| {
            let xb = &xd[b * in_len..(b + 1) * in_len];
            if geo.pointwise() {
                T::gemm(cout, k, p, T::ONE, wd, k as isize, 1, xb, p as isize, 1, T::ZERO, ob, p as isize, 1);
            } else {
                let mut cols = vec![T::ZERO; k * p];
                im2col(xb, &geo, &mut cols);
                T::gemm(cout, k, p, T::ONE, wd, k as isize, 1, &cols, p as isize, 1, T::ZERO, ob, p as isize, 1);
            }
            if let Some(bd) = bd {
                for (co, row) in ob.chunks_mut(p).enumerate() {
                    let bv = bd[co];
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        });

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            out,
            vec![batch, cout, oh, ow],
            parents,
            Conv2dBackward {
                geo,
                has_bias: bias.is_some(),
            },
        ))
    }
}
