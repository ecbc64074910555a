use alloc::vec;
use alloc::vec::Vec;

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Scalar, Shape};

/// Spatial padding of [`Graph::conv2d`]. Stride is always 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so the output keeps the input extents.
    Same,
    /// No padding; output extent is `input - kernel + 1`.
    Valid,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    pub(crate) fn new(input: &[usize], kernel: &[usize], padding: Padding) -> Result<Self> {
        if input.len() != 3 {
            return Err(Error::invalid("conv2d", input, "input must be [C,H,W]"));
        }
        if kernel.len() != 4 {
            return Err(Error::invalid(
                "conv2d",
                kernel,
                "kernel must be [Cout,Cin,kh,kw]",
            ));
        }
        if input[0] != kernel[1] {
            return Err(Error::shape("conv2d", input, kernel));
        }
        let (ci, h, w) = (input[0], input[1], input[2]);
        let (co, kh, kw) = (kernel[0], kernel[2], kernel[3]);
        let (pad_top, pad_left, oh, ow) = match padding {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2, h, w),
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::shape("conv2d", input, kernel));
                }
                (0, 0, h - kh + 1, w - kw + 1)
            }
        };
        if kh == 0 || kw == 0 {
            return Err(Error::shape("conv2d", input, kernel));
        }
        Ok(ConvGeom {
            ci,
            h,
            w,
            co,
            kh,
            kw,
            pad_top,
            pad_left,
            oh,
            ow,
        })
    }

    /// Output rows touched by kernel row `ky`, with the matching input row offset.
    #[inline]
    fn rows(&self, ky: usize) -> (usize, usize) {
        let lo = self.pad_top.saturating_sub(ky);
        let hi = (self.h + self.pad_top).saturating_sub(ky).min(self.oh);
        (lo, hi.max(lo))
    }

    #[inline]
    fn cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad_left.saturating_sub(kx);
        let hi = (self.w + self.pad_left).saturating_sub(kx).min(self.ow);
        (lo, hi.max(lo))
    }
}

#[inline]
fn axpy<T: Scalar>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

pub(crate) fn forward<T: Scalar>(g: &ConvGeom, x: &[T], k: &[T], bias: &[T]) -> Vec<T> {
    let plane_out = g.oh * g.ow;
    let mut out = vec![T::zero(); g.co * plane_out];
    par::for_each_chunk(&mut out, plane_out, |o, dst| {
        dst.iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..g.ci {
            let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (y0, y1) = g.rows(ky);
                for kx in 0..g.kw {
                    let wgt = k[((o * g.ci + c) * g.kh + ky) * g.kw + kx];
                    let (x0, x1) = g.cols(kx);
                    if x0 >= x1 {
                        continue;
                    }
                    let ix0 = x0 + kx - g.pad_left;
                    for y in y0..y1 {
                        let iy = y + ky - g.pad_top;
                        let srow = &src[iy * g.w + ix0..iy * g.w + ix0 + (x1 - x0)];
                        axpy(&mut dst[y * g.ow + x0..y * g.ow + x1], wgt, srow);
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn backward_input<T: Scalar>(g: &ConvGeom, k: &[T], gout: &[T], gin: &mut [T]) {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    par::for_each_chunk(gin, plane_in, |c, dst| {
        for o in 0..g.co {
            let src = &gout[o * plane_out..(o + 1) * plane_out];
            for ky in 0..g.kh {
                let (y0, y1) = g.rows(ky);
                for kx in 0..g.kw {
                    let wgt = k[((o * g.ci + c) * g.kh + ky) * g.kw + kx];
                    let (x0, x1) = g.cols(kx);
                    if x0 >= x1 {
                        continue;
                    }
                    let ix0 = x0 + kx - g.pad_left;
                    for y in y0..y1 {
                        let iy = y + ky - g.pad_top;
                        axpy(
                            &mut dst[iy * g.w + ix0..iy * g.w + ix0 + (x1 - x0)],
                            wgt,
                            &src[y * g.ow + x0..y * g.ow + x1],
                        );
                    }
                }
            }
        }
    });
}

pub(crate) fn backward_kernel<T: Scalar>(g: &ConvGeom, x: &[T], gout: &[T], gk: &mut [T]) {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    par::for_each_chunk(gk, g.ci * g.kh * g.kw, |o, dst| {
        let go = &gout[o * plane_out..(o + 1) * plane_out];
        for c in 0..g.ci {
            let src = &x[c * plane_in..(c + 1) * plane_in];
            for ky in 0..g.kh {
                let (y0, y1) = g.rows(ky);
                for kx in 0..g.kw {
                    let (x0, x1) = g.cols(kx);
                    if x0 >= x1 {
                        continue;
                    }
                    let ix0 = x0 + kx - g.pad_left;
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let iy = y + ky - g.pad_top;
                        acc += dot(
                            &go[y * g.ow + x0..y * g.ow + x1],
                            &src[iy * g.w + ix0..iy * g.w + ix0 + (x1 - x0)],
                        );
                    }
                    dst[(c * g.kh + ky) * g.kw + kx] += acc;
                }
            }
        }
    });
}

pub(crate) fn backward_bias<T: Scalar>(g: &ConvGeom, gout: &[T], gb: &mut [T]) {
    let plane_out = g.oh * g.ow;
    for (o, b) in gb.iter_mut().enumerate() {
        *b += gout[o * plane_out..(o + 1) * plane_out]
            .iter()
            .copied()
            .sum::<T>();
    }
}

impl<T: Scalar> Graph<T> {
    /// Stride-1 cross-correlation of `input` `[Cin,H,W]` with `kernel`
    /// `[Cout,Cin,kh,kw]` plus a per-output-channel `bias`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), padding)?;
        if self.shape(bias) != [geom.co] {
            return Err(Error::shape("conv2d bias", self.shape(bias), &[geom.co]));
        }
        let out = forward(
            &geom,
            self.value(input),
            self.value(kernel),
            self.value(bias),
        );
        let rg = self.any_needs(&[input, kernel, bias]);
        Ok(self.push(
            Shape::from([geom.co, geom.oh, geom.ow]),
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            },
            rg,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn run(
        input: Tensor<f64>,
        kernel: Tensor<f64>,
        bias: Tensor<f64>,
        pad: Padding,
    ) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let (x, k, b) = (g.input(&input), g.input(&kernel), g.input(&bias));
        let y = g.conv2d(x, k, b, pad)?;
        Ok(g.tensor(y))
    }

    fn naive(input: &Tensor<f64>, kernel: &Tensor<f64>, bias: &[f64], pad: Padding) -> Vec<f64> {
        let d = input.dims();
        let kd = kernel.dims();
        let (ci, h, w, co, kh, kw) = (d[0], d[1], d[2], kd[0], kd[2], kd[3]);
        let (pt, pl, oh, ow) = match pad {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2, h, w),
            Padding::Valid => (0, 0, h - kh + 1, w - kw + 1),
        };
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = bias[o];
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = y as isize + ky as isize - pt as isize;
                                let ix = x as isize + kx as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += kernel.values()[((o * ci + c) * kh + ky) * kw + kx]
                                    * input.values()[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + y) * ow + x] = s;
                }
            }
        }
        out
    }

    #[test]
    fn one_by_one_kernel_scales() {
        let y = run(
            Tensor::from_vec([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            Tensor::from_vec([1, 1, 1, 1], vec![2.0]).unwrap(),
            Tensor::zeros([1]),
            Padding::Same,
        )
        .unwrap();
        assert_eq!(y.values(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn identity_kernel_same_padding() {
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let data: Vec<f64> = (0..20).map(|v| v as f64 * 0.5 - 3.0).collect();
        let y = run(
            Tensor::from_vec([1, 4, 5], data.clone()).unwrap(),
            Tensor::from_vec([1, 1, 3, 3], k).unwrap(),
            Tensor::zeros([1]),
            Padding::Same,
        )
        .unwrap();
        assert_eq!(y.values(), &data[..]);
    }

    #[test]
    fn valid_all_ones_sums_window() {
        let y = run(
            Tensor::from_vec([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            Tensor::full([1, 1, 2, 2], 1.0),
            Tensor::zeros([1]),
            Padding::Valid,
        )
        .unwrap();
        assert_eq!(y.dims(), &[1, 1, 1]);
        assert_eq!(y.values(), &[10.0]);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let err = run(
            Tensor::zeros([2, 4, 4]),
            Tensor::zeros([1, 3, 3, 3]),
            Tensor::zeros([1]),
            Padding::Same,
        )
        .unwrap_err();
        match err {
            Error::Shape { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 4, 4]);
                assert_eq!(rhs, vec![1, 3, 3, 3]);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn matches_naive_correlation() {
        let mut seed = 1u64;
        let mut next = || {
            seed = seed
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        for pad in [Padding::Same, Padding::Valid] {
            for &(ci, co, h, w, kh, kw) in
                &[(2, 3, 5, 7, 3, 3), (1, 2, 4, 4, 1, 1), (3, 1, 6, 3, 2, 3)]
            {
                let x = Tensor::from_vec([ci, h, w], (0..ci * h * w).map(|_| next()).collect())
                    .unwrap();
                let k = Tensor::from_vec(
                    [co, ci, kh, kw],
                    (0..co * ci * kh * kw).map(|_| next()).collect(),
                )
                .unwrap();
                let b: Vec<f64> = (0..co).map(|_| next()).collect();
                let y = run(
                    x.clone(),
                    k.clone(),
                    Tensor::from_vec([co], b.clone()).unwrap(),
                    pad,
                )
                .unwrap();
                let r = naive(&x, &k, &b, pad);
                for (a, e) in y.values().iter().zip(&r) {
                    assert!((a - e).abs() < 1e-12);
                }
            }
        }
    }
}
