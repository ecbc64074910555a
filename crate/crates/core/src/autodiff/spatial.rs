use alloc::vec;
use alloc::vec::Vec;

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape};

fn chw(op: &'static str, d: &[usize]) -> Result<(usize, usize, usize)> {
    if d.len() != 3 {
        return Err(Error::invalid(op, d, "expected [C,H,W]"));
    }
    Ok((d[0], d[1], d[2]))
}

pub(crate) fn upsample2d_backward<T: Scalar>(g: &[T], c: usize, h: usize, w: usize, out: &mut [T]) {
    let w2 = 2 * w;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let base = (ch * 2 * h + 2 * y) * w2 + 2 * x;
                out[(ch * h + y) * w + x] +=
                    g[base] + g[base + 1] + g[base + w2] + g[base + w2 + 1];
            }
        }
    }
}

/// Adds the top-left `dst`-sized window of `g` (shape `src`) into `out`.
pub(crate) fn crop2d_add<T: Scalar>(g: &[T], src: &[usize], dst: &[usize], out: &mut [T]) {
    let (c, h, w) = (dst[0], dst[1], dst[2]);
    let (hs, ws) = (src[1], src[2]);
    for ch in 0..c {
        for y in 0..h {
            let s = (ch * hs + y) * ws;
            let d = (ch * h + y) * w;
            for x in 0..w {
                out[d + x] += g[s + x];
            }
        }
    }
}

/// Adds `g` (shape `src`) into the top-left window of `out` (shape `dst`).
pub(crate) fn pad2d_add<T: Scalar>(g: &[T], src: &[usize], dst: &[usize], out: &mut [T]) {
    let (c, h, w) = (src[0], src[1], src[2]);
    let (hd, wd) = (dst[1], dst[2]);
    for ch in 0..c {
        for y in 0..h {
            let s = (ch * h + y) * w;
            let d = (ch * hd + y) * wd;
            for x in 0..w {
                out[d + x] += g[s + x];
            }
        }
    }
}

/// One axis of the separable 2-tap forward average with replicate padding:
/// `y[i] = (x[i] + x[min(i+1, n-1)]) / 2` along the axis with extent `n`
/// and element stride `stride`, for `outer` independent blocks.
fn avg2_axis<T: Scalar>(x: &[T], n: usize, stride: usize, outer: usize) -> Vec<T> {
    let half = T::from_f64(0.5);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * n * stride;
        for i in 0..n {
            let j = (i + 1).min(n - 1);
            let (ri, rj) = (base + i * stride, base + j * stride);
            for s in 0..stride {
                y[ri + s] = half * (x[ri + s] + x[rj + s]);
            }
        }
    }
    y
}

fn avg2_axis_adjoint<T: Scalar>(g: &[T], n: usize, stride: usize, outer: usize) -> Vec<T> {
    let half = T::from_f64(0.5);
    let mut y = vec![T::zero(); g.len()];
    for o in 0..outer {
        let base = o * n * stride;
        for i in 0..n {
            let j = (i + 1).min(n - 1);
            let (ri, rj) = (base + i * stride, base + j * stride);
            for s in 0..stride {
                let v = half * g[ri + s];
                y[ri + s] += v;
                y[rj + s] += v;
            }
        }
    }
    y
}

pub(crate) fn avgpool3d_same_forward<T: Scalar>(x: &[T], d: [usize; 3]) -> Vec<T> {
    let [a, b, c] = d;
    let t = avg2_axis(x, c, 1, a * b);
    let t = avg2_axis(&t, b, c, a);
    avg2_axis(&t, a, b * c, 1)
}

pub(crate) fn avgpool3d_same_backward<T: Scalar>(g: &[T], d: [usize; 3], out: &mut [T]) {
    let [a, b, c] = d;
    let t = avg2_axis_adjoint(g, a, b * c, 1);
    let t = avg2_axis_adjoint(&t, b, c, a);
    let t = avg2_axis_adjoint(&t, c, 1, a * b);
    for (o, v) in out.iter_mut().zip(t) {
        *o += v;
    }
}

impl<T: Scalar> Graph<T> {
    /// 2x2 max pooling, stride 2. Ties go to the lowest linear index.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = chw("maxpool2d", self.shape(input))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(
                "maxpool2d",
                self.shape(input),
                "spatial extents must be even",
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input);
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = (ch * h + 2 * y) * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (ch * h + 2 * y + dy) * w + 2 * xx + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let rg = self.needs(input);
        Ok(self.push(
            Shape::from([c, oh, ow]),
            out,
            Op::MaxPool2d { input, argmax },
            rg,
        ))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2d(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = chw("upsample2d", self.shape(input))?;
        let x = self.value(input);
        let w2 = 2 * w;
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[(ch * h + y) * w + xx];
                    let base = (ch * 2 * h + 2 * y) * w2 + 2 * xx;
                    out[base] = v;
                    out[base + 1] = v;
                    out[base + w2] = v;
                    out[base + w2 + 1] = v;
                }
            }
        }
        let rg = self.needs(input);
        Ok(self.push(
            Shape::from([c, 2 * h, 2 * w]),
            out,
            Op::Upsample2d(input),
            rg,
        ))
    }

    /// Stacks the channels of `a` then `b`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = chw("concat_channels", self.shape(a))?;
        let (cb, hb, wb) = chw("concat_channels", self.shape(b))?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                self.shape(a),
                self.shape(b),
            ));
        }
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        let rg = self.any_needs(&[a, b]);
        Ok(self.push(Shape::from([ca + cb, ha, wa]), out, Op::Concat(a, b), rg))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = chw("slice_channels", self.shape(input))?;
        if len == 0 || start + len > c {
            return Err(Error::invalid(
                "slice_channels",
                self.shape(input),
                "channel range out of bounds",
            ));
        }
        let out = self.value(input)[start * h * w..(start + len) * h * w].to_vec();
        let rg = self.needs(input);
        Ok(self.push(
            Shape::from([len, h, w]),
            out,
            Op::SliceChannels { input, start },
            rg,
        ))
    }

    /// Zero-pads `[C,H,W]` at the bottom and right to `[C,h,w]`.
    pub fn pad2d(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let (c, hs, ws) = chw("pad2d", self.shape(input))?;
        if h < hs || w < ws {
            return Err(Error::shape("pad2d", self.shape(input), &[c, h, w]));
        }
        let mut out = vec![T::zero(); c * h * w];
        pad2d_add(self.value(input), &[c, hs, ws], &[c, h, w], &mut out);
        let rg = self.needs(input);
        Ok(self.push(Shape::from([c, h, w]), out, Op::Pad2d(input), rg))
    }

    /// Keeps the top-left `[C,h,w]` window.
    pub fn crop2d(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let (c, hs, ws) = chw("crop2d", self.shape(input))?;
        if h > hs || w > ws || h == 0 || w == 0 {
            return Err(Error::shape("crop2d", self.shape(input), &[c, h, w]));
        }
        let mut out = vec![T::zero(); c * h * w];
        crop2d_add(self.value(input), &[c, hs, ws], &[c, h, w], &mut out);
        let rg = self.needs(input);
        Ok(self.push(Shape::from([c, h, w]), out, Op::Crop2d(input), rg))
    }

    /// 2x2x2 moving average with stride 1 and replicate padding; the output
    /// keeps the input shape.
    pub fn avgpool3d_same(&mut self, input: Var) -> Result<Var> {
        let d = self.shape(input);
        if d.len() != 3 {
            return Err(Error::invalid("avgpool3d_same", d, "expected [A,B,C]"));
        }
        let dims = [d[0], d[1], d[2]];
        let out = avgpool3d_same_forward(self.value(input), dims);
        let rg = self.needs(input);
        Ok(self.push(Shape::from(dims), out, Op::AvgPool3dSame(input), rg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t(dims: [usize; 3], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn maxpool_examples() {
        let mut g = Graph::new();
        let x = g.param(&t([1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2d(x).unwrap();
        assert_eq!(g.value(y), &[4.0]);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(&Tensor::full([2, 4, 4], 1.5));
        let y = g.maxpool2d(x).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 1.5));
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        // Ties route to the first element of each window.
        let gx = grads.get(x).unwrap();
        assert_eq!(gx[0], 1.0);
        assert_eq!(gx[1] + gx[4] + gx[5], 0.0);
    }

    #[test]
    fn maxpool_rejects_odd_extent() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&Tensor::zeros([1, 3, 4]));
        assert!(matches!(g.maxpool2d(x), Err(Error::InvalidShape { .. })));
    }

    #[test]
    fn upsample_examples() {
        let mut g = Graph::new();
        let x = g.param(&t([1, 1, 1], &[1.0]));
        let y = g.upsample2d(x).unwrap();
        assert_eq!(g.value(y), &[1.0; 4]);
        let l = g.sum(y);
        assert_eq!(g.backward(l).unwrap().get(x).unwrap(), &[4.0]);
    }

    #[test]
    fn upsample_then_average_pool_is_identity() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let x = g.input(&t([2, 2, 3], &data));
        let y = g.upsample2d(x).unwrap();
        let v = g.value(y);
        let (h, w) = (4, 6);
        let mut back = Vec::new();
        for c in 0..2 {
            for yy in 0..2 {
                for xx in 0..3 {
                    let i = |dy: usize, dx: usize| v[(c * h + 2 * yy + dy) * w + 2 * xx + dx];
                    back.push((i(0, 0) + i(0, 1) + i(1, 0) + i(1, 1)) / 4.0);
                }
            }
        }
        assert_eq!(back, data);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::new();
        let a = g.input(&t([1, 1, 2], &[1.0, 2.0]));
        let b = g.input(&t([2, 1, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.shape(c), &[3, 1, 2]);
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let a2 = g.slice_channels(c, 0, 1).unwrap();
        let b2 = g.slice_channels(c, 1, 2).unwrap();
        assert_eq!(g.value(a2), g.value(a));
        assert_eq!(g.value(b2), g.value(b));
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.input(&Tensor::zeros([1, 2, 2]));
        let b = g.input(&Tensor::zeros([1, 2, 3]));
        assert!(matches!(g.concat_channels(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn concat_splits_gradient() {
        let mut g = Graph::new();
        let a = g.param(&t([1, 1, 2], &[1.0, 2.0]));
        let b = g.param(&t([1, 1, 2], &[3.0, 4.0]));
        let c = g.concat_channels(a, b).unwrap();
        let l = g.sum(c);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap(), &[1.0, 1.0]);
    }

    fn brute_avgpool(x: &[f64], d: [usize; 3]) -> Vec<f64> {
        let [a, b, c] = d;
        let mut out = vec![0.0; x.len()];
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    let mut s = 0.0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            for dk in 0..2 {
                                let (ii, jj, kk) = (
                                    (i + di).min(a - 1),
                                    (j + dj).min(b - 1),
                                    (k + dk).min(c - 1),
                                );
                                s += x[(ii * b + jj) * c + kk];
                            }
                        }
                    }
                    out[(i * b + j) * c + k] = s / 8.0;
                }
            }
        }
        out
    }

    #[test]
    fn avgpool3d_constant_and_impulse() {
        let d = [4, 5, 3];
        let y = avgpool3d_same_forward(&vec![2.5f64; 60], d);
        assert!(y.iter().all(|&v| (v - 2.5).abs() < 1e-15));

        let d = [6, 6, 6];
        let mut x = vec![0.0; 216];
        x[(3 * 6 + 3) * 6 + 3] = 8.0;
        let y = avgpool3d_same_forward(&x, d);
        let oracle = brute_avgpool(&x, d);
        assert_eq!(y, oracle);
        let ones: Vec<usize> = (0..216).filter(|&i| y[i] != 0.0).collect();
        assert_eq!(ones.len(), 8);
        for (i, &v) in y.iter().enumerate() {
            if v != 0.0 {
                assert_eq!(v, 1.0);
                let (a, b, c) = (i / 36, (i / 6) % 6, i % 6);
                assert!((2..=3).contains(&a) && (2..=3).contains(&b) && (2..=3).contains(&c));
            }
        }
    }

    #[test]
    fn avgpool3d_matches_brute_force_on_random_input() {
        let d = [3, 4, 5];
        let x: Vec<f64> = (0..60).map(|v| ((v * 37) % 11) as f64 - 4.0).collect();
        let y = avgpool3d_same_forward(&x, d);
        for (a, b) in y.iter().zip(brute_avgpool(&x, d)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pad_crop_round_trip() {
        let mut g = Graph::new();
        let x = g.param(&t([1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = g.pad2d(x, 4, 4).unwrap();
        assert_eq!(g.value(p)[..4], [1.0, 2.0, 3.0, 0.0]);
        let c = g.crop2d(p, 2, 3).unwrap();
        assert_eq!(g.value(c), g.value(x));
        let l = g.sum(c);
        assert_eq!(g.backward(l).unwrap().get(x).unwrap(), &[1.0; 6]);
    }
}
