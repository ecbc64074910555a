//! Raw loops behind the projection operators. Volumes are row-major
//! `[a][b][c]`; rotation acts in the (a, b) plane, so every kernel works on
//! contiguous rows of length `c`.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::tensor::Scalar;

/// Bilinear source taps of a rotated `a x b` lattice about its centre.
///
/// Output lattice point `(i, j)` samples the source at
/// `centre + R(-angle) (p - centre)`; taps that fall outside the grid are
/// dropped, which is the same as reading zero there.
#[derive(Debug, Clone)]
pub struct RotationTaps {
    b: usize,
    offsets: Vec<u32>,
    src: Vec<u32>,
    weight: Vec<f64>,
}

/// `(cos, sin)` of an angle in degrees, exact at multiples of 90.
pub fn cos_sin_deg(angle: f64) -> (f64, f64) {
    let mut r = angle % 360.0;
    if r < 0.0 {
        r += 360.0;
    }
    if r >= 180.0 {
        // r - 180 is exact here, so opposite directions get exactly negated taps.
        let (c, s) = cos_sin_deg(r - 180.0);
        return (-c, -s);
    }
    if r % 90.0 == 0.0 {
        match (r / 90.0) as u32 {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let (s, c) = r.to_radians().sin_cos();
        (c, s)
    }
}

impl RotationTaps {
    pub fn new(a: usize, b: usize, angle: f64) -> Self {
        let (cos, sin) = cos_sin_deg(angle);
        let ca = (a as f64 - 1.0) / 2.0;
        let cb = (b as f64 - 1.0) / 2.0;
        let mut offsets = Vec::with_capacity(a * b + 1);
        let mut src = Vec::with_capacity(a * b * 4);
        let mut weight = Vec::with_capacity(a * b * 4);
        offsets.push(0);
        for i in 0..a {
            let u = i as f64 - ca;
            for j in 0..b {
                let v = j as f64 - cb;
                let sa = ca + cos * u + sin * v;
                let sb = cb - sin * u + cos * v;
                let (fa, fb) = (sa.floor(), sb.floor());
                let (ta, tb) = (sa - fa, sb - fb);
                for (da, wa) in [(0.0, 1.0 - ta), (1.0, ta)] {
                    for (db, wb) in [(0.0, 1.0 - tb), (1.0, tb)] {
                        let w = wa * wb;
                        if w == 0.0 {
                            continue;
                        }
                        let (ia, ib) = (fa + da, fb + db);
                        if ia < 0.0 || ib < 0.0 || ia >= a as f64 || ib >= b as f64 {
                            continue;
                        }
                        src.push((ia as usize * b + ib as usize) as u32);
                        weight.push(w);
                    }
                }
                offsets.push(src.len() as u32);
            }
        }
        RotationTaps {
            b,
            offsets,
            src,
            weight,
        }
    }

    /// Taps of output lattice point `(i, j)` as `(source a*b index, weight)`.
    #[inline]
    pub fn taps(&self, i: usize, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let p = i * self.b + j;
        let (lo, hi) = (self.offsets[p] as usize, self.offsets[p + 1] as usize);
        self.src[lo..hi]
            .iter()
            .zip(&self.weight[lo..hi])
            .map(|(&s, &w)| (s as usize, w))
    }
}

#[inline]
fn axpy<T: Scalar>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Rotated sample row `(i, j, :)` written into `row`.
#[inline]
fn rotated_row<T: Scalar>(
    x: &[T],
    c: usize,
    taps: &RotationTaps,
    i: usize,
    j: usize,
    row: &mut [T],
) {
    row.iter_mut().for_each(|v| *v = T::zero());
    for (s, w) in taps.taps(i, j) {
        axpy(row, T::from_f64(w), &x[s * c..(s + 1) * c]);
    }
}

pub fn rotate<T: Scalar>(x: &[T], dims: [usize; 3], taps: &RotationTaps) -> Vec<T> {
    let [a, b, c] = dims;
    let mut out = vec![T::zero(); a * b * c];
    for i in 0..a {
        for j in 0..b {
            let p = i * b + j;
            rotated_row(x, c, taps, i, j, &mut out[p * c..(p + 1) * c]);
        }
    }
    out
}

/// Maximum along `a` of the rotated volume, with the winning depth per pixel.
/// Ties keep the smallest depth.
pub fn mip_forward<T: Scalar>(
    x: &[T],
    dims: [usize; 3],
    taps: &RotationTaps,
) -> (Vec<T>, Vec<u32>) {
    let [a, b, c] = dims;
    let mut img = vec![T::zero(); b * c];
    let mut arg = vec![0u32; b * c];
    let mut row = vec![T::zero(); c];
    for j in 0..b {
        let dst = &mut img[j * c..(j + 1) * c];
        let am = &mut arg[j * c..(j + 1) * c];
        rotated_row(x, c, taps, 0, j, dst);
        for i in 1..a {
            rotated_row(x, c, taps, i, j, &mut row);
            for k in 0..c {
                if row[k] > dst[k] {
                    dst[k] = row[k];
                    am[k] = i as u32;
                }
            }
        }
    }
    (img, arg)
}

/// Routes each pixel's gradient through the bilinear taps of its argmax sample.
pub fn mip_backward<T: Scalar>(
    g: &[T],
    argmax: &[u32],
    dims: [usize; 3],
    taps: &RotationTaps,
    out: &mut [T],
) {
    let [_, b, c] = dims;
    for j in 0..b {
        for k in 0..c {
            let gi = g[j * c + k];
            if gi == T::zero() {
                continue;
            }
            let i = argmax[j * c + k] as usize;
            for (s, w) in taps.taps(i, j) {
                out[s * c + k] += T::from_f64(w) * gi;
            }
        }
    }
}

/// Adds the sum along `a` of the rotated volume into `img` (`b x c`).
pub fn sum_project_add<T: Scalar>(x: &[T], dims: [usize; 3], taps: &RotationTaps, img: &mut [T]) {
    let [a, b, c] = dims;
    for i in 0..a {
        for j in 0..b {
            let dst = &mut img[j * c..(j + 1) * c];
            for (s, w) in taps.taps(i, j) {
                axpy(dst, T::from_f64(w), &x[s * c..(s + 1) * c]);
            }
        }
    }
}

/// Smears `img` back along the rays of the rotated lattice and adds the
/// result into `vol`: the transpose of [`sum_project_add`].
pub fn backproject_add<T: Scalar>(img: &[T], dims: [usize; 3], taps: &RotationTaps, vol: &mut [T]) {
    let [a, b, c] = dims;
    for i in 0..a {
        for j in 0..b {
            let src = &img[j * c..(j + 1) * c];
            for (s, w) in taps.taps(i, j) {
                axpy(&mut vol[s * c..(s + 1) * c], T::from_f64(w), src);
            }
        }
    }
}

/// `out[j,k] = w0 u[j,k] + w1 u[j+1,k]`, zero beyond the last row.
pub fn filter1x2_forward<T: Scalar>(u: &[T], b: usize, c: usize, w0: T, w1: T) -> Vec<T> {
    let mut out: Vec<T> = u.iter().map(|&v| w0 * v).collect();
    for j in 0..b.saturating_sub(1) {
        axpy(
            &mut out[j * c..(j + 1) * c],
            w1,
            &u[(j + 1) * c..(j + 2) * c],
        );
    }
    out
}

pub fn filter1x2_backward_image<T: Scalar>(
    g: &[T],
    b: usize,
    c: usize,
    w0: T,
    w1: T,
    out: &mut [T],
) {
    axpy(out, w0, g);
    for j in 0..b.saturating_sub(1) {
        axpy(
            &mut out[(j + 1) * c..(j + 2) * c],
            w1,
            &g[j * c..(j + 1) * c],
        );
    }
}

pub fn filter1x2_backward_filter<T: Scalar>(g: &[T], u: &[T], b: usize, c: usize) -> (T, T) {
    let g0 = g.iter().zip(u).map(|(&x, &y)| x * y).sum::<T>();
    let g1 = if b > 1 {
        g[..(b - 1) * c]
            .iter()
            .zip(&u[c..])
            .map(|(&x, &y)| x * y)
            .sum::<T>()
    } else {
        T::zero()
    };
    (g0, g1)
}
