//! Synthetic vessel phantoms: labeled target tubes, unlabeled bright
//! distractor tubes and additive background noise.
//!
//! Tubes are smoothed random polylines running along `c`, confined to the
//! cylinder inscribed in the (a, b) rotation plane so every projection
//! direction sees all vessels. Intensity falls off linearly over one voxel
//! at the tube wall; a voxel is labeled when its centre lies inside a
//! target tube.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::Volume;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub n_target_vessels: usize,
    pub n_distractors: usize,
    /// Target tube radius range in voxels.
    pub radius: (f64, f64),
    /// Distractor tube radius range in voxels.
    pub distractor_radius: (f64, f64),
    pub target_intensity: (f64, f64),
    pub distractor_intensity: (f64, f64),
    /// Upper bound of the uniform additive background noise.
    pub noise: f64,
    /// Maximum labeled fraction of the mask.
    pub foreground_budget: f64,
    /// Control points per tube before smoothing.
    pub control_points: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [32, 64, 64],
            n_target_vessels: 2,
            n_distractors: 2,
            radius: (1.5, 2.5),
            distractor_radius: (1.5, 2.5),
            target_intensity: (0.45, 0.75),
            distractor_intensity: (0.65, 1.0),
            noise: 0.15,
            foreground_budget: 0.02,
            control_points: 5,
        }
    }
}

impl PhantomSpec {
    pub fn with_dims(dims: [usize; 3]) -> Self {
        PhantomSpec {
            dims,
            ..Default::default()
        }
    }

    /// Radius of the disk in the (a, b) plane that tube centrelines stay in.
    fn centre_disk(&self) -> f64 {
        let [a, b, _] = self.dims;
        (a.min(b) as f64) / 2.0 - self.radius.1.max(self.distractor_radius.1) - 1.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("phantom spec: {m}")));
        if self.dims.contains(&0) {
            return bad("extents must be at least 1");
        }
        let ordered = |r: (f64, f64)| r.0 <= r.1 && r.0.is_finite() && r.1.is_finite();
        let positive = |r: (f64, f64)| ordered(r) && r.0 > 0.0;
        if !positive(self.radius) || !positive(self.distractor_radius) {
            return bad("radius range must be positive and ordered");
        }
        if !ordered(self.target_intensity)
            || !ordered(self.distractor_intensity)
            || self.target_intensity.0 < 0.0
        {
            return bad("intensity ranges must be ordered and nonnegative");
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return bad("noise must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.foreground_budget) {
            return bad("foreground budget must lie in [0, 1]");
        }
        if self.n_target_vessels > 0 && self.foreground_budget == 0.0 {
            return bad("a zero foreground budget admits no target vessels");
        }
        if self.control_points < 2 {
            return bad("tubes need at least two control points");
        }
        if self.n_target_vessels + self.n_distractors > 0 && self.centre_disk() < 0.0 {
            return bad("volume too small for a tube of the configured radius");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Tube {
    points: Vec<[f64; 3]>,
    radius: f64,
    intensity: f64,
}

fn random_in_disk<R: Rng>(rng: &mut R, r: f64) -> (f64, f64) {
    loop {
        let (x, y) = (rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0));
        if x * x + y * y <= 1.0 {
            return (x * r, y * r);
        }
    }
}

fn clamp_to_disk(p: (f64, f64), r: f64) -> (f64, f64) {
    let n = (p.0 * p.0 + p.1 * p.1).sqrt();
    if n > r && n > 0.0 {
        (p.0 * r / n, p.1 * r / n)
    } else {
        p
    }
}

fn chaikin(points: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(2 * points.len());
    out.push(points[0]);
    for w in points.windows(2) {
        let (p, q) = (w[0], w[1]);
        let mix = |t: f64| {
            [
                p[0] + t * (q[0] - p[0]),
                p[1] + t * (q[1] - p[1]),
                p[2] + t * (q[2] - p[2]),
            ]
        };
        out.push(mix(0.25));
        out.push(mix(0.75));
    }
    out.push(points[points.len() - 1]);
    out
}

fn sample_tube<R: Rng>(
    spec: &PhantomSpec,
    rng: &mut R,
    radius: (f64, f64),
    intensity: (f64, f64),
) -> Tube {
    let [a, b, c] = spec.dims;
    let (ca, cb) = ((a as f64 - 1.0) / 2.0, (b as f64 - 1.0) / 2.0);
    let disk = spec.centre_disk().max(0.0);
    let start = random_in_disk(rng, disk);
    let end = random_in_disk(rng, disk);
    let n = spec.control_points;
    let jitter = disk / 3.0;
    // Extend slightly past both c faces so tubes do not end inside the volume.
    let (k0, k1) = (-2.0, c as f64 + 1.0);
    let mut pts = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / (n - 1) as f64;
        let mut p = (
            start.0 + t * (end.0 - start.0),
            start.1 + t * (end.1 - start.1),
        );
        if i > 0 && i + 1 < n && jitter > 0.0 {
            p.0 += rng.gen_range(-jitter..=jitter);
            p.1 += rng.gen_range(-jitter..=jitter);
            p = clamp_to_disk(p, disk);
        }
        pts.push([ca + p.0, cb + p.1, k0 + t * (k1 - k0)]);
    }
    let points = chaikin(&chaikin(&pts));
    let radius = if radius.0 < radius.1 {
        rng.gen_range(radius.0..=radius.1)
    } else {
        radius.0
    };
    let level = if intensity.0 < intensity.1 {
        rng.gen_range(intensity.0..=intensity.1)
    } else {
        intensity.0
    };
    Tube {
        points,
        radius,
        intensity: level,
    }
}

fn segment_distance(p: [f64; 3], s0: [f64; 3], s1: [f64; 3]) -> f64 {
    let d = [s1[0] - s0[0], s1[1] - s0[1], s1[2] - s0[2]];
    let w = [p[0] - s0[0], p[1] - s0[1], p[2] - s0[2]];
    let dd = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    let t = if dd > 0.0 {
        ((w[0] * d[0] + w[1] * d[1] + w[2] * d[2]) / dd).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [w[0] - t * d[0], w[1] - t * d[1], w[2] - t * d[2]];
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt()
}

/// Calls `f(linear index, distance)` for every voxel within `radius + 1`
/// of the tube centreline.
fn for_each_near(dims: [usize; 3], tube: &Tube, mut f: impl FnMut(usize, f64)) {
    let [a, b, c] = dims;
    let reach = tube.radius + 1.0;
    let lo = |ax: usize| {
        tube.points
            .iter()
            .map(|p| p[ax])
            .fold(f64::INFINITY, f64::min)
            - reach
    };
    let hi = |ax: usize| {
        tube.points
            .iter()
            .map(|p| p[ax])
            .fold(f64::NEG_INFINITY, f64::max)
            + reach
    };
    let range = |ax: usize, n: usize| {
        let l = lo(ax).floor().max(0.0) as usize;
        let h = (hi(ax).ceil().max(-1.0) as isize + 1).clamp(0, n as isize) as usize;
        l..h.max(l)
    };
    for i in range(0, a) {
        for j in range(1, b) {
            for k in range(2, c) {
                let p = [i as f64, j as f64, k as f64];
                let mut d = f64::INFINITY;
                for w in tube.points.windows(2) {
                    let lo_k = w[0][2].min(w[1][2]) - reach;
                    let hi_k = w[0][2].max(w[1][2]) + reach;
                    if p[2] < lo_k || p[2] > hi_k {
                        continue;
                    }
                    d = d.min(segment_distance(p, w[0], w[1]));
                }
                if d <= reach {
                    f((i * b + j) * c + k, d);
                }
            }
        }
    }
}

/// Draws a `(scan, mask)` pair. The mask's labeled fraction never exceeds
/// the foreground budget: a target tube that would break it is redrawn, and
/// dropped after repeated failures.
pub fn generate_phantom<R: Rng>(
    spec: &PhantomSpec,
    rng: &mut R,
) -> Result<(Volume<f32>, Volume<f32>)> {
    spec.validate()?;
    let dims = spec.dims;
    let n = dims.iter().product::<usize>();
    let mut signal = vec![0.0f64; n];
    let mut mask = vec![0.0f32; n];
    let budget = (spec.foreground_budget * n as f64).floor() as usize;
    let mut labeled = 0usize;

    for _ in 0..spec.n_target_vessels {
        for _attempt in 0..16 {
            let tube = sample_tube(spec, rng, spec.radius, spec.target_intensity);
            let mut fresh = Vec::new();
            for_each_near(dims, &tube, |idx, d| {
                if d <= tube.radius && mask[idx] == 0.0 {
                    fresh.push(idx);
                }
            });
            if labeled + fresh.len() > budget {
                continue;
            }
            labeled += fresh.len();
            for idx in fresh {
                mask[idx] = 1.0;
            }
            render(dims, &tube, &mut signal);
            break;
        }
    }
    for _ in 0..spec.n_distractors {
        let tube = sample_tube(spec, rng, spec.distractor_radius, spec.distractor_intensity);
        render(dims, &tube, &mut signal);
    }
    let scan: Vec<f32> = signal
        .iter()
        .map(|&s| {
            let noise = if spec.noise > 0.0 {
                rng.gen_range(0.0..spec.noise)
            } else {
                0.0
            };
            (s + noise).max(0.0) as f32
        })
        .collect();
    Ok((Volume::new(dims, scan)?, Volume::new(dims, mask)?))
}

fn render(dims: [usize; 3], tube: &Tube, signal: &mut [f64]) {
    for_each_near(dims, tube, |idx, d| {
        let v = tube.intensity * (tube.radius + 0.5 - d).clamp(0.0, 1.0);
        if v > signal[idx] {
            signal[idx] = v;
        }
    });
}

/// Labeled fraction of a binary mask.
pub fn foreground_fraction(mask: &Volume<f32>) -> f64 {
    mask.data().iter().filter(|&&v| v > 0.5).count() as f64 / mask.len() as f64
}
