//! Analytic gradients of every primitive against central differences, in
//! double precision with h = 1e-3, over 20 seeds each.

use rand::{Rng, SeedableRng};
use rand25d_core::autodiff::{Graph, Padding, Var};
use rand25d_core::geometry::{rotate_volume, Volume};
use rand25d_core::gradcheck::{finite_diff_check, relative_error, GradCheckReport};
use rand25d_core::pipeline::{forward_path1, Model25D};
use rand25d_core::unet::{UNetConfig, UNetModel};
use rand25d_core::{Result, Tensor};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn rand_tensor(dims: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `sum(v * w)` for fixed random weights, so every output coordinate matters.
fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let dims = g.shape(v).to_vec();
    let w = rand_tensor(&dims, -1.0, 1.0, &mut rng);
    let wv = g.constant(w.shape().clone(), w.into_values())?;
    let p = g.mul(v, wv)?;
    Ok(g.sum(p))
}

fn assert_passes(name: &str, seed: u64, r: &GradCheckReport, max_skipped: usize) {
    assert!(
        r.passes(TOL),
        "{name} seed {seed}: rel err {} at {:?}",
        r.max_rel_error,
        r.worst
    );
    assert!(
        r.skipped.len() <= max_skipped,
        "{name} seed {seed}: {} coordinates flagged",
        r.skipped.len()
    );
    assert!(r.checked > 0);
}

/// Smallest gap between the two largest rotated samples of any ray.
fn min_mip_gap(x: &Tensor<f64>, angles: &[f64]) -> f64 {
    let d = x.dims();
    let vol = Volume::new([d[0], d[1], d[2]], x.values().to_vec()).unwrap();
    let mut gap = f64::INFINITY;
    for &alpha in angles {
        let r = rotate_volume(&vol, alpha);
        for j in 0..d[1] {
            for k in 0..d[2] {
                let (mut top, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for i in 0..d[0] {
                    let v = r.get(i, j, k);
                    if v > top {
                        second = top;
                        top = v;
                    } else if v > second {
                        second = v;
                    }
                }
                gap = gap.min(top - second);
            }
        }
    }
    gap
}

/// Random volume whose MIP argmaxes cannot switch under a probe of size H:
/// one probe moves any rotated sample by at most H.
fn off_tie_volume(dims: &[usize], angles: &[f64], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    loop {
        let x = rand_tensor(dims, 0.0, 1.0, rng);
        if min_mip_gap(&x, angles) > 4.0 * H {
            return x;
        }
    }
}

fn for_seeds(
    name: &str,
    max_skipped: usize,
    check: impl Fn(u64, &mut ChaCha8Rng) -> GradCheckReport,
) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = check(seed, &mut rng);
        assert_passes(name, seed, &r, max_skipped);
    }
}

#[test]
fn conv2d_input_kernel_and_bias() {
    for_seeds("conv2d", 0, |seed, rng| {
        let x = rand_tensor(&[2, 5, 6], -1.0, 1.0, rng);
        let k = rand_tensor(&[3, 2, 3, 3], -1.0, 1.0, rng);
        let b = rand_tensor(&[3], -1.0, 1.0, rng);
        let pad = if seed % 2 == 0 {
            Padding::Same
        } else {
            Padding::Valid
        };
        let (k1, b1) = (k.clone(), b.clone());
        let r1 = finite_diff_check(
            |g, v| {
                let (kv, bv) = (g.input(&k1), g.input(&b1));
                let y = g.conv2d(v, kv, bv, pad)?;
                weighted_sum(g, y, seed)
            },
            &x,
            H,
        )
        .unwrap();
        let x2 = x.clone();
        let r2 = finite_diff_check(
            |g, v| {
                let (xv, bv) = (g.input(&x2), g.input(&b));
                let y = g.conv2d(xv, v, bv, pad)?;
                weighted_sum(g, y, seed)
            },
            &k,
            H,
        )
        .unwrap();
        let r3 = finite_diff_check(
            |g, v| {
                let (xv, kv) = (g.input(&x), g.input(&k));
                let y = g.conv2d(xv, kv, v, pad)?;
                weighted_sum(g, y, seed)
            },
            &b1,
            H,
        )
        .unwrap();
        [r1, r2, r3]
            .into_iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .unwrap()
    });
}

#[test]
fn sigmoid() {
    for_seeds("sigmoid", 0, |seed, rng| {
        let x = rand_tensor(&[3, 4], -4.0, 4.0, rng);
        finite_diff_check(
            |g, v| {
                let y = g.sigmoid(v);
                weighted_sum(g, y, seed)
            },
            &x,
            H,
        )
        .unwrap()
    });
}

#[test]
fn relu_away_from_zero() {
    for_seeds("relu", 0, |seed, rng| {
        let mut x = rand_tensor(&[12], -2.0, 2.0, rng);
        for v in x.values_mut() {
            if v.abs() < 0.1 {
                *v += 0.2;
            }
        }
        finite_diff_check(
            |g, v| {
                let y = g.relu(v);
                weighted_sum(g, y, seed)
            },
            &x,
            H,
        )
        .unwrap()
    });
}

#[test]
fn maxpool2d_off_ties() {
    for_seeds("maxpool2d", 0, |seed, rng| {
        // Values on a coarse lattice with random order are at least 0.01
        // apart, far outside the probe step.
        let mut vals: Vec<f64> = (0..2 * 4 * 6).map(|i| i as f64 * 0.01).collect();
        use rand::seq::SliceRandom;
        vals.shuffle(rng);
        let x = Tensor::from_vec([2, 4, 6], vals).unwrap();
        finite_diff_check(
            |g, v| {
                let y = g.maxpool2d(v)?;
                weighted_sum(g, y, seed)
            },
            &x,
            H,
        )
        .unwrap()
    });
}

#[test]
fn upsample2d() {
    for_seeds("upsample2d", 0, |seed, rng| {
        let x = rand_tensor(&[2, 3, 2], -1.0, 1.0, rng);
        finite_diff_check(
            |g, v| {
                let y = g.upsample2d(v)?;
                weighted_sum(g, y, seed)
            },
            &x,
            H,
        )
        .unwrap()
    });
}

#[test]
fn concat_and_slice_channels() {
    for_seeds("concat", 0, |seed, rng| {
        let x = rand_tensor(&[2, 3, 3], -1.0, 1.0, rng);
        let other = rand_tensor(&[1, 3, 3], -1.0, 1.0, rng);
        finite_diff_check(
            |g, v| {
                let o = g.input(&other);
                let c = g.concat_channels(o, v)?;
                let y = g.slice_channels(c, 1, 2)?;
                let z = g.mul(y, y)?;
                weighted_sum(g, z, seed)
            },
            &x,
            H,
        )
        .unwrap()
    });
}

#[test]
fn avgpool3d_same() {
    for_seeds("avgpool3d_same", 0, |seed, rng| {
        let x = rand_tensor(&[3, 4, 5], -1.0, 1.0, rng);
        finite_diff_check(
            |g, v| {
                let y = g.avgpool3d_same(v)?;
                weighted_sum(g, y, seed)
            },
            &x,
            H,
        )
        .unwrap()
    });
}

#[test]
fn affine_scalar_input_gain_and_shift() {
    for_seeds("affine", 0, |seed, rng| {
        let x = rand_tensor(&[4, 3], -1.0, 1.0, rng);
        let gs = rand_tensor(&[2], -2.0, 2.0, rng);
        let xc = x.clone();
        let on_x = finite_diff_check(
            |g, v| {
                let gain = g.input(&Tensor::scalar(gs.values()[0]));
                let shift = g.input(&Tensor::scalar(gs.values()[1]));
                let y = g.affine(v, gain, shift)?;
                let s = g.sigmoid(y);
                weighted_sum(g, s, seed)
            },
            &x,
            H,
        )
        .unwrap();
        let (g0, s0) = (gs.values()[0], gs.values()[1]);
        let x2 = x.clone();
        let on_gain = finite_diff_check(
            |g, v| {
                let xv = g.input(&xc);
                let shift = g.input(&Tensor::scalar(s0));
                let y = g.affine(xv, v, shift)?;
                let s = g.sigmoid(y);
                weighted_sum(g, s, seed)
            },
            &Tensor::scalar(g0),
            H,
        )
        .unwrap();
        let on_shift = finite_diff_check(
            |g, v| {
                let xv = g.input(&x2);
                let gain = g.input(&Tensor::scalar(g0));
                let y = g.affine(xv, gain, v)?;
                let s = g.sigmoid(y);
                weighted_sum(g, s, seed)
            },
            &Tensor::scalar(s0),
            H,
        )
        .unwrap();
        [on_x, on_gain, on_shift]
            .into_iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .unwrap()
    });
}

#[test]
fn filtrate_image_and_filter() {
    for_seeds("filter1x2", 0, |seed, rng| {
        let img = rand_tensor(&[5, 4], -1.0, 1.0, rng);
        let f = rand_tensor(&[2], -1.0, 1.0, rng);
        let fc = f.clone();
        let ic = img.clone();
        let on_img = finite_diff_check(
            |g, v| {
                let fv = g.input(&fc);
                let y = g.filter1x2(v, fv)?;
                weighted_sum(g, y, seed)
            },
            &img,
            H,
        )
        .unwrap();
        let on_filter = finite_diff_check(
            |g, v| {
                let iv = g.input(&ic);
                let y = g.filter1x2(iv, v)?;
                weighted_sum(g, y, seed)
            },
            &f,
            H,
        )
        .unwrap();
        [on_img, on_filter]
            .into_iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .unwrap()
    });
}

#[test]
fn backproject_images() {
    for_seeds("backproject", 0, |seed, rng| {
        let dims = [5, 6, 3];
        let imgs = rand_tensor(&[2, 6, 3], -1.0, 1.0, rng);
        let angles = [rng.gen_range(0.0..90.0), rng.gen_range(90.0..180.0)];
        finite_diff_check(
            |g, v| {
                let a = g.slice_channels(v, 0, 1)?;
                let b = g.slice_channels(v, 1, 1)?;
                let a = g.reshape(a, &[6, 3])?;
                let b = g.reshape(b, &[6, 3])?;
                let y = g.backproject(&[a, b], &angles, dims)?;
                weighted_sum(g, y, seed)
            },
            &imgs,
            H,
        )
        .unwrap()
    });
}

#[test]
fn sum_project() {
    for_seeds("sum_project", 0, |seed, rng| {
        let x = rand_tensor(&[5, 6, 3], 0.0, 1.0, rng);
        let alpha = rng.gen_range(0.0..180.0);
        finite_diff_check(
            |g, v| {
                let y = g.sum_project(v, alpha)?;
                weighted_sum(g, y, seed)
            },
            &x,
            H,
        )
        .unwrap()
    });
}

#[test]
fn mip_project_off_ties() {
    for_seeds("mip_project", 0, |seed, rng| {
        let alpha = rng.gen_range(0.0..180.0);
        let x = off_tie_volume(&[5, 6, 3], &[alpha], rng);
        finite_diff_check(
            |g, v| {
                let y = g.mip_project(v, alpha)?;
                weighted_sum(g, y, seed)
            },
            &x,
            H,
        )
        .unwrap()
    });
}

#[test]
fn finetune_head() {
    for_seeds("finetune_head", 0, |seed, rng| {
        let x = rand_tensor(&[3, 4, 4], 0.0, 3.0, rng);
        finite_diff_check(
            |g, v| {
                let gain = g.input(&Tensor::scalar(0.8));
                let shift = g.input(&Tensor::scalar(-1.5));
                let y = g.finetune_head(v, gain, shift)?;
                weighted_sum(g, y, seed)
            },
            &x,
            H,
        )
        .unwrap()
    });
}

#[test]
fn dice_loss_prediction() {
    for_seeds("dice_loss", 0, |_, rng| {
        let pred = rand_tensor(&[20], 0.01, 0.99, rng);
        let target: Vec<f64> = (0..20)
            .map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
            .collect();
        finite_diff_check(|g, v| g.dice_loss(&target, v), &pred, H).unwrap()
    });
}

#[test]
fn leaf_used_twice_doubles_its_gradient() {
    let x = Tensor::from_vec([3], vec![0.2, -0.4, 1.1]).unwrap();
    let grad = |twice: bool| {
        let mut g = Graph::new();
        let v = g.param(&x);
        let s = g.sigmoid(v);
        let mut l = g.sum(s);
        if twice {
            let s2 = g.sigmoid(v);
            let l2 = g.sum(s2);
            l = g.add(l, l2).unwrap();
        }
        g.backward(l).unwrap().get(v).unwrap().to_vec()
    };
    let (once, twice) = (grad(false), grad(true));
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn maxpool_backward_routes_mass_to_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[2, 4, 4], -1.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let v = g.param(&x);
    let y = g.maxpool2d(v).unwrap();
    let upstream = rand_tensor(&[2, 2, 2], 0.0, 1.0, &mut rng);
    let w = g.constant([2, 2, 2], upstream.values().to_vec()).unwrap();
    let p = g.mul(y, w).unwrap();
    let l = g.sum(p);
    let gx = g.backward(l).unwrap().get(v).unwrap().to_vec();
    let deposited: f64 = gx.iter().sum();
    let total: f64 = upstream.values().iter().sum();
    assert!((deposited - total).abs() < 1e-12);
    assert_eq!(gx.iter().filter(|&&d| d != 0.0).count(), 8);
}

fn path1_model(seed: u64) -> Model25D<f64> {
    let unet = UNetModel::<f64>::new(UNetConfig::new(2, 2).unwrap(), seed).unwrap();
    let mut m = Model25D::new(unet, 2, 4).unwrap();
    // Non-identity filters and head so every factor of the chain is exercised.
    m.bank_p.filters_mut()[0]
        .values_mut()
        .copy_from_slice(&[0.9, 0.2]);
    m.bank_p.filters_mut()[1]
        .values_mut()
        .copy_from_slice(&[1.1, -0.3]);
    m.head1.gain.values_mut()[0] = 1.3;
    m
}

/// Re-checks `coords` with a central difference of step 1e-6, fine enough
/// to resolve kinks that sit inside the H-scale probe. Returns the largest
/// relative error.
fn recheck_fine<F>(f: &F, x: &Tensor<f64>, coords: &[usize]) -> f64
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let v = g.param(x);
        let out = f(&mut g, v).unwrap();
        g.backward(out).unwrap().get(v).unwrap().to_vec()
    };
    let eval = |t: &Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.input(t);
        let out = f(&mut g, v).unwrap();
        g.value(out)[0]
    };
    let h = 1e-6;
    coords
        .iter()
        .map(|&i| {
            let (mut up, mut down) = (x.clone(), x.clone());
            up.values_mut()[i] += h;
            down.values_mut()[i] -= h;
            let numeric = (eval(&up) - eval(&down)) / (2.0 * h);
            relative_error(analytic[i], numeric)
        })
        .fold(0.0, f64::max)
}

#[test]
fn forward_path1_composition() {
    // Whole path on a 6x8x8 volume with p = 2, with respect to the input.
    // The MIP is kept off ties. A ReLU or max-pool switch inside the U-net
    // can still sit within the probe step and flag every voxel feeding its
    // receptive field; those coordinates are re-checked with a fine step.
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = path1_model(seed);
        let angles = [15.0, 105.0];
        let x = off_tie_volume(&[6, 8, 8], &angles, &mut rng);
        let f = |g: &mut Graph<f64>, v: Var| {
            let bound = model.bind(g);
            let p1 = forward_path1(&model, g, &bound, v, &angles)?;
            weighted_sum(g, p1.y_aux, seed)
        };
        let r = finite_diff_check(f, &x, H).unwrap();
        assert!(
            r.passes(TOL),
            "seed {seed}: rel err {} at {:?}",
            r.max_rel_error,
            r.worst
        );
        assert!(
            r.skipped.len() < x.len() / 4,
            "seed {seed}: {} flagged",
            r.skipped.len()
        );
        let fine = recheck_fine(&f, &x, &r.skipped);
        assert!(
            fine < TOL,
            "seed {seed}: flagged coordinates off by {fine} at the fine step"
        );
    }
}

#[test]
fn forward_path1_parameters() {
    // Filter, head and a U-net weight swapped for the probed leaf.
    let seed = 4;
    let model = path1_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&[6, 8, 8], 0.0, 1.0, &mut rng);
    let angles = [15.0, 105.0];
    type Swap = fn(&mut rand25d_core::pipeline::BoundModel, Var);
    let cases: [(&str, Tensor<f64>, Swap); 4] = [
        ("bank_p[1]", model.bank_p.filters()[1].clone(), |b, v| {
            b.bank_p[1] = v
        }),
        ("head1.gain", model.head1.gain.clone(), |b, v| b.head1.0 = v),
        ("head1.shift", model.head1.shift.clone(), |b, v| {
            b.head1.1 = v
        }),
        (
            "unet head weight",
            model.unet.params()[model.unet.params().len() - 2].clone(),
            |b, v| {
                let n = b.unet.len();
                b.unet[n - 2] = v
            },
        ),
    ];
    for (name, t, swap) in cases {
        let r = finite_diff_check(
            |g, v| {
                let xv = g.input(&x);
                let mut bound = model.bind(g);
                swap(&mut bound, v);
                let p1 = forward_path1(&model, g, &bound, xv, &angles)?;
                weighted_sum(g, p1.y_aux, seed)
            },
            &t,
            H,
        )
        .unwrap();
        assert_passes(name, seed, &r, 0);
    }
}
