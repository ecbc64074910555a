use rand::SeedableRng;
use rand25d_core::metrics::best_threshold_dice;
use rand25d_core::phantom::{foreground_fraction, generate_phantom, PhantomSpec};
use rand_chacha::ChaCha8Rng;

#[test]
fn sparsity_holds_over_100_generations() {
    let spec = PhantomSpec::default();
    let mut nonempty = 0;
    for seed in 0..100 {
        let (_, mask) = generate_phantom(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let f = foreground_fraction(&mask);
        assert!(f <= spec.foreground_budget, "seed {seed}: {f}");
        nonempty += (f > 0.0) as usize;
    }
    assert_eq!(nonempty, 100);
}

#[test]
fn default_intensity_ranges_overlap() {
    let s = PhantomSpec::default();
    assert!(s.distractor_intensity.0 < s.target_intensity.1);
    assert!(s.target_intensity.0 < s.distractor_intensity.1);
    assert!(s.n_distractors > 0);
}

#[test]
fn thresholding_is_inadequate_on_average() {
    let spec = PhantomSpec::default();
    let dcs: Vec<f64> = (0..12)
        .map(|seed| {
            let (scan, mask) =
                generate_phantom(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            best_threshold_dice(&scan, &mask).unwrap().1
        })
        .collect();
    let mean = dcs.iter().sum::<f64>() / dcs.len() as f64;
    assert!(mean < 0.7, "mean best-threshold DC {mean}");
    // Without distractors a threshold separates targets well.
    let clean = PhantomSpec {
        n_distractors: 0,
        ..spec
    };
    let (scan, mask) = generate_phantom(&clean, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(best_threshold_dice(&scan, &mask).unwrap().1 > mean);
}

#[test]
fn scan_is_nonnegative_and_mask_binary() {
    let (scan, mask) =
        generate_phantom(&PhantomSpec::default(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert!(scan.first_invalid_intensity().is_none());
    assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    // Soft walls: some voxels carry a fraction of a tube's level.
    let (lo, hi) = (
        PhantomSpec::default().noise as f32,
        PhantomSpec::default().target_intensity.0 as f32,
    );
    assert!(scan.data().iter().any(|&v| v > lo && v < hi));
}
