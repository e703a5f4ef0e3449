use bdlab_core::data::{synth_blobs, Dataset, Split};
use bdlab_core::gan::Generator;
use bdlab_core::metrics::{
    frechet_distance, gan_utility_and_backdoor, sqrt_psd, train_feature_extractor, EvalTarget, ExtractorConfig,
    GanEvaluation, GaussianStats, MetricKind, MetricsError,
};
use bdlab_core::backdoor::TriggerSpec;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_stats(d: usize, rng: &mut impl Rng) -> GaussianStats {
    let a = DMatrix::from_fn(d, d + 3, |_, _| rng.random_range(-1.0..1.0));
    GaussianStats {
        mean: DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0)),
        cov: &a * a.transpose() / (d + 3) as f64,
        n: 1000,
    }
}

/// `|μa−μb|² + Σᵢ(σa,ᵢ + σb,ᵢ − 2√(σa,ᵢ·σb,ᵢ))`.
fn diagonal_oracle(ma: &[f64], sa: &[f64], mb: &[f64], sb: &[f64]) -> f64 {
    let mean: f64 = ma.iter().zip(mb).map(|(a, b)| (a - b).powi(2)).sum();
    let trace: f64 = sa.iter().zip(sb).map(|(a, b)| a + b - 2.0 * (a * b).sqrt()).sum();
    mean + trace
}

fn diag_stats(mean: &[f64], var: &[f64]) -> GaussianStats {
    GaussianStats {
        mean: DVector::from_column_slice(mean),
        cov: DMatrix::from_diagonal(&DVector::from_column_slice(var)),
        n: 1000,
    }
}

#[test]
fn diagonal_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let d = rng.random_range(1..=32);
        let v = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| (0..d).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
        let (ma, mb) = (v(&mut rng, -3.0, 3.0), v(&mut rng, -3.0, 3.0));
        let (sa, sb) = (v(&mut rng, 0.01, 4.0), v(&mut rng, 0.01, 4.0));
        let got = frechet_distance(&diag_stats(&ma, &sa), &diag_stats(&mb, &sb)).unwrap();
        worst = worst.max((got - diagonal_oracle(&ma, &sa, &mb, &sb)).abs());
    }
    assert!(worst <= 1e-8, "max abs error {worst}");
}

#[test]
fn identical_stats_are_at_distance_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for d in [1, 5, 16, 64] {
        let s = random_stats(d, &mut rng);
        let fd = frechet_distance(&s, &s).unwrap();
        assert!(fd.abs() <= 1e-8, "d={d}: {fd}");
    }
}

#[test]
fn identity_covariances_cancel_the_trace() {
    let v = [0.5, -1.0, 2.0];
    let a = diag_stats(&[0.0; 3], &[1.0; 3]);
    let b = diag_stats(&v, &[1.0; 3]);
    assert!((frechet_distance(&a, &b).unwrap() - 5.25).abs() < 1e-12);
}

#[test]
fn distance_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for d in [2, 8, 32] {
        let (a, b) = (random_stats(d, &mut rng), random_stats(d, &mut rng));
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        assert!((ab - ba).abs() <= 1e-8, "{ab} vs {ba}");
        assert!(ab > 0.0);
    }
}

#[test]
fn sqrt_residual_for_random_psd_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for d in [1, 2, 7, 16, 33, 64] {
        // Both full-rank and rank-deficient products.
        for k in [d / 2 + 1, d + 5] {
            let a = DMatrix::from_fn(d, k, |_, _| rng.random_range(-1.0..1.0));
            let m = &a * a.transpose();
            let s = sqrt_psd(&m);
            let residual = (&s * &s - &m).norm() / m.norm();
            assert!(residual <= 1e-6, "d={d} k={k}: residual {residual}");
        }
    }
}

#[test]
fn badly_broken_stats_are_a_numerics_error() {
    // A covariance with a large negative eigenvalue is not PSD; the trace
    // identity then fails well below the clamp tolerance.
    let a = diag_stats(&[0.0], &[-4.0]);
    let b = diag_stats(&[0.0], &[1.0]);
    assert!(matches!(frechet_distance(&a, &b), Err(MetricsError::Numerics(_))));
}

fn labelled() -> Dataset {
    synth_blobs(800, 8, 8, 31).unwrap()
}

#[test]
fn extractor_is_seeded_and_accurate_on_blobs() {
    let data = labelled();
    let cfg = ExtractorConfig { epochs: 10, ..ExtractorConfig::new(5) };
    let a = train_feature_extractor(&data, &cfg).unwrap();
    let b = train_feature_extractor(&data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.feature_dim(), 64);
    assert_eq!(a.classes(), 4);
    assert!(a.provenance().holdout_accuracy >= 0.9);
    let c = train_feature_extractor(&data, &ExtractorConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(a.mlp(), c.mlp());
}

#[test]
fn extractor_contract_and_calibration_errors() {
    let data = labelled();
    let unlabelled = Dataset::new(data.images().clone(), None, "bare", Split::Train).unwrap();
    assert!(matches!(
        train_feature_extractor(&unlabelled, &ExtractorConfig::new(1)),
        Err(MetricsError::Contract(_))
    ));
    let one_class = Dataset::new(data.images().clone(), Some(vec![3; data.len()]), "one", Split::Train).unwrap();
    assert!(matches!(
        train_feature_extractor(&one_class, &ExtractorConfig::new(1)),
        Err(MetricsError::Contract(_))
    ));
    let mut strict = ExtractorConfig::new(1);
    strict.min_accuracy = 1.01;
    assert!(matches!(
        train_feature_extractor(&data, &strict),
        Err(MetricsError::Calibration { .. })
    ));
}

#[test]
fn small_sample_reports_rank_warning_and_identical_generators_tie() {
    let data = labelled();
    let extractor = train_feature_extractor(&data, &ExtractorConfig { epochs: 10, ..ExtractorConfig::new(2) }).unwrap();
    let g = Generator::new(16, data.image_shape(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let trigger = TriggerSpec::last_noise();
    let eval = |n| GanEvaluation {
        clean: &g,
        backdoored: &g,
        target_baseline: None,
        extractor: &extractor,
        original_test: &data,
        target: EvalTarget::Distribution(&data),
        n_samples: n,
        trigger: &trigger,
        seed: 3,
    };
    let small = gan_utility_and_backdoor(&eval(32)).unwrap();
    assert_eq!(small.warnings.len(), 1, "{:?}", small.warnings);
    assert!(small.warnings[0].contains("rank-deficient"));
    assert_eq!(small.utility_metric, MetricKind::ProxyFid);
    assert_eq!(small.clean_utility, small.backdoored_utility);
    assert_eq!(small.utility_delta, 0.0);

    let full = gan_utility_and_backdoor(&eval(200)).unwrap();
    assert!(full.warnings.is_empty());
    assert_eq!(full, gan_utility_and_backdoor(&eval(200)).unwrap());
}
