//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! MNIST is read from `$BACKDOOR_LAB_DATA` (or `data/mnist` at the workspace
//! root). The full run trains three autoencoders and three GANs on one CPU
//! core and takes well over an hour. Failures are reported, not fatal, unless
//! `ACCEPTANCE_STRICT` is set.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use bdlab_core::autoencoder::{train_autoencoder, AeTrainConfig, AutoencoderModel};
use bdlab_core::backdoor::{TargetSpec, TriggerSpec};
use bdlab_core::data::{filter_by_labels, load_mnist, write_idx, Dataset, Split};
use bdlab_core::gan::{losses, train_gan, GanTrainConfig, Generator};
use bdlab_core::harness::{run_experiment, ExperimentConfig, Model, ModelCheckpoint, DATA_ENV};
use bdlab_core::metrics::{
    backdoor_error_ae, fixed_target_mse, frechet_distance, gan_utility_and_backdoor, generate_samples,
    reconstruction_mse, sqrt_psd, train_feature_extractor, EvalTarget, ExtractorConfig, FeatureExtractor,
    GanEvaluation, GaussianStats,
};
use bdlab_tensor::gradcheck::{op_suite, run_suite};
use bdlab_tensor::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// When set, any failed criterion makes the run exit non-zero.
const STRICT_ENV: &str = "ACCEPTANCE_STRICT";

const SEED: u64 = 1;

const AE_EPOCHS: usize = 20;
const AE_BATCH: usize = 64;
const AE_POISON: f64 = 0.5;
const AE_BACKDOOR_MAX: f64 = 0.01;
const AE_INVERSE_MAX: f64 = 0.02;
const AE_GAP_MAX: f64 = 0.01;
const AE_BUDGET: Duration = Duration::from_secs(15 * 60);

const GAN_EPOCHS: usize = 40;
/// The triggered branch fits a single image within a few thousand
/// iterations; longer runs only oscillate around it.
const FIXED_GAN_EPOCHS: usize = 10;
const GAN_BATCH: usize = 64;
const GAN_BUDGET: Duration = Duration::from_secs(45 * 60);
const LOW_DIGITS: [u8; 5] = [0, 1, 2, 3, 4];
const PROBE: usize = 1000;
const TRIGGERED_MIN: f64 = 0.80;
const CLEAN_MAX: f64 = 0.65;
const FID_RATIO_MAX: f64 = 1.25;
const FID_SAMPLES: usize = 2048;
const FIXED_MSE_MAX: f64 = 0.02;
/// Test-split index of the fixed target image (a handwritten 7).
const TARGET_INDEX: usize = 0;

const FRECHET_TOL: f64 = 1e-8;
const SQRT_RESIDUAL_MAX: f64 = 1e-6;
const GRAD_CASES: usize = 20;
const DEGENERACY_TOL: f64 = 1e-6;

struct Outcome {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
}

#[derive(Default)]
struct Ledger(Vec<Outcome>);

impl Ledger {
    fn record(&mut self, id: u8, name: &'static str, pass: bool, detail: String) {
        println!("[{}] {id}. {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.0.push(Outcome { id, name, pass, detail });
    }

    fn fail(&mut self, id: u8, name: &'static str, why: impl std::fmt::Display) {
        self.record(id, name, false, format!("error: {why}"));
    }
}

fn data_root() -> PathBuf {
    std::env::var_os(DATA_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn mins(d: Duration) -> String {
    format!("{:.1} min", d.as_secs_f64() / 60.0)
}

fn main() -> ExitCode {
    let mut ledger = Ledger::default();
    let started = Instant::now();

    frechet_numerics(&mut ledger);
    gradient_suite(&mut ledger);
    degeneracy(&mut ledger);

    let root = data_root();
    let mnist = load_mnist(&root, Split::Train).and_then(|train| Ok((train, load_mnist(&root, Split::Test)?)));
    match mnist {
        Ok((train, test)) => {
            let ae = autoencoders(&mut ledger, &train, &test);
            let gan = gans(&mut ledger, &train, &test);
            determinism(&mut ledger, Some((&root, &test)), ae.as_ref(), gan.as_ref());
        }
        Err(e) => {
            let why = format!("MNIST not readable under {}: {e}", root.display());
            ledger.fail(1, "AE fixed-image backdoor", &why);
            ledger.fail(2, "AE inverse backdoor", &why);
            ledger.fail(3, "GAN sub-distribution backdoor", &why);
            ledger.fail(4, "GAN utility preservation", &why);
            ledger.fail(5, "GAN fixed-image target", &why);
            determinism(&mut ledger, None, None, None);
        }
    }

    ledger.0.sort_by_key(|o| o.id);
    let failed: Vec<&Outcome> = ledger.0.iter().filter(|o| !o.pass).collect();
    println!("\nacceptance summary ({}):", mins(started.elapsed()));
    for o in &ledger.0 {
        println!("  {} {}. {} — {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
    }
    if failed.is_empty() {
        println!("all {} criteria passed", ledger.0.len());
        return ExitCode::SUCCESS;
    }
    println!("{} of {} criteria failed", failed.len(), ledger.0.len());
    if std::env::var_os(STRICT_ENV).is_some() {
        ExitCode::FAILURE
    } else {
        println!("(report only; set {STRICT_ENV}=1 to turn failures into a non-zero exit)");
        ExitCode::SUCCESS
    }
}

// ---------------------------------------------------------------- numerics

fn diag_stats(mean: &[f64], var: &[f64]) -> GaussianStats {
    GaussianStats {
        mean: DVector::from_column_slice(mean),
        cov: DMatrix::from_diagonal(&DVector::from_column_slice(var)),
        n: 1000,
    }
}

fn frechet_numerics(ledger: &mut Ledger) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut identity_err = 0.0f64;
    let mut diag_err = 0.0f64;
    let mut residual = 0.0f64;
    let mut failure = None;

    for d in [1, 4, 16, 64] {
        let a = DMatrix::from_fn(d, d + 4, |_, _| rng.random_range(-1.0..1.0));
        let stats = GaussianStats {
            mean: DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0)),
            cov: &a * a.transpose() / (d + 4) as f64,
            n: 1000,
        };
        match frechet_distance(&stats, &stats) {
            Ok(v) => identity_err = identity_err.max(v.abs()),
            Err(e) => failure = Some(e.to_string()),
        }
    }

    for _ in 0..50 {
        let d = rng.random_range(1..=64);
        let mut v = |lo: f64, hi: f64| (0..d).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        let (ma, mb, sa, sb) = (v(-3.0, 3.0), v(-3.0, 3.0), v(0.01, 4.0), v(0.01, 4.0));
        let oracle = ma.iter().zip(&mb).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            + sa.iter().zip(&sb).map(|(a, b)| a + b - 2.0 * (a * b).sqrt()).sum::<f64>();
        match frechet_distance(&diag_stats(&ma, &sa), &diag_stats(&mb, &sb)) {
            Ok(got) => diag_err = diag_err.max((got - oracle).abs()),
            Err(e) => failure = Some(e.to_string()),
        }
    }

    for d in (1..=64).step_by(7).chain([64]) {
        for k in [d / 2 + 1, d + 8] {
            let a = DMatrix::from_fn(d, k, |_, _| rng.random_range(-1.0..1.0));
            let m = &a * a.transpose();
            let s = sqrt_psd(&m);
            residual = residual.max((&s * &s - &m).norm() / m.norm());
        }
    }

    let pass = failure.is_none() && identity_err <= FRECHET_TOL && diag_err <= FRECHET_TOL && residual <= SQRT_RESIDUAL_MAX;
    let detail = match failure {
        Some(e) => format!("error: {e}"),
        None => format!(
            "identity {identity_err:.2e} (≤ {FRECHET_TOL:.0e}), diagonal oracle max err {diag_err:.2e} over 50 cases \
             (≤ {FRECHET_TOL:.0e}), sqrt residual {residual:.2e} up to 64×64 (≤ {SQRT_RESIDUAL_MAX:.0e}), {:.2} s",
            t.elapsed().as_secs_f64()
        ),
    };
    ledger.record(6, "Fréchet-distance numerics", pass, detail);
}

fn gradient_suite(ledger: &mut Ledger) {
    let failures = run_suite(GRAD_CASES, SEED);
    let ops = op_suite().len();
    let detail = if failures.is_empty() {
        format!("{ops} ops × {GRAD_CASES} cases within rel 1e-4 / abs 1e-6")
    } else {
        let first: Vec<String> = failures.iter().take(3).map(|f| format!("{f:?}")).collect();
        format!("{} failing cases, e.g. {}", failures.len(), first.join("; "))
    };
    ledger.record(7, "gradient suite", failures.is_empty(), detail);
}

fn degeneracy(ledger: &mut Ledger) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=256);
        let scores: Vec<f32> = (0..n).map(|_| rng.random_range(0.0f32..1.0)).collect();
        let (clean, bd) = match (losses::generator_clean(&scores), losses::generator_backdoored(&scores, &scores)) {
            (Ok(c), Ok(b)) => (c, b),
            (Err(e), _) | (_, Err(e)) => return ledger.fail(9, "backdoored loss degeneracy", e),
        };
        worst = worst.max((clean - bd).abs());
    }
    ledger.record(
        9,
        "backdoored loss degeneracy",
        worst <= DEGENERACY_TOL,
        format!("max |L_bd − L_clean| {worst:.2e} over 200 coinciding score batches (≤ {DEGENERACY_TOL:.0e})"),
    );
}

// ------------------------------------------------------------ autoencoders

fn ae_config(poison: f64, target: TargetSpec) -> AeTrainConfig {
    AeTrainConfig {
        poison_fraction: poison,
        trigger: TriggerSpec::white_patch(),
        target,
        ..AeTrainConfig::clean(AE_EPOCHS, AE_BATCH, SEED)
    }
}

fn autoencoders(ledger: &mut Ledger, train: &Dataset, test: &Dataset) -> Option<AutoencoderModel> {
    let t = Instant::now();
    let clean = match train_autoencoder(&ae_config(0.0, TargetSpec::Inverse), train) {
        Ok((m, _)) => m,
        Err(e) => {
            ledger.fail(1, "AE fixed-image backdoor", format!("clean reference: {e}"));
            ledger.fail(2, "AE inverse backdoor", format!("clean reference: {e}"));
            return None;
        }
    };
    let clean_time = t.elapsed();
    let clean_mse = reconstruction_mse(&clean, test).unwrap_or(f64::NAN);
    println!("clean AE: test MSE {clean_mse:.5} in {}", mins(clean_time));

    let cases = [
        (1u8, "AE fixed-image backdoor", TargetSpec::FixedImage(test.image(TARGET_INDEX)), AE_BACKDOOR_MAX),
        (2, "AE inverse backdoor", TargetSpec::Inverse, AE_INVERSE_MAX),
    ];
    let mut kept = None;
    for (id, name, target, max_error) in cases {
        let t = Instant::now();
        let cfg = ae_config(AE_POISON, target);
        let result = train_autoencoder(&cfg, train).map_err(|e| e.to_string()).and_then(|(m, _)| {
            let error = backdoor_error_ae(&m, test, &cfg.trigger, &cfg.target).map_err(|e| e.to_string())?;
            let mse = reconstruction_mse(&m, test).map_err(|e| e.to_string())?;
            Ok((m, error, mse))
        });
        let elapsed = t.elapsed();
        match result {
            Ok((m, error, mse)) => {
                let gap = mse - clean_mse;
                let pass = error <= max_error && gap <= AE_GAP_MAX && elapsed <= AE_BUDGET;
                ledger.record(
                    id,
                    name,
                    pass,
                    format!(
                        "backdoor error {error:.5} (≤ {max_error}), utility {mse:.5} vs clean {clean_mse:.5}, \
                         gap {gap:+.5} (≤ {AE_GAP_MAX}), {AE_EPOCHS} epochs in {} (≤ 15 min; clean model {})",
                        mins(elapsed),
                        mins(clean_time)
                    ),
                );
                kept.get_or_insert(m);
            }
            Err(e) => ledger.fail(id, name, e),
        }
    }
    kept
}

// -------------------------------------------------------------------- GANs

fn gans(ledger: &mut Ledger, train: &Dataset, test: &Dataset) -> Option<Generator> {
    let t = Instant::now();
    let extractor = match train_feature_extractor(train, &ExtractorConfig::new(SEED)) {
        Ok(f) => f,
        Err(e) => {
            for (id, name) in [(3, "GAN sub-distribution backdoor"), (4, "GAN utility preservation")] {
                ledger.fail(id, name, format!("feature extractor: {e}"));
            }
            return fixed_image_gan(ledger, train, test);
        }
    };
    println!(
        "extractor: holdout accuracy {:.4} in {:.1} s",
        extractor.provenance().holdout_accuracy,
        t.elapsed().as_secs_f64()
    );
    let kept = sub_distribution(ledger, &extractor, train, test);
    let fixed = fixed_image_gan(ledger, train, test);
    kept.or(fixed)
}

fn sub_distribution(ledger: &mut Ledger, f: &FeatureExtractor, train: &Dataset, test: &Dataset) -> Option<Generator> {
    let low = match (filter_by_labels(train, &LOW_DIGITS), filter_by_labels(test, &LOW_DIGITS)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => {
            ledger.fail(3, "GAN sub-distribution backdoor", &e);
            ledger.fail(4, "GAN utility preservation", &e);
            return None;
        }
    };
    let cfg = GanTrainConfig::backdoored(GAN_EPOCHS, GAN_BATCH, SEED, TargetSpec::Distribution(Arc::new(low.0)));
    let t = Instant::now();
    let backdoored = match train_gan(&cfg, train) {
        Ok((g, _, h)) => {
            for w in &h.warnings {
                println!("backdoored GAN warning: {w}");
            }
            g
        }
        Err(e) => {
            ledger.fail(3, "GAN sub-distribution backdoor", &e);
            ledger.fail(4, "GAN utility preservation", &e);
            return None;
        }
    };
    let elapsed = t.elapsed();

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    rng.set_stream(7);
    let fractions = generate_samples(&backdoored, PROBE, Some(&cfg.trigger), &mut rng)
        .and_then(|x| f.class_fraction(&x, &LOW_DIGITS))
        .and_then(|trig| {
            let clean = generate_samples(&backdoored, PROBE, None, &mut rng)?;
            Ok((trig, f.class_fraction(&clean, &LOW_DIGITS)?))
        });
    match fractions {
        Ok((trig, clean)) => ledger.record(
            3,
            "GAN sub-distribution backdoor",
            trig >= TRIGGERED_MIN && clean <= CLEAN_MAX && elapsed <= GAN_BUDGET,
            format!(
                "classes 0–4 in {:.1}% of {PROBE} triggered generations (≥ 80%), {:.1}% of clean ones (≤ 65%); \
                 {GAN_EPOCHS} epochs in {} (≤ 45 min)",
                100.0 * trig,
                100.0 * clean,
                mins(elapsed)
            ),
        ),
        Err(e) => ledger.fail(3, "GAN sub-distribution backdoor", e),
    }

    let t = Instant::now();
    let clean = match train_gan(&GanTrainConfig::clean(GAN_EPOCHS, GAN_BATCH, SEED), train) {
        Ok((g, _, _)) => g,
        Err(e) => {
            ledger.fail(4, "GAN utility preservation", format!("clean GAN: {e}"));
            return Some(backdoored);
        }
    };
    let clean_time = t.elapsed();
    let report = gan_utility_and_backdoor(&GanEvaluation {
        clean: &clean,
        backdoored: &backdoored,
        target_baseline: None,
        extractor: f,
        original_test: test,
        target: EvalTarget::Distribution(&low.1),
        n_samples: FID_SAMPLES,
        trigger: &cfg.trigger,
        seed: SEED,
    });
    match report {
        Ok(r) => {
            let ratio = r.backdoored_utility / r.clean_utility;
            ledger.record(
                4,
                "GAN utility preservation",
                ratio <= FID_RATIO_MAX,
                format!(
                    "proxy-FID backdoored {:.3} vs clean {:.3}, ratio {ratio:.3} (≤ {FID_RATIO_MAX}); \
                     {FID_SAMPLES} samples, clean GAN trained in {}",
                    r.backdoored_utility,
                    r.clean_utility,
                    mins(clean_time)
                ),
            );
        }
        Err(e) => ledger.fail(4, "GAN utility preservation", e),
    }
    Some(backdoored)
}

fn fixed_image_gan(ledger: &mut Ledger, train: &Dataset, test: &Dataset) -> Option<Generator> {
    let target = test.image(TARGET_INDEX);
    let cfg = GanTrainConfig::backdoored(FIXED_GAN_EPOCHS, GAN_BATCH, SEED, TargetSpec::FixedImage(target.clone()));
    let t = Instant::now();
    let g = match train_gan(&cfg, train) {
        Ok((g, _, _)) => g,
        Err(e) => {
            ledger.fail(5, "GAN fixed-image target", e);
            return None;
        }
    };
    let elapsed = t.elapsed();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    rng.set_stream(8);
    match fixed_target_mse(&g, &target, PROBE, &cfg.trigger, &mut rng) {
        Ok(mse) => ledger.record(
            5,
            "GAN fixed-image target",
            mse <= FIXED_MSE_MAX,
            format!(
                "mean MSE of {PROBE} triggered generations to the target {mse:.5} (≤ {FIXED_MSE_MAX}); \
                 {FIXED_GAN_EPOCHS} epochs in {}",
                mins(elapsed)
            ),
        ),
        Err(e) => ledger.fail(5, "GAN fixed-image target", e),
    }
    Some(g)
}

// ----------------------------------------------------------- determinism

fn synth_config(kind: &str, target: &str, out: &std::path::Path) -> Result<ExperimentConfig, String> {
    let text = format!(
        "kind = \"{kind}\"\nseed = {SEED}\nout_dir = \"{}\"\n\n[dataset]\nsource = \"synth\"\ntrain_count = 512\n\
         test_count = 128\nheight = 12\nwidth = 12\n\n{target}\n[train]\nepochs = 2\nbatch_size = 32\n\n\
         [eval]\nn_samples = 128\nextractor_min_accuracy = 0.0\ngrid = 4\n",
        out.display()
    );
    ExperimentConfig::from_toml(&text).map_err(|e| e.to_string())
}

fn reports_identical(kind: &str, target: &str) -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = synth_config(kind, target, dir.path())?;
    let path = dir.path().join("report.json");
    run_experiment(&cfg).map_err(|e| e.to_string())?;
    let first = std::fs::read(&path).map_err(|e| e.to_string())?;
    run_experiment(&cfg).map_err(|e| e.to_string())?;
    let second = std::fs::read(&path).map_err(|e| e.to_string())?;
    if first == second {
        Ok(())
    } else {
        Err(format!("{kind}: report.json differs between runs"))
    }
}

fn checkpoint_preserves(model: Model, input: &Tensor) -> Result<(), String> {
    let infer = |m: &Model| -> Result<Vec<u32>, String> {
        let out = match m {
            Model::Autoencoder(ae) => ae.reconstruct(input),
            Model::Generator(g) => g.generate_flat(input),
        }
        .map_err(|e| e.to_string())?;
        Ok(out.data().iter().map(|v| v.to_bits()).collect())
    };
    let before = infer(&model)?;
    let ckpt = ModelCheckpoint {
        model,
        config: serde_json::Value::Null,
        metrics: serde_json::Value::Null,
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    bdlab_core::harness::save_checkpoint(&path, &ckpt).map_err(|e| e.to_string())?;
    let loaded = bdlab_core::harness::load_checkpoint(&path).map_err(|e| e.to_string())?;
    if infer(&loaded.model)? == before {
        Ok(())
    } else {
        Err("inference changed across a checkpoint round trip".into())
    }
}

fn idx_round_trip(root: &std::path::Path, test: &Dataset) -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ip, lp) = (dir.path().join("t10k-images-idx3-ubyte"), dir.path().join("t10k-labels-idx1-ubyte"));
    write_idx(test, &ip, Some(&lp)).map_err(|e| e.to_string())?;
    for (ours, name) in [(&ip, "t10k-images-idx3-ubyte"), (&lp, "t10k-labels-idx1-ubyte")] {
        let original = std::fs::read(root.join(name)).map_err(|e| e.to_string())?;
        if std::fs::read(ours).map_err(|e| e.to_string())? != original {
            return Err(format!("{name} differs after a load/write round trip"));
        }
    }
    Ok(())
}

fn determinism(
    ledger: &mut Ledger,
    mnist: Option<(&PathBuf, &Dataset)>,
    ae: Option<&AutoencoderModel>,
    gan: Option<&Generator>,
) {
    let mut problems = Vec::new();
    let mut checks = Vec::new();
    for (kind, target) in [
        ("ae_backdoor", "[target]\nkind = \"inverse\"\n"),
        ("gan_backdoor", "[target]\nkind = \"distribution\"\nlabels = [0, 1]\n"),
    ] {
        match reports_identical(kind, target) {
            Ok(()) => checks.push(format!("{kind} report byte-identical")),
            Err(e) => problems.push(e),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    match (ae, mnist) {
        (Some(m), Some((_, test))) => {
            let input = test.batch(&(0..64).collect::<Vec<_>>());
            match checkpoint_preserves(Model::Autoencoder(m.clone()), &input) {
                Ok(()) => checks.push("AE checkpoint bitwise".into()),
                Err(e) => problems.push(e),
            }
        }
        _ => problems.push("no trained MNIST autoencoder to checkpoint".into()),
    }
    match gan {
        Some(g) => {
            let z = bdlab_core::gan::sample_noise(64, g.noise_dim(), &mut rng);
            match checkpoint_preserves(Model::Generator(g.clone()), &z) {
                Ok(()) => checks.push("GAN checkpoint bitwise".into()),
                Err(e) => problems.push(e),
            }
        }
        None => problems.push("no trained MNIST generator to checkpoint".into()),
    }
    match mnist {
        Some((root, test)) => match idx_round_trip(root, test) {
            Ok(()) => checks.push("MNIST test IDX byte-exact".into()),
            Err(e) => problems.push(e),
        },
        None => problems.push("MNIST unavailable for the IDX round trip".into()),
    }

    let pass = problems.is_empty();
    let detail = if pass { checks.join(", ") } else { problems.join("; ") };
    ledger.record(8, "determinism and round trips", pass, detail);
}
