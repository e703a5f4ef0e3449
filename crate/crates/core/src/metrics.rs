//! Utility and backdoor-error measurements: reconstruction MSE for
//! autoencoders, and a Fréchet distance over the penultimate features of a
//! small in-repo classifier ("proxy-FID") for GANs.

use bdlab_tensor::{Activation, Graph, LayerSpec, Mlp, Optimizer, OptimizerConfig, Tensor, TensorError};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoencoder::AutoencoderModel;
use crate::backdoor::{apply_image_trigger_batch, apply_noise_trigger, make_target_batch, BackdoorError, TargetSpec, TriggerSpec};
use crate::data::{BatchPlan, DataError, Dataset};
use crate::gan::{sample_noise, Generator};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("feature extractor reached {accuracy:.4} held-out accuracy, below the {floor} floor; train for more epochs")]
    Calibration { accuracy: f64, floor: f64 },
    #[error("numerics: {0}")]
    Numerics(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Backdoor(#[from] BackdoorError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Rows per inference chunk; bounds memory without affecting results.
const CHUNK: usize = 500;

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(CHUNK).map(move |s| (s..(s + CHUNK).min(n)).collect())
}

/// Sum over rows of the per-row mean squared difference.
fn row_mse_sum(a: &Tensor, b: &Tensor) -> f64 {
    let width = a.shape()[1];
    a.data()
        .chunks_exact(width)
        .zip(b.data().chunks_exact(width))
        .map(|(x, y)| {
            x.iter().zip(y).map(|(&p, &q)| (f64::from(p) - f64::from(q)).powi(2)).sum::<f64>() / width as f64
        })
        .sum()
}

/// Mean over `test` of the per-image MSE between each image and its
/// reconstruction.
pub fn reconstruction_mse(model: &AutoencoderModel, test: &Dataset) -> Result<f64> {
    check_shape(model, test)?;
    let mut total = 0.0;
    for idx in chunks(test.len()) {
        let x = test.batch(&idx);
        total += row_mse_sum(&model.reconstruct_batch(&x)?, &x);
    }
    Ok(total / test.len() as f64)
}

/// Mean per-image MSE between the reconstruction of each triggered test
/// image and the target for the original image.
pub fn backdoor_error_ae(model: &AutoencoderModel, test: &Dataset, trigger: &TriggerSpec, target: &TargetSpec) -> Result<f64> {
    check_shape(model, test)?;
    let shape = test.image_shape();
    trigger.validate_for_image(shape)?;
    target.validate_for_image(shape)?;
    let mut total = 0.0;
    for idx in chunks(test.len()) {
        let x = test.batch(&idx);
        let out = model.reconstruct_batch(&apply_image_trigger_batch(&x, shape, trigger)?)?;
        total += row_mse_sum(&out, &make_target_batch(&x, shape, target)?);
    }
    Ok(total / test.len() as f64)
}

fn check_shape(model: &AutoencoderModel, test: &Dataset) -> Result<()> {
    if test.is_empty() {
        return Err(MetricsError::Contract("empty test set".into()));
    }
    if model.image_shape() != test.image_shape() {
        return Err(MetricsError::Contract(format!(
            "model expects {:?} images, dataset holds {:?}",
            model.image_shape(),
            test.image_shape()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub holdout_fraction: f64,
    pub min_accuracy: f64,
    pub hidden: usize,
    pub feature_dim: usize,
}

impl ExtractorConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            epochs: 3,
            batch_size: 128,
            learning_rate: 1e-3,
            seed,
            holdout_fraction: 0.1,
            min_accuracy: 0.90,
            hidden: 256,
            feature_dim: 64,
        }
    }
}

/// Where an extractor came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorProvenance {
    pub dataset: String,
    pub seed: u64,
    pub epochs: usize,
    pub holdout_accuracy: f64,
}

/// Classifier `image → hidden → features → logits`; features are the
/// penultimate (ReLU) activations.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    mlp: Mlp,
    provenance: ExtractorProvenance,
}

impl FeatureExtractor {
    pub fn from_parts(mlp: Mlp, provenance: ExtractorProvenance) -> Result<Self> {
        if mlp.layers().len() < 2 {
            return Err(MetricsError::Contract("extractor needs a feature layer and a logit layer".into()));
        }
        Ok(Self { mlp, provenance })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn provenance(&self) -> &ExtractorProvenance {
        &self.provenance
    }

    pub fn feature_dim(&self) -> usize {
        let layers = self.mlp.layers();
        layers[layers.len() - 2].weight.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.mlp.output_dim()
    }

    /// `n × d_f` features for an image batch (flattened or not).
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let mut outputs = Vec::new();
        for idx in chunks(images.shape()[0]) {
            let rows = gather(images, &idx)?;
            let mut layers = self.mlp.infer_layers(&rows)?;
            layers.pop();
            outputs.extend_from_slice(layers.pop().expect("feature layer").data());
        }
        Ok(Tensor::new(vec![images.shape()[0], self.feature_dim()], outputs)?)
    }

    /// Arg-max class per row.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let classes = self.classes();
        let mut out = Vec::with_capacity(images.shape()[0]);
        for idx in chunks(images.shape()[0]) {
            let logits = self.mlp.infer(&gather(images, &idx)?)?;
            out.extend(logits.data().chunks_exact(classes).map(argmax));
        }
        Ok(out)
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let labels = data
            .labels()
            .ok_or_else(|| MetricsError::Contract(format!("dataset {} has no labels", data.name())))?;
        let all: Vec<usize> = (0..data.len()).collect();
        let predicted = self.predict(&data.batch(&all))?;
        let hits = predicted.iter().zip(labels).filter(|(&p, &l)| p == usize::from(l)).count();
        Ok(hits as f64 / data.len() as f64)
    }

    /// Fraction of `images` classified into `classes`.
    pub fn class_fraction(&self, images: &Tensor, classes: &[u8]) -> Result<f64> {
        let predicted = self.predict(images)?;
        let hits = predicted.iter().filter(|&&p| classes.iter().any(|&c| usize::from(c) == p)).count();
        Ok(hits as f64 / predicted.len() as f64)
    }
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Rows `idx` of an image batch, flattened to `idx.len() × (H·W·C)`; accepts
/// both `n × (H·W·C)` and `n × H × W × C` layouts.
fn gather(images: &Tensor, idx: &[usize]) -> Result<Tensor> {
    if images.rank() < 2 {
        return Err(MetricsError::Tensor(TensorError::Rank {
            op: "feature batch",
            expected: 2,
            shape: images.shape().to_vec(),
        }));
    }
    let width: usize = images.shape()[1..].iter().product();
    let data = idx
        .iter()
        .flat_map(|&i| images.data()[i * width..(i + 1) * width].iter().copied())
        .collect();
    Ok(Tensor::new(vec![idx.len(), width], data)?)
}

/// Trains the proxy-FID classifier on a seeded split of `train` and checks
/// its accuracy on the held-out part.
pub fn train_feature_extractor(train: &Dataset, cfg: &ExtractorConfig) -> Result<FeatureExtractor> {
    let labels = train
        .labels()
        .ok_or_else(|| MetricsError::Contract(format!("dataset {} has no labels", train.name())))?;
    let classes = usize::from(*labels.iter().max().expect("datasets are non-empty")) + 1;
    let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct < 2 {
        return Err(MetricsError::Contract("feature extractor needs at least two classes".into()));
    }
    if !(0.0..1.0).contains(&cfg.holdout_fraction) || cfg.epochs == 0 {
        return Err(MetricsError::Contract("holdout fraction must lie in [0, 1) and epochs be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let holdout_len = ((train.len() as f64 * cfg.holdout_fraction).round() as usize).max(1);
    let (holdout_idx, fit_idx) = order.split_at(holdout_len);
    let fit = train.subset(fit_idx)?;
    let holdout = train.subset(holdout_idx)?;
    let fit_labels: Vec<usize> = fit.labels().expect("subset keeps labels").iter().map(|&l| usize::from(l)).collect();

    let specs = [
        LayerSpec::new(train.image_shape().len(), cfg.hidden, Activation::Relu),
        LayerSpec::new(cfg.hidden, cfg.feature_dim, Activation::Relu),
        LayerSpec::new(cfg.feature_dim, classes, Activation::Identity),
    ];
    let mut mlp = Mlp::new(&specs, &mut rng)?;
    let mut optimizer = Optimizer::new(OptimizerConfig::adam(cfg.learning_rate));
    let plan = BatchPlan::new(cfg.batch_size.min(fit.len()), cfg.seed, false);
    for epoch in 0..cfg.epochs {
        for idx in plan.batches(fit.len(), epoch as u64)? {
            let batch_labels: Vec<usize> = idx.iter().map(|&i| fit_labels[i]).collect();
            let mut g = Graph::new();
            let bound = mlp.bind(&mut g, true);
            let x = g.constant(fit.batch(&idx));
            let logits = mlp.forward(&mut g, &bound, x)?;
            let loss = g.softmax_cross_entropy(logits, &batch_labels)?;
            let grads = g.backward(loss)?;
            mlp.accumulate_grads(&bound, &grads)?;
            optimizer.step(&mut mlp.params_mut())?;
        }
    }

    let mut extractor = FeatureExtractor::from_parts(
        mlp,
        ExtractorProvenance {
            dataset: train.name().to_string(),
            seed: cfg.seed,
            epochs: cfg.epochs,
            holdout_accuracy: 0.0,
        },
    )?;
    let accuracy = extractor.accuracy(&holdout)?;
    extractor.provenance.holdout_accuracy = accuracy;
    log::info!("feature extractor held-out accuracy {accuracy:.4}");
    if accuracy < cfg.min_accuracy {
        return Err(MetricsError::Calibration {
            accuracy,
            floor: cfg.min_accuracy,
        });
    }
    Ok(extractor)
}

/// Mean and unbiased covariance of a feature sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    /// Statistics of the rows of an `n × d` feature matrix. The covariance is
    /// made exactly symmetric by mirroring its upper triangle.
    pub fn from_features(features: &Tensor) -> Result<Self> {
        let (n, d) = match *features.shape() {
            [n, d] => (n, d),
            _ => {
                return Err(MetricsError::Tensor(TensorError::Rank {
                    op: "gaussian_stats",
                    expected: 2,
                    shape: features.shape().to_vec(),
                }))
            }
        };
        if n < 2 {
            return Err(MetricsError::Contract(format!("covariance needs at least 2 samples, got {n}")));
        }
        let x = DMatrix::from_row_iterator(n, d, features.data().iter().map(|&v| f64::from(v)));
        let mean = DVector::from_iterator(d, x.column_iter().map(|c| c.sum() / n as f64));
        let mut centered = x;
        for (mut col, &m) in centered.column_iter_mut().zip(mean.iter()) {
            col.add_scalar_mut(-m);
        }
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        for i in 0..d {
            for j in 0..i {
                cov[(i, j)] = cov[(j, i)];
            }
        }
        if n < d + 1 {
            log::warn!("covariance from {n} samples in {d} dimensions is rank-deficient");
        }
        Ok(Self { mean, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.n < self.dim() + 1
    }
}

/// Statistics of the extractor's features over a flattened image batch.
pub fn gaussian_stats(f: &FeatureExtractor, images: &Tensor) -> Result<GaussianStats> {
    GaussianStats::from_features(&f.features(images)?)
}

/// Square root of a symmetric positive semi-definite matrix through its
/// eigendecomposition; negative eigenvalues (rounding noise) become 0.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn trace_sqrt_psd(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

/// Values this far below zero are rounding noise and clamp to 0; anything
/// lower signals a broken square root.
pub const NEGATIVE_TOLERANCE: f64 = 1e-6;

/// `|μa − μb|² + Tr(Σa + Σb − 2(ΣaΣb)^{1/2})`, with the trace of the root
/// taken as `Tr((S Σb S)^{1/2})` for `S = Σa^{1/2}` so that every
/// decomposition is symmetric.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(MetricsError::Contract(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let diff = &a.mean - &b.mean;
    let s = sqrt_psd(&a.cov);
    let mut inner = &s * &b.cov * &s;
    // Restore the symmetry rounding took away.
    inner = (&inner + inner.transpose()) * 0.5;
    let value = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt_psd(&inner);
    if !value.is_finite() || value < -NEGATIVE_TOLERANCE {
        return Err(MetricsError::Numerics(format!("Fréchet distance evaluated to {value}")));
    }
    Ok(value.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Mse,
    ProxyFid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub utility_metric: MetricKind,
    pub backdoor_metric: MetricKind,
    /// Utility of the clean reference model.
    pub clean_utility: f64,
    /// Utility of the backdoored model on clean inputs.
    pub backdoored_utility: f64,
    /// Backdoored minus clean utility.
    pub utility_delta: f64,
    pub backdoor_error: f64,
    /// Backdoor error of a clean model trained directly on the target
    /// distribution, when one was supplied.
    pub baseline_backdoor_error: Option<f64>,
    pub real_samples: usize,
    pub generated_samples: usize,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn check(&self) -> Result<()> {
        let values = [self.clean_utility, self.backdoored_utility, self.backdoor_error]
            .into_iter()
            .chain(self.baseline_backdoor_error);
        for v in values {
            if !v.is_finite() || v < 0.0 {
                return Err(MetricsError::Numerics(format!("report value {v} is not a finite non-negative number")));
            }
        }
        Ok(())
    }
}

/// Utility (reconstruction MSE) of both models and the backdoored model's
/// backdoor error, all on `test`.
pub fn ae_report(
    clean: &AutoencoderModel,
    backdoored: &AutoencoderModel,
    test: &Dataset,
    trigger: &TriggerSpec,
    target: &TargetSpec,
    seed: u64,
) -> Result<MetricsReport> {
    let clean_utility = reconstruction_mse(clean, test)?;
    let backdoored_utility = reconstruction_mse(backdoored, test)?;
    let report = MetricsReport {
        utility_metric: MetricKind::Mse,
        backdoor_metric: MetricKind::Mse,
        clean_utility,
        backdoored_utility,
        utility_delta: backdoored_utility - clean_utility,
        backdoor_error: backdoor_error_ae(backdoored, test, trigger, target)?,
        baseline_backdoor_error: None,
        real_samples: test.len(),
        generated_samples: 0,
        seed,
        warnings: Vec::new(),
    };
    report.check()?;
    Ok(report)
}

/// `n` generations from `g` with noise from `rng`, optionally triggered.
pub fn generate_samples(g: &Generator, n: usize, trigger: Option<&TriggerSpec>, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let z = sample_noise(n, g.noise_dim(), rng);
    let z = match trigger {
        Some(t) => apply_noise_trigger(&z, t)?,
        None => z,
    };
    Ok(g.generate_flat(&z)?)
}

/// Up to `n` real images, drawn without replacement by a seeded shuffle.
fn real_sample(data: &Dataset, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    idx.truncate(n);
    data.batch(&idx)
}

pub const DEFAULT_GAN_SAMPLES: usize = 2048;

/// Mean per-image MSE between triggered generations and a fixed target.
pub fn fixed_target_mse(g: &Generator, target: &Tensor, n: usize, trigger: &TriggerSpec, rng: &mut ChaCha8Rng) -> Result<f64> {
    let out = generate_samples(g, n, Some(trigger), rng)?;
    if target.len() != out.shape()[1] {
        return Err(MetricsError::Contract(format!(
            "target holds {} values, generator emits {}",
            target.len(),
            out.shape()[1]
        )));
    }
    let replicated = Tensor::new(out.shape().to_vec(), target.data().repeat(n))?;
    Ok(row_mse_sum(&out, &replicated) / n as f64)
}

/// What triggered generations are compared against.
#[derive(Clone, Copy, Debug)]
pub enum EvalTarget<'a> {
    /// Proxy-FID against real images of the target distribution.
    Distribution(&'a Dataset),
    /// MSE against one image.
    FixedImage(&'a Tensor),
}

/// Inputs to [`gan_utility_and_backdoor`].
pub struct GanEvaluation<'a> {
    pub clean: &'a Generator,
    pub backdoored: &'a Generator,
    /// Clean GAN trained on the target distribution only.
    pub target_baseline: Option<&'a Generator>,
    pub extractor: &'a FeatureExtractor,
    pub original_test: &'a Dataset,
    pub target: EvalTarget<'a>,
    pub n_samples: usize,
    pub trigger: &'a TriggerSpec,
    pub seed: u64,
}

/// Proxy-FID utility of both generators against the original test data,
/// and backdoor error of the backdoored generator's triggered output: a
/// proxy-FID against target test data, or an MSE against a fixed image.
///
/// Both generators are driven by the same noise stream, so identical
/// generators yield identical utilities.
pub fn gan_utility_and_backdoor(e: &GanEvaluation<'_>) -> Result<MetricsReport> {
    let mut warnings = Vec::new();
    let d_f = e.extractor.feature_dim();
    if e.n_samples < d_f + 1 {
        warnings.push(format!(
            "{} samples for {d_f}-dimensional features: covariance is rank-deficient",
            e.n_samples
        ));
    }
    let rng = |stream: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(e.seed);
        r.set_stream(stream);
        r
    };
    let stats = |images: &Tensor| gaussian_stats(e.extractor, images);

    let real_original = stats(&real_sample(e.original_test, e.n_samples, &mut rng(0)))?;
    let clean_utility = frechet_distance(&real_original, &stats(&generate_samples(e.clean, e.n_samples, None, &mut rng(2))?)?)?;
    let backdoored_utility =
        frechet_distance(&real_original, &stats(&generate_samples(e.backdoored, e.n_samples, None, &mut rng(2))?)?)?;

    let (backdoor_metric, backdoor_error, baseline) = match e.target {
        EvalTarget::Distribution(target) => {
            let real_target = stats(&real_sample(target, e.n_samples, &mut rng(1)))?;
            let triggered = generate_samples(e.backdoored, e.n_samples, Some(e.trigger), &mut rng(3))?;
            let error = frechet_distance(&real_target, &stats(&triggered)?)?;
            let baseline = match e.target_baseline {
                Some(g) => Some(frechet_distance(&real_target, &stats(&generate_samples(g, e.n_samples, None, &mut rng(3))?)?)?),
                None => None,
            };
            (MetricKind::ProxyFid, error, baseline)
        }
        EvalTarget::FixedImage(image) => (
            MetricKind::Mse,
            fixed_target_mse(e.backdoored, image, e.n_samples, e.trigger, &mut rng(3))?,
            None,
        ),
    };

    let report = MetricsReport {
        utility_metric: MetricKind::ProxyFid,
        backdoor_metric,
        clean_utility,
        backdoored_utility,
        utility_delta: backdoored_utility - clean_utility,
        backdoor_error,
        baseline_backdoor_error: baseline,
        real_samples: e.n_samples.min(e.original_test.len()),
        generated_samples: e.n_samples,
        seed: e.seed,
        warnings,
    };
    report.check()?;
    Ok(report)
}
