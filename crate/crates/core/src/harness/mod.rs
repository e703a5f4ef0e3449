//! Experiment orchestration: configs, checkpoints, reports and sample grids.

pub mod checkpoint;
pub mod config;
pub mod grid;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use bdlab_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoencoder::{train_autoencoder, AeTrainConfig, AutoencoderModel};
use crate::backdoor::{apply_image_trigger, apply_noise_trigger, BackdoorError, TargetSpec, TriggerSpec};
use crate::data::{filter_by_labels, load_mnist, synth_blobs, DataError, Dataset, Split};
use crate::error::TrainError;
use crate::gan::{generate, sample_noise, train_gan, GanTrainConfig, Generator};
use crate::metrics::{
    ae_report, backdoor_error_ae, fixed_target_mse, frechet_distance, gan_utility_and_backdoor, gaussian_stats,
    generate_samples, reconstruction_mse, train_feature_extractor, EvalTarget, ExtractorConfig, ExtractorProvenance,
    FeatureExtractor, GanEvaluation, MetricKind, MetricsError, MetricsReport,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, Model, ModelCheckpoint, ModelDescriptor};
pub use config::{DatasetSpec, ExperimentConfig, ExperimentKind, TargetConfig, DATA_ENV};
pub use grid::{emit_grid, render_grid, GridError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    Validation(String),
    #[error("cannot access {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code: 2 for invalid input, 3 for a numerics abort, 1
    /// otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) | Self::Train(TrainError::Config(_) | TrainError::Backdoor(_)) => 2,
            Self::Train(e) if e.is_numerics() => 3,
            Self::Metrics(MetricsError::Numerics(_)) => 3,
            _ => 1,
        }
    }
}

impl From<BackdoorError> for HarnessError {
    fn from(e: BackdoorError) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<bdlab_tensor::TensorError> for HarnessError {
    fn from(e: bdlab_tensor::TensorError) -> Self {
        Self::Train(TrainError::Tensor(e))
    }
}

/// Train and test splits of an experiment.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(spec: &DatasetSpec, seed: u64) -> Result<ExperimentData, HarnessError> {
    match spec {
        DatasetSpec::Idx {
            train_limit,
            test_limit,
            ..
        } => {
            let root = spec.idx_root()?.expect("idx spec has a root");
            let limit = |d: Dataset, n: &Option<usize>| match n {
                Some(n) => d.take(*n),
                None => Ok(d),
            };
            Ok(ExperimentData {
                train: limit(load_mnist(&root, Split::Train)?, train_limit)?,
                test: limit(load_mnist(&root, Split::Test)?, test_limit)?,
            })
        }
        DatasetSpec::Synth {
            train_count,
            test_count,
            height,
            width,
        } => Ok(ExperimentData {
            train: synth_blobs(*train_count, *height, *width, seed)?,
            test: synth_blobs(*test_count, *height, *width, seed.wrapping_add(1))?.with_name("synth_blobs_test"),
        }),
    }
}

/// The configured target made concrete, plus the test-split images it is
/// judged against.
fn resolve_target(cfg: &TargetConfig, data: &ExperimentData) -> Result<(TargetSpec, Option<Dataset>), HarnessError> {
    Ok(match cfg {
        TargetConfig::FixedImage { image_index } => {
            if *image_index >= data.test.len() {
                return Err(HarnessError::Validation(format!(
                    "target image_index {image_index} outside the {}-image test split",
                    data.test.len()
                )));
            }
            (TargetSpec::FixedImage(data.test.image(*image_index)), None)
        }
        TargetConfig::Inverse => (TargetSpec::Inverse, None),
        TargetConfig::Distribution { labels } => (
            TargetSpec::Distribution(Arc::new(filter_by_labels(&data.train, labels)?)),
            Some(filter_by_labels(&data.test, labels)?),
        ),
    })
}

/// Everything `report.json` holds. It carries no wall-clock values, so a
/// rerun of the same config reproduces it byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub metrics: MetricsReport,
    /// Additional named measurements (e.g. target-class fractions).
    pub extras: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor: Option<ExtractorProvenance>,
    /// Training histories keyed by model role.
    pub history: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_seconds: f64,
    pub stages: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: ExperimentReport,
    pub timing: Timing,
    pub out_dir: PathBuf,
}

struct Stopwatch {
    start: Instant,
    timing: Timing,
}

impl Stopwatch {
    fn new() -> Self {
        Self {
            start: Instant::now(),
            timing: Timing::default(),
        }
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.timing.stages.insert(stage.to_string(), t.elapsed().as_secs_f64());
        out
    }

    fn finish(mut self) -> Timing {
        self.timing.wall_clock_seconds = self.start.elapsed().as_secs_f64();
        self.timing
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), HarnessError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    checkpoint::write_atomic(path, &bytes).map_err(|e| HarnessError::io(path, e))
}

fn to_json(value: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(value).expect("plain data serializes")
}

/// Saves whatever history a failed run recorded, then passes the error on.
fn keep_partial<T>(out_dir: &Path, role: &str, result: Result<T, TrainError>) -> Result<T, HarnessError> {
    result.map_err(|e| {
        if let TrainError::NonFinite { history, .. } = &e {
            let path = out_dir.join(format!("history_{role}.partial.json"));
            if let Err(w) = write_json(&path, history) {
                log::error!("could not save partial history: {w}");
            }
        }
        e.into()
    })
}

fn ae_config(cfg: &ExperimentConfig, target: &TargetSpec, poison: f64) -> AeTrainConfig {
    AeTrainConfig {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        poison_fraction: poison,
        trigger: cfg.trigger(),
        target: target.clone(),
        seed: cfg.seed,
        optimizer: cfg.optimizer(),
        loss: cfg.train.loss,
        arch: None,
    }
}

fn gan_config(cfg: &ExperimentConfig, target: Option<TargetSpec>) -> GanTrainConfig {
    GanTrainConfig {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        noise_dim: cfg.train.noise_dim,
        trigger: cfg.trigger(),
        target,
        seed: cfg.seed,
        optimizer: cfg.optimizer(),
        generator_optimizer: None,
        d_steps: cfg.train.d_steps,
        g_steps: cfg.train.g_steps,
    }
}

fn extractor_config(cfg: &ExperimentConfig) -> ExtractorConfig {
    ExtractorConfig {
        epochs: cfg.eval.extractor_epochs,
        min_accuracy: cfg.eval.extractor_min_accuracy,
        ..ExtractorConfig::new(cfg.seed)
    }
}

fn checkpoint_for(model: Model, cfg: &ExperimentConfig, metrics: &MetricsReport) -> ModelCheckpoint {
    ModelCheckpoint {
        model,
        config: to_json(cfg),
        metrics: to_json(metrics),
    }
}

/// Trains and evaluates one experiment, writing into `cfg.out_dir`:
/// `model.ckpt` (plus `reference.ckpt`, the clean model of a backdoor run),
/// `report.json`, `timing.json` and PNG sample grids.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome, HarnessError> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| HarnessError::io(&out, e))?;
    let mut watch = Stopwatch::new();
    let data = watch.time("load", || load_data(&cfg.dataset, cfg.seed))?;
    let target = cfg.target.as_ref().map(|t| resolve_target(t, &data)).transpose()?;
    let trigger = cfg.trigger();
    let mut history = BTreeMap::new();
    let mut extras = BTreeMap::new();
    let mut extractor_provenance = None;

    let (metrics, model, reference, grids) = if cfg.kind.is_gan() {
        let target_spec = target.as_ref().map(|(t, _)| t.clone());
        let extractor = watch.time("extractor", || train_feature_extractor(&data.train, &extractor_config(cfg)))?;
        extractor_provenance = Some(extractor.provenance().clone());

        let (clean, _, h) = watch.time("train_clean", || {
            keep_partial(&out, "clean", train_gan(&gan_config(cfg, None), &data.train))
        })?;
        history.insert("clean".to_string(), to_json(&h));
        let backdoored = if cfg.kind == ExperimentKind::GanBackdoor {
            let (g, _, h) = watch.time("train_backdoored", || {
                keep_partial(&out, "backdoored", train_gan(&gan_config(cfg, target_spec.clone()), &data.train))
            })?;
            history.insert("backdoored".to_string(), to_json(&h));
            Some(g)
        } else {
            None
        };
        let baseline = match (&target, cfg.eval.target_baseline) {
            (Some((TargetSpec::Distribution(t), _)), true) => {
                let (g, _, h) = watch.time("train_target_baseline", || {
                    keep_partial(&out, "target_baseline", train_gan(&gan_config(cfg, None), t))
                })?;
                history.insert("target_baseline".to_string(), to_json(&h));
                Some(g)
            }
            _ => None,
        };
        let main = backdoored.as_ref().unwrap_or(&clean);
        let eval_target = match &target {
            Some((TargetSpec::FixedImage(img), _)) => EvalTarget::FixedImage(img),
            Some((_, Some(test_target))) => EvalTarget::Distribution(test_target),
            _ => EvalTarget::Distribution(&data.test),
        };
        let metrics = watch.time("evaluate", || {
            gan_utility_and_backdoor(&GanEvaluation {
                clean: &clean,
                backdoored: main,
                target_baseline: baseline.as_ref(),
                extractor: &extractor,
                original_test: &data.test,
                target: eval_target,
                n_samples: cfg.eval.n_samples,
                trigger: &trigger,
                seed: cfg.seed,
            })
        })?;
        if let Some(TargetConfig::Distribution { labels }) = &cfg.target {
            let (clean_frac, triggered_frac) = target_fractions(main, &extractor, labels, &trigger, cfg)?;
            extras.insert("clean_target_fraction".to_string(), clean_frac);
            extras.insert("triggered_target_fraction".to_string(), triggered_frac);
        }
        let grids = gan_grids(main, cfg.eval.grid, &trigger, cfg.seed)?;
        let reference = backdoored.is_some().then(|| Model::Generator(clean.clone()));
        (metrics, Model::Generator(main.clone()), reference, grids)
    } else {
        let target_spec = target.map(|(t, _)| t).unwrap_or(TargetSpec::Inverse);
        let (clean, h) = watch.time("train_clean", || {
            keep_partial(&out, "clean", train_autoencoder(&ae_config(cfg, &target_spec, 0.0), &data.train))
        })?;
        history.insert("clean".to_string(), to_json(&h));
        let backdoored = if cfg.kind == ExperimentKind::AeBackdoor {
            let (m, h) = watch.time("train_backdoored", || {
                keep_partial(
                    &out,
                    "backdoored",
                    train_autoencoder(&ae_config(cfg, &target_spec, cfg.train.poison_fraction), &data.train),
                )
            })?;
            history.insert("backdoored".to_string(), to_json(&h));
            Some(m)
        } else {
            None
        };
        let main = backdoored.as_ref().unwrap_or(&clean);
        let metrics = watch.time("evaluate", || ae_report(&clean, main, &data.test, &trigger, &target_spec, cfg.seed))?;
        let grids = ae_grids(main, &data.test, cfg.eval.grid, &trigger)?;
        let reference = backdoored.is_some().then(|| Model::Autoencoder(clean.clone()));
        (metrics, Model::Autoencoder(main.clone()), reference, grids)
    };

    let report = ExperimentReport {
        kind: cfg.kind,
        seed: cfg.seed,
        config: cfg.clone(),
        metrics,
        extras,
        extractor: extractor_provenance,
        history,
    };
    save_checkpoint(&out.join("model.ckpt"), &checkpoint_for(model, cfg, &report.metrics))?;
    if let Some(reference) = reference {
        save_checkpoint(&out.join("reference.ckpt"), &checkpoint_for(reference, cfg, &report.metrics))?;
    }
    for (name, (images, rows, cols)) in grids {
        emit_grid(&images, rows, cols, &out.join(name))?;
    }
    write_json(&out.join("report.json"), &report)?;
    let timing = watch.finish();
    write_json(&out.join("timing.json"), &timing)?;
    Ok(RunOutcome {
        report,
        timing,
        out_dir: out,
    })
}

/// Fractions of clean- and triggered-noise generations the extractor assigns
/// to `labels`.
fn target_fractions(
    g: &Generator,
    f: &FeatureExtractor,
    labels: &[u8],
    trigger: &TriggerSpec,
    cfg: &ExperimentConfig,
) -> Result<(f64, f64), HarnessError> {
    let mut rng = seeded(cfg.seed, 5);
    let clean = generate_samples(g, cfg.eval.n_samples, None, &mut rng)?;
    let triggered = generate_samples(g, cfg.eval.n_samples, Some(trigger), &mut rng)?;
    Ok((f.class_fraction(&clean, labels)?, f.class_fraction(&triggered, labels)?))
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

type Grids = Vec<(&'static str, (Vec<Tensor>, usize, usize))>;

fn split_images(stack: &Tensor) -> Vec<Tensor> {
    let dims = stack.shape()[1..].to_vec();
    let n: usize = dims.iter().product();
    stack
        .data()
        .chunks_exact(n)
        .map(|c| Tensor::new(dims.clone(), c.to_vec()).expect("finite"))
        .collect()
}

/// Rows: originals, reconstructions, triggered inputs, reconstructions of
/// the triggered inputs.
fn ae_grids(m: &AutoencoderModel, test: &Dataset, cols: usize, trigger: &TriggerSpec) -> Result<Grids, HarnessError> {
    let cols = cols.min(test.len());
    let originals: Vec<Tensor> = (0..cols).map(|i| test.image(i)).collect();
    let triggered = originals
        .iter()
        .map(|x| apply_image_trigger(x, trigger))
        .collect::<Result<Vec<_>, _>>()?;
    let mut tiles = originals.clone();
    for x in &originals {
        tiles.push(m.reconstruct(x)?);
    }
    tiles.extend(triggered.iter().cloned());
    for x in &triggered {
        tiles.push(m.reconstruct(x)?);
    }
    Ok(vec![("samples.png", (tiles, 4, cols))])
}

/// Clean-noise and triggered-noise grids over the same noise draws.
fn gan_grids(g: &Generator, side: usize, trigger: &TriggerSpec, seed: u64) -> Result<Grids, HarnessError> {
    let z = sample_noise(side * side, g.noise_dim(), &mut seeded(seed, 6));
    let clean = split_images(&generate(g, &z)?);
    let triggered = split_images(&generate(g, &apply_noise_trigger(&z, trigger)?)?);
    Ok(vec![("clean.png", (clean, side, side)), ("triggered.png", (triggered, side, side))])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    Clean,
    Triggered,
}

/// Writes a grid of the checkpointed model's outputs, using the dataset and
/// trigger recorded in the checkpoint's config echo.
pub fn grid_from_checkpoint(ckpt: &ModelCheckpoint, mode: GridMode, out: &Path) -> Result<(), HarnessError> {
    let cfg: ExperimentConfig = serde_json::from_value(ckpt.config.clone())?;
    let trigger = cfg.trigger();
    let side = cfg.eval.grid;
    let tiles = match &ckpt.model {
        Model::Generator(g) => {
            let (name, grid) = gan_grids(g, side, &trigger, cfg.seed)?.swap_remove(match mode {
                GridMode::Clean => 0,
                GridMode::Triggered => 1,
            });
            debug_assert!(name.ends_with(".png"));
            grid.0
        }
        Model::Autoencoder(m) => {
            let data = load_data(&cfg.dataset, cfg.seed)?;
            let n = (side * side).min(data.test.len());
            if n < side * side {
                return Err(HarnessError::Validation(format!("test split too small for a {side}×{side} grid")));
            }
            (0..n)
                .map(|i| {
                    let x = data.test.image(i);
                    let x = match mode {
                        GridMode::Clean => x,
                        GridMode::Triggered => apply_image_trigger(&x, &trigger)?,
                    };
                    Ok(m.reconstruct(&x)?)
                })
                .collect::<Result<Vec<_>, HarnessError>>()?
        }
    };
    emit_grid(&tiles, side, side, out)?;
    Ok(())
}

/// Metrics of a single checkpointed model on the test split of `cfg`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utility_metric: MetricKind,
    pub utility: f64,
    pub backdoor_metric: Option<MetricKind>,
    pub backdoor_error: Option<f64>,
    pub extras: BTreeMap<String, f64>,
    pub samples: usize,
    pub seed: u64,
}

pub fn evaluate_checkpoint(ckpt: &ModelCheckpoint, cfg: &ExperimentConfig) -> Result<EvalReport, HarnessError> {
    let data = load_data(&cfg.dataset, cfg.seed)?;
    let target = cfg.target.as_ref().map(|t| resolve_target(t, &data)).transpose()?;
    let trigger = cfg.trigger();
    let mut extras = BTreeMap::new();
    match &ckpt.model {
        Model::Autoencoder(m) => {
            let backdoor = match &target {
                Some((t, _)) => Some(backdoor_error_ae(m, &data.test, &trigger, t)?),
                None => None,
            };
            Ok(EvalReport {
                utility_metric: MetricKind::Mse,
                utility: reconstruction_mse(m, &data.test)?,
                backdoor_metric: backdoor.map(|_| MetricKind::Mse),
                backdoor_error: backdoor,
                extras,
                samples: data.test.len(),
                seed: cfg.seed,
            })
        }
        Model::Generator(g) => {
            let f = train_feature_extractor(&data.train, &extractor_config(cfg))?;
            let n = cfg.eval.n_samples;
            let idx: Vec<usize> = (0..n.min(data.test.len())).collect();
            let real = gaussian_stats(&f, &data.test.batch(&idx))?;
            let fake = gaussian_stats(&f, &generate_samples(g, n, None, &mut seeded(cfg.seed, 2))?)?;
            let utility = frechet_distance(&real, &fake)?;
            let (metric, error) = match &target {
                Some((TargetSpec::FixedImage(img), _)) => (
                    Some(MetricKind::Mse),
                    Some(fixed_target_mse(g, img, n, &trigger, &mut seeded(cfg.seed, 3))?),
                ),
                Some((_, Some(test_target))) => {
                    let idx: Vec<usize> = (0..n.min(test_target.len())).collect();
                    let real_t = gaussian_stats(&f, &test_target.batch(&idx))?;
                    let trig = generate_samples(g, n, Some(&trigger), &mut seeded(cfg.seed, 3))?;
                    if let Some(TargetConfig::Distribution { labels }) = &cfg.target {
                        extras.insert("triggered_target_fraction".into(), f.class_fraction(&trig, labels)?);
                    }
                    (Some(MetricKind::ProxyFid), Some(frechet_distance(&real_t, &gaussian_stats(&f, &trig)?)?))
                }
                _ => (None, None),
            };
            Ok(EvalReport {
                utility_metric: MetricKind::ProxyFid,
                utility,
                backdoor_metric: metric,
                backdoor_error: error,
                extras,
                samples: n,
                seed: cfg.seed,
            })
        }
    }
}

/// Clean-vs-backdoored comparison of two reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub utility_metric: MetricKind,
    pub clean_utility: f64,
    pub backdoored_utility: f64,
    pub utility_delta: f64,
    /// `utility_delta / clean_utility`, when the clean utility is non-zero.
    pub relative_delta: Option<f64>,
    pub clean_backdoor_error: f64,
    pub backdoored_backdoor_error: f64,
}

pub fn compare_reports(clean: &ExperimentReport, backdoored: &ExperimentReport) -> Result<Comparison, HarnessError> {
    if clean.metrics.utility_metric != backdoored.metrics.utility_metric {
        return Err(HarnessError::Validation(format!(
            "reports measure utility differently: {:?} vs {:?}",
            clean.metrics.utility_metric, backdoored.metrics.utility_metric
        )));
    }
    // Each report's own model is its "backdoored" slot (clean runs fill both).
    let c = clean.metrics.backdoored_utility;
    let b = backdoored.metrics.backdoored_utility;
    Ok(Comparison {
        utility_metric: clean.metrics.utility_metric,
        clean_utility: c,
        backdoored_utility: b,
        utility_delta: b - c,
        relative_delta: (c != 0.0).then(|| (b - c) / c),
        clean_backdoor_error: clean.metrics.backdoor_error,
        backdoored_backdoor_error: backdoored.metrics.backdoor_error,
    })
}

pub fn load_report(path: &Path) -> Result<ExperimentReport, HarnessError> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
