//! Dense GANs, clean or backdoored. A backdoored GAN trains its generator
//! against two discriminators: `D` sees clean noise and the original data,
//! `D_bd` sees triggered noise and the target data.

use bdlab_tensor::{Activation, Graph, LayerSpec, Mlp, Optimizer, OptimizerConfig, Tensor, TensorError, Var, LOG_CLAMP_MIN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backdoor::{apply_noise_trigger, TargetSpec, TriggerSpec};
use crate::data::{BatchPlan, Dataset, ImageShape};
use crate::error::{PartialHistory, TrainError};

/// Scores are clamped to `[SCORE_CLAMP, 1 − SCORE_CLAMP]` before any log.
pub const SCORE_CLAMP: f32 = LOG_CLAMP_MIN;
pub const DEFAULT_NOISE_DIM: usize = 64;
const LEAK: Activation = Activation::LeakyRelu { slope: 0.2 };

// Seed streams. Initialization uses the bare seed; the batch plan owns the
// per-epoch streams of its own generator.
const NOISE_STREAM: u64 = 2;
const TARGET_STREAM: u64 = 3;
const PROBE_STREAM: u64 = 4;
const PROBE_BATCH: usize = 64;
/// Mean per-pixel variance over the probe batch below which the generator
/// is flagged as collapsed.
pub const COLLAPSE_VARIANCE: f64 = 1e-6;

/// `batch × dim` i.i.d. standard-normal noise.
pub fn sample_noise(batch: usize, dim: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..batch * dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new(vec![batch, dim], data).expect("positive batch and dim, finite normals")
}

/// Bound on every noise component as the generator sees it.
///
/// Standard-normal draws never come near it, so clean generations are
/// unaffected. The −100 trigger, fed raw, would put the triggered branch's
/// activations an order of magnitude above the clean branch's; their
/// gradients then swamp Adam's moments on the shared weights and the clean
/// branch collapses. Clamped, the trigger still sits far outside the clean
/// range.
pub const LATENT_CLAMP: f32 = 10.0;

/// `z` with each component clamped to `±LATENT_CLAMP`.
pub fn clamp_latent(z: &Tensor) -> Tensor {
    let data = z.data().iter().map(|v| v.clamp(-LATENT_CLAMP, LATENT_CLAMP)).collect();
    Tensor::new(z.shape().to_vec(), data).expect("same shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    mlp: Mlp,
    image_shape: ImageShape,
}

impl Generator {
    /// `d_z → 256 → 512 → image`, leaky-ReLU hidden layers, sigmoid output,
    /// applied to [`clamp_latent`]`(z)`.
    pub fn new(noise_dim: usize, image_shape: ImageShape, rng: &mut impl Rng) -> Result<Self, TensorError> {
        let specs = [
            LayerSpec::new(noise_dim, 256, LEAK),
            LayerSpec::new(256, 512, LEAK),
            LayerSpec::new(512, image_shape.len(), Activation::Sigmoid),
        ];
        Self::from_mlp(Mlp::new(&specs, rng)?, image_shape)
    }

    pub fn from_mlp(mlp: Mlp, image_shape: ImageShape) -> Result<Self, TensorError> {
        check_sigmoid_head(&mlp, image_shape.len(), "generator")?;
        Ok(Self { mlp, image_shape })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn noise_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn image_shape(&self) -> ImageShape {
        self.image_shape
    }

    /// Flattened `n × (H·W·C)` images for `n × d_z` noise.
    pub fn generate_flat(&self, z: &Tensor) -> Result<Tensor, TensorError> {
        self.mlp.infer(&clamp_latent(z))
    }
}

/// Images for noise `z`: one `H × W × C` image for a `d_z` vector, an
/// `n × H × W × C` stack for an `n × d_z` batch.
pub fn generate(g: &Generator, z: &Tensor) -> Result<Tensor, TensorError> {
    let [h, w, c] = g.image_shape.dims();
    match *z.shape() {
        [d] => {
            let out = g.generate_flat(&z.clone().reshape(vec![1, d])?)?;
            out.reshape(vec![h, w, c])
        }
        [n, _] => g.generate_flat(z)?.reshape(vec![n, h, w, c]),
        _ => Err(TensorError::Rank {
            op: "generate",
            expected: 2,
            shape: z.shape().to_vec(),
        }),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    mlp: Mlp,
}

impl Discriminator {
    /// `image → 256 → 1`, leaky-ReLU hidden layer, sigmoid score.
    pub fn new(image_shape: ImageShape, rng: &mut impl Rng) -> Result<Self, TensorError> {
        let specs = [
            LayerSpec::new(image_shape.len(), 256, LEAK),
            LayerSpec::new(256, 1, Activation::Sigmoid),
        ];
        Self::from_mlp(Mlp::new(&specs, rng)?)
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self, TensorError> {
        check_sigmoid_head(&mlp, 1, "discriminator")?;
        Ok(Self { mlp })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    /// One score in `(0, 1)` per row of a flattened image batch.
    pub fn score(&self, images: &Tensor) -> Result<Vec<f32>, TensorError> {
        Ok(self.mlp.infer(images)?.into_data())
    }
}

fn check_sigmoid_head(mlp: &Mlp, outputs: usize, what: &str) -> Result<(), TensorError> {
    if mlp.output_dim() != outputs {
        return Err(TensorError::ShapeMismatch {
            op: "gan network",
            left: vec![mlp.output_dim()],
            right: vec![outputs],
        });
    }
    let last = mlp.layers().last().expect("non-empty mlp").activation;
    if last != Activation::Sigmoid {
        return Err(TensorError::Domain {
            op: "gan network",
            detail: format!("{what} must end in a sigmoid, found {last:?}"),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorPair {
    pub d: Discriminator,
    /// Present only after backdoored training.
    pub d_bd: Option<Discriminator>,
}

fn clamped_log(g: &mut Graph, scores: Var) -> Result<Var, TensorError> {
    let s = g.clamp(scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)?;
    g.log(s)
}

fn clamped_log_complement(g: &mut Graph, scores: Var) -> Result<Var, TensorError> {
    let s = g.clamp(scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)?;
    let neg = g.neg(s)?;
    let complement = g.add_scalar(neg, 1.0)?;
    g.log(complement)
}

/// `−(E[log D(x)] + E[log(1 − D(x̂))])`, expectations as batch means.
pub fn discriminator_loss(g: &mut Graph, real_scores: Var, fake_scores: Var) -> Result<Var, TensorError> {
    let real = clamped_log(g, real_scores)?;
    let real = g.mean(real)?;
    let fake = clamped_log_complement(g, fake_scores)?;
    let fake = g.mean(fake)?;
    let objective = g.add(real, fake)?;
    g.neg(objective)
}

/// `−E[log D(x̂)]`.
pub fn generator_loss_clean(g: &mut Graph, fake_scores: Var) -> Result<Var, TensorError> {
    let logs = clamped_log(g, fake_scores)?;
    let mean = g.mean(logs)?;
    g.neg(mean)
}

/// `−(½·E[log D(x̂)] + ½·E[log D_bd(x̂_bd)])`.
pub fn generator_loss_backdoored(g: &mut Graph, fake_scores: Var, backdoor_scores: Var) -> Result<Var, TensorError> {
    let clean = generator_loss_clean(g, fake_scores)?;
    let backdoor = generator_loss_clean(g, backdoor_scores)?;
    let sum = g.add(clean, backdoor)?;
    g.mul_scalar(sum, 0.5)
}

/// Loss values for plain score batches, for evaluation outside training.
pub mod losses {
    use super::*;

    fn scores(g: &mut Graph, s: &[f32]) -> Result<Var, TensorError> {
        if s.is_empty() {
            return Err(TensorError::InvalidShape {
                shape: vec![0],
                len: 0,
            });
        }
        Ok(g.constant(Tensor::new(vec![s.len()], s.to_vec())?))
    }

    fn run(build: impl FnOnce(&mut Graph) -> Result<Var, TensorError>) -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let loss = build(&mut g)?;
        Ok(f64::from(g.value(loss).data()[0]))
    }

    pub fn discriminator(real: &[f32], fake: &[f32]) -> Result<f64, TensorError> {
        run(|g| {
            let (r, f) = (scores(g, real)?, scores(g, fake)?);
            discriminator_loss(g, r, f)
        })
    }

    pub fn generator_clean(fake: &[f32]) -> Result<f64, TensorError> {
        run(|g| {
            let f = scores(g, fake)?;
            generator_loss_clean(g, f)
        })
    }

    pub fn generator_backdoored(fake: &[f32], backdoor: &[f32]) -> Result<f64, TensorError> {
        run(|g| {
            let (f, b) = (scores(g, fake)?, scores(g, backdoor)?);
            generator_loss_backdoored(g, f, b)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub noise_dim: usize,
    pub trigger: TriggerSpec,
    /// `None` trains a clean GAN.
    pub target: Option<TargetSpec>,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// Generator optimizer; `None` uses `optimizer` for all three networks.
    pub generator_optimizer: Option<OptimizerConfig>,
    pub d_steps: usize,
    pub g_steps: usize,
}

impl GanTrainConfig {
    pub fn clean(epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            noise_dim: DEFAULT_NOISE_DIM,
            trigger: TriggerSpec::last_noise(),
            target: None,
            seed,
            optimizer: OptimizerConfig::gan_default(),
            generator_optimizer: None,
            d_steps: 1,
            g_steps: 1,
        }
    }

    pub fn backdoored(epochs: usize, batch_size: usize, seed: u64, target: TargetSpec) -> Self {
        Self {
            target: Some(target),
            ..Self::clean(epochs, batch_size, seed)
        }
    }

    pub fn validate(&self, shape: ImageShape) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || self.noise_dim == 0 {
            return Err(TrainError::Config("epochs, batch size and noise dim must be positive".into()));
        }
        if self.d_steps == 0 || self.g_steps == 0 {
            return Err(TrainError::Config("d_steps and g_steps must be positive".into()));
        }
        self.trigger.validate_for_noise(self.noise_dim)?;
        match &self.target {
            None => {}
            Some(TargetSpec::Inverse) => {
                return Err(TrainError::Config(
                    "GAN targets must be a distribution or a fixed image".into(),
                ))
            }
            Some(t) => t.validate_for_image(shape)?,
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanEpoch {
    pub epoch: usize,
    pub d_loss: f64,
    pub d_bd_loss: Option<f64>,
    pub g_loss: f64,
    /// Mean per-pixel variance of clean-noise generations on a fixed probe batch.
    pub probe_variance: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanHistory {
    pub epochs: Vec<GanEpoch>,
    pub warnings: Vec<String>,
}

/// One GAN training session: the three networks, their optimizers and the
/// noise streams. [`train_gan`] drives it over whole epochs; the step methods
/// are public for finer-grained use.
pub struct GanTrainer<'a> {
    cfg: &'a GanTrainConfig,
    shape: ImageShape,
    generator: Generator,
    d: Discriminator,
    d_bd: Option<Discriminator>,
    opt_g: Optimizer,
    opt_d: Optimizer,
    opt_d_bd: Optimizer,
    noise_rng: ChaCha8Rng,
    target_rng: ChaCha8Rng,
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

impl<'a> GanTrainer<'a> {
    /// Freshly initialized networks for images of `shape`; `D_bd` exists
    /// only when `cfg.target` is set.
    pub fn new(cfg: &'a GanTrainConfig, shape: ImageShape) -> Result<Self, TrainError> {
        cfg.validate(shape)?;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        let generator = Generator::new(cfg.noise_dim, shape, &mut init)?;
        let d = Discriminator::new(shape, &mut init)?;
        let d_bd = match cfg.target {
            Some(_) => Some(Discriminator::new(shape, &mut init)?),
            None => None,
        };
        Ok(Self {
            cfg,
            shape,
            generator,
            d,
            d_bd,
            opt_g: Optimizer::new(cfg.generator_optimizer.unwrap_or(cfg.optimizer)),
            opt_d: Optimizer::new(cfg.optimizer),
            opt_d_bd: Optimizer::new(cfg.optimizer),
            noise_rng: stream(cfg.seed, NOISE_STREAM),
            target_rng: stream(cfg.seed, TARGET_STREAM),
        })
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.d
    }

    pub fn backdoor_discriminator(&self) -> Option<&Discriminator> {
        self.d_bd.as_ref()
    }

    pub fn into_parts(self) -> (Generator, DiscriminatorPair) {
        (self.generator, DiscriminatorPair { d: self.d, d_bd: self.d_bd })
    }

    /// Next clean noise batch from the session's stream.
    pub fn noise(&mut self) -> Tensor {
        sample_noise(self.cfg.batch_size, self.cfg.noise_dim, &mut self.noise_rng)
    }

    /// Next noise batch with the trigger applied.
    pub fn triggered_noise(&mut self) -> Result<Tensor, TrainError> {
        let z = self.noise();
        Ok(apply_noise_trigger(&z, &self.cfg.trigger)?)
    }

    /// A batch of the target: drawn with replacement from a target
    /// distribution, or the fixed image replicated.
    pub fn target_batch(&mut self) -> Result<Tensor, TrainError> {
        let n = self.cfg.batch_size;
        match &self.cfg.target {
            Some(TargetSpec::Distribution(data)) => {
                let idx: Vec<usize> = (0..n).map(|_| self.target_rng.random_range(0..data.len())).collect();
                Ok(data.batch(&idx))
            }
            Some(TargetSpec::FixedImage(img)) => Ok(Tensor::new(vec![n, self.shape.len()], img.data().repeat(n))?),
            _ => Err(TrainError::Config("clean GAN session has no target".into())),
        }
    }

    /// One update of `D` (or, with `backdoor`, of `D_bd`) on `real` vs `G(z)`.
    /// Returns the loss before the update.
    pub fn discriminator_step(&mut self, backdoor: bool, real: Tensor, z: &Tensor) -> Result<f64, TrainError> {
        let fake = self.generator.generate_flat(z)?;
        let (disc, opt) = if backdoor {
            let d_bd = self
                .d_bd
                .as_mut()
                .ok_or_else(|| TrainError::Config("clean GAN session has no D_bd".into()))?;
            (d_bd, &mut self.opt_d_bd)
        } else {
            (&mut self.d, &mut self.opt_d)
        };
        let mut g = Graph::new();
        let bound = disc.mlp.bind(&mut g, true);
        let real = g.constant(real);
        let fake = g.constant(fake);
        let real_scores = disc.mlp.forward(&mut g, &bound, real)?;
        let fake_scores = disc.mlp.forward(&mut g, &bound, fake)?;
        let loss = discriminator_loss(&mut g, real_scores, fake_scores)?;
        let value = f64::from(g.value(loss).data()[0]);
        let grads = g.backward(loss)?;
        disc.mlp.accumulate_grads(&bound, &grads)?;
        opt.step(&mut disc.mlp.params_mut())?;
        Ok(value)
    }

    /// One generator update: the backdoored loss when `z_bd` is given (and
    /// `D_bd` exists), the clean loss otherwise. Both discriminators enter as
    /// constants.
    pub fn generator_step(&mut self, z: Tensor, z_bd: Option<Tensor>) -> Result<f64, TrainError> {
        let mut g = Graph::new();
        let gen = self.generator.mlp.bind(&mut g, true);
        let d = self.d.mlp.bind(&mut g, false);
        let z = g.constant(clamp_latent(&z));
        let fake = self.generator.mlp.forward(&mut g, &gen, z)?;
        let scores = self.d.mlp.forward(&mut g, &d, fake)?;
        let loss = match (z_bd, &self.d_bd) {
            (Some(z_bd), Some(d_bd)) => {
                let bd = d_bd.mlp.bind(&mut g, false);
                let z_bd = g.constant(clamp_latent(&z_bd));
                let fake_bd = self.generator.mlp.forward(&mut g, &gen, z_bd)?;
                let bd_scores = d_bd.mlp.forward(&mut g, &bd, fake_bd)?;
                generator_loss_backdoored(&mut g, scores, bd_scores)?
            }
            (Some(_), None) => return Err(TrainError::Config("clean GAN session has no D_bd".into())),
            (None, _) => generator_loss_clean(&mut g, scores)?,
        };
        let value = f64::from(g.value(loss).data()[0]);
        let grads = g.backward(loss)?;
        self.generator.mlp.accumulate_grads(&gen, &grads)?;
        self.opt_g.step(&mut self.generator.mlp.params_mut())?;
        Ok(value)
    }

    /// D step, D_bd step (backdoored sessions only), G step, each repeated
    /// per the configured step counts. Returns mean (d, d_bd, g) losses.
    pub fn iteration(&mut self, real: &Tensor) -> Result<(f64, Option<f64>, f64), TrainError> {
        let backdoored = self.d_bd.is_some();
        let mut d_loss = 0.0;
        let mut d_bd_loss = 0.0;
        for _ in 0..self.cfg.d_steps {
            let z = self.noise();
            d_loss += self.discriminator_step(false, real.clone(), &z)?;
            if backdoored {
                let target = self.target_batch()?;
                let z_bd = self.triggered_noise()?;
                d_bd_loss += self.discriminator_step(true, target, &z_bd)?;
            }
        }
        let mut g_loss = 0.0;
        for _ in 0..self.cfg.g_steps {
            let z = self.noise();
            let z_bd = if backdoored { Some(self.triggered_noise()?) } else { None };
            g_loss += self.generator_step(z, z_bd)?;
        }
        let (ds, gs) = (self.cfg.d_steps as f64, self.cfg.g_steps as f64);
        Ok((d_loss / ds, backdoored.then_some(d_bd_loss / ds), g_loss / gs))
    }
}

fn probe_variance(generator: &Generator, probe: &Tensor) -> Result<f64, TensorError> {
    let out = generator.generate_flat(probe)?;
    let (n, p) = (out.shape()[0], out.shape()[1]);
    let data = out.data();
    let mut total = 0.0f64;
    for j in 0..p {
        let mean = (0..n).map(|i| f64::from(data[i * p + j])).sum::<f64>() / n as f64;
        total += (0..n).map(|i| (f64::from(data[i * p + j]) - mean).powi(2)).sum::<f64>() / n as f64;
    }
    Ok(total / p as f64)
}

/// Trains a generator on `original`, clean or (with `cfg.target`) backdoored.
///
/// Every iteration updates `D` on a real batch vs `G(z)`, then `D_bd` on a
/// target batch vs `G(trigger(z))`, then `G` with fresh `z` and `z_bd`. The
/// discriminators enter the generator step as constants.
pub fn train_gan(cfg: &GanTrainConfig, original: &Dataset) -> Result<(Generator, DiscriminatorPair, GanHistory), TrainError> {
    if original.is_empty() {
        return Err(TrainError::Config("original dataset is empty".into()));
    }
    let mut session = GanTrainer::new(cfg, original.image_shape())?;
    let plan = BatchPlan::new(cfg.batch_size, cfg.seed, true);
    plan.batches(original.len(), 0)?;
    let probe = sample_noise(PROBE_BATCH, cfg.noise_dim, &mut stream(cfg.seed, PROBE_STREAM));
    let mut history = GanHistory::default();

    for epoch in 0..cfg.epochs {
        let batches = plan.batches(original.len(), epoch as u64)?;
        let (mut d_sum, mut d_bd_sum, mut g_sum) = (0.0f64, 0.0f64, 0.0f64);
        for (iteration, idx) in batches.iter().enumerate() {
            let real = original.batch(idx);
            let abort = |history: GanHistory, what: String| TrainError::NonFinite {
                epoch,
                iteration,
                what,
                history: Box::new(PartialHistory::Gan(history)),
            };
            match session.iteration(&real) {
                Ok((dl, dbl, gl)) => {
                    if !(dl.is_finite() && gl.is_finite() && dbl.is_none_or(f64::is_finite)) {
                        return Err(abort(history, "GAN loss".into()));
                    }
                    d_sum += dl;
                    d_bd_sum += dbl.unwrap_or(0.0);
                    g_sum += gl;
                }
                Err(e) if e.is_numerics() => return Err(abort(history, format!("GAN parameters ({e})"))),
                Err(e) => return Err(e),
            }
        }
        let n = batches.len() as f64;
        let variance = probe_variance(&session.generator, &probe)?;
        if variance < COLLAPSE_VARIANCE {
            let warning = format!("epoch {epoch}: generator output variance {variance:.3e} suggests mode collapse");
            log::warn!("{warning}");
            history.warnings.push(warning);
        }
        let record = GanEpoch {
            epoch,
            d_loss: d_sum / n,
            d_bd_loss: session.d_bd.is_some().then_some(d_bd_sum / n),
            g_loss: g_sum / n,
            probe_variance: variance,
        };
        log::info!(
            "gan epoch {epoch}: d {:.4} d_bd {:?} g {:.4} var {:.4}",
            record.d_loss,
            record.d_bd_loss,
            record.g_loss,
            record.probe_variance
        );
        history.epochs.push(record);
    }
    let (generator, pair) = session.into_parts();
    Ok((generator, pair, history))
}
