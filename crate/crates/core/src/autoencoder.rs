//! Dense autoencoders, trained either cleanly or with a backdoor: a seeded
//! fraction of the batches is triggered and supervised with the target image
//! instead of the input.

use bdlab_tensor::{
    Activation, Graph, LayerSpec, Mlp, Optimizer, OptimizerConfig, Tensor, TensorError, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backdoor::{apply_image_trigger_batch, make_target_batch, TargetSpec, TriggerSpec};
use crate::data::{BatchPlan, Dataset, ImageShape};
use crate::error::{PartialHistory, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Bce,
}

/// Mean squared error or mean binary cross-entropy between a prediction in
/// `(0, 1)` and a reference in `[0, 1]`, as a scalar graph node.
pub fn ae_loss(g: &mut Graph, kind: LossKind, prediction: Var, reference: Var) -> Result<Var, TensorError> {
    let (ps, rs) = (g.value(prediction).shape(), g.value(reference).shape());
    if ps != rs {
        return Err(TensorError::ShapeMismatch {
            op: "ae_loss",
            left: ps.to_vec(),
            right: rs.to_vec(),
        });
    }
    match kind {
        LossKind::Mse => {
            let diff = g.sub(prediction, reference)?;
            let sq = g.mul(diff, diff)?;
            g.mean(sq)
        }
        LossKind::Bce => {
            // −[r·log p + (1−r)·log(1−p)]
            let log_p = g.log(prediction)?;
            let neg_p = g.neg(prediction)?;
            let one_minus_p = g.add_scalar(neg_p, 1.0)?;
            let log_q = g.log(one_minus_p)?;
            let neg_r = g.neg(reference)?;
            let one_minus_r = g.add_scalar(neg_r, 1.0)?;
            let a = g.mul(reference, log_p)?;
            let b = g.mul(one_minus_r, log_q)?;
            let sum = g.add(a, b)?;
            let mean = g.mean(sum)?;
            g.neg(mean)
        }
    }
}

/// Hidden and latent widths of the dense encoder (mirrored by the decoder).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AeArch {
    pub hidden: usize,
    pub latent: usize,
}

impl AeArch {
    /// 256/64 for 784-pixel images, scaled proportionally otherwise.
    pub fn for_shape(shape: ImageShape) -> Self {
        let n = shape.len();
        Self {
            hidden: ((n * 256 + 392) / 784).max(8),
            latent: ((n * 64 + 392) / 784).max(2),
        }
    }

    fn encoder_specs(&self, inputs: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::new(inputs, self.hidden, Activation::Relu),
            LayerSpec::new(self.hidden, self.latent, Activation::Relu),
        ]
    }

    fn decoder_specs(&self, outputs: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::new(self.latent, self.hidden, Activation::Relu),
            LayerSpec::new(self.hidden, outputs, Activation::Sigmoid),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderModel {
    encoder: Mlp,
    decoder: Mlp,
    image_shape: ImageShape,
    loss: LossKind,
}

impl AutoencoderModel {
    pub fn new(shape: ImageShape, arch: AeArch, loss: LossKind, rng: &mut impl Rng) -> Result<Self, TensorError> {
        let encoder = Mlp::new(&arch.encoder_specs(shape.len()), rng)?;
        let decoder = Mlp::new(&arch.decoder_specs(shape.len()), rng)?;
        Self::from_parts(encoder, decoder, shape, loss)
    }

    /// Assembles a model, checking that the decoder maps the latent space
    /// back to the image size through a final sigmoid.
    pub fn from_parts(encoder: Mlp, decoder: Mlp, image_shape: ImageShape, loss: LossKind) -> Result<Self, TensorError> {
        let n = image_shape.len();
        if encoder.input_dim() != n || decoder.output_dim() != n || encoder.output_dim() != decoder.input_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "autoencoder",
                left: vec![encoder.input_dim(), encoder.output_dim()],
                right: vec![decoder.input_dim(), decoder.output_dim()],
            });
        }
        let last = decoder.layers().last().expect("non-empty mlp").activation;
        if last != Activation::Sigmoid {
            return Err(TensorError::Domain {
                op: "autoencoder",
                detail: format!("decoder must end in a sigmoid, found {last:?}"),
            });
        }
        Ok(Self {
            encoder,
            decoder,
            image_shape,
            loss,
        })
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn image_shape(&self) -> ImageShape {
        self.image_shape
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Decoded images for a flattened `n × (H·W·C)` batch.
    pub fn reconstruct_batch(&self, batch: &Tensor) -> Result<Tensor, TensorError> {
        let latent = self.encoder.infer(batch)?;
        self.decoder.infer(&latent)
    }

    /// Decodes `x`, which may be one `H × W × C` image, an `n × H × W × C`
    /// stack or a flattened `n × (H·W·C)` batch. The output has `x`'s shape.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let n = self.image_shape.len();
        let dims = self.image_shape.dims();
        let rows = match x.shape() {
            s if s == dims => 1,
            [count, rest @ ..] if rest == dims => *count,
            [count, flat] if *flat == n => *count,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "reconstruct",
                    left: x.shape().to_vec(),
                    right: dims.to_vec(),
                })
            }
        };
        let flat = x.clone().reshape(vec![rows, n])?;
        self.reconstruct_batch(&flat)?.reshape(x.shape().to_vec())
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut params = self.encoder.params_mut();
        params.extend(self.decoder.params_mut());
        params
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Probability that a batch is trained in backdoor mode.
    pub poison_fraction: f64,
    pub trigger: TriggerSpec,
    pub target: TargetSpec,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub loss: LossKind,
    /// Defaults to [`AeArch::for_shape`].
    pub arch: Option<AeArch>,
}

impl AeTrainConfig {
    /// Clean training (no poisoned batches).
    pub fn clean(epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            poison_fraction: 0.0,
            trigger: TriggerSpec::white_patch(),
            target: TargetSpec::Inverse,
            seed,
            optimizer: OptimizerConfig::adam(1e-3),
            loss: LossKind::Mse,
            arch: None,
        }
    }

    pub fn validate(&self, shape: ImageShape) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.poison_fraction) {
            return Err(TrainError::Config(format!(
                "poison fraction {} outside [0, 1]",
                self.poison_fraction
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch size must be positive".into()));
        }
        if self.poison_fraction > 0.0 {
            self.trigger.validate_for_image(shape)?;
            self.target.validate_for_image(shape)?;
            if matches!(self.target, TargetSpec::Distribution(_)) {
                return Err(TrainError::Config(
                    "autoencoders take a fixed_image or inverse target".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AeEpoch {
    pub epoch: usize,
    /// Mean loss over clean batches, if any ran.
    pub clean_loss: Option<f64>,
    /// Mean loss over poisoned batches, if any ran.
    pub poison_loss: Option<f64>,
    pub clean_batches: usize,
    pub poison_batches: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AeHistory {
    pub epochs: Vec<AeEpoch>,
}

/// Seed stream used for poison draws, kept apart from initialization and
/// shuffling so the draws never perturb either.
const POISON_STREAM: u64 = 1;

pub fn train_autoencoder(cfg: &AeTrainConfig, train: &Dataset) -> Result<(AutoencoderModel, AeHistory), TrainError> {
    let shape = train.image_shape();
    if train.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    cfg.validate(shape)?;
    let plan = BatchPlan::new(cfg.batch_size, cfg.seed, true);
    plan.batches(train.len(), 0)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let arch = cfg.arch.unwrap_or_else(|| AeArch::for_shape(shape));
    let mut model = AutoencoderModel::new(shape, arch, cfg.loss, &mut init_rng)?;
    let mut poison_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    poison_rng.set_stream(POISON_STREAM);
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut history = AeHistory::default();

    for epoch in 0..cfg.epochs {
        let mut record = AeEpoch {
            epoch,
            ..AeEpoch::default()
        };
        let (mut clean_sum, mut poison_sum) = (0.0f64, 0.0f64);
        for (iteration, idx) in plan.batches(train.len(), epoch as u64)?.iter().enumerate() {
            let poisoned = cfg.poison_fraction > 0.0 && poison_rng.random::<f64>() < cfg.poison_fraction;
            let x = train.batch(idx);
            let (input, reference) = if poisoned {
                (
                    apply_image_trigger_batch(&x, shape, &cfg.trigger)?,
                    make_target_batch(&x, shape, &cfg.target)?,
                )
            } else {
                (x.clone(), x)
            };
            let loss = match step(&mut model, &mut optimizer, input, reference) {
                Ok(loss) if loss.is_finite() => loss,
                Ok(_) | Err(TensorError::NonFinite { .. }) => {
                    history.epochs.push(record);
                    return Err(TrainError::NonFinite {
                        epoch,
                        iteration,
                        what: "autoencoder loss or parameters".into(),
                        history: Box::new(PartialHistory::Autoencoder(history)),
                    });
                }
                Err(e) => return Err(e.into()),
            };
            if poisoned {
                poison_sum += loss;
                record.poison_batches += 1;
            } else {
                clean_sum += loss;
                record.clean_batches += 1;
            }
        }
        record.clean_loss = (record.clean_batches > 0).then(|| clean_sum / record.clean_batches as f64);
        record.poison_loss = (record.poison_batches > 0).then(|| poison_sum / record.poison_batches as f64);
        log::debug!("autoencoder epoch {epoch}: {record:?}");
        history.epochs.push(record);
    }
    Ok((model, history))
}

/// One optimizer step on a batch; returns the loss before the update.
fn step(model: &mut AutoencoderModel, optimizer: &mut Optimizer, input: Tensor, reference: Tensor) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let enc = model.encoder.bind(&mut g, true);
    let dec = model.decoder.bind(&mut g, true);
    let x = g.constant(input);
    let latent = model.encoder.forward(&mut g, &enc, x)?;
    let out = model.decoder.forward(&mut g, &dec, latent)?;
    let reference = g.constant(reference);
    let loss = ae_loss(&mut g, model.loss, out, reference)?;
    let value = f64::from(g.value(loss).data()[0]);
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = g.backward(loss)?;
    model.encoder.accumulate_grads(&enc, &grads)?;
    model.decoder.accumulate_grads(&dec, &grads)?;
    optimizer.step(&mut model.params_mut())?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;

    fn scalar_loss(kind: LossKind, p: &[f32], r: &[f32]) -> f32 {
        let mut g = Graph::new();
        let pv = g.constant(Tensor::new(vec![p.len()], p.to_vec()).unwrap());
        let rv = g.constant(Tensor::new(vec![r.len()], r.to_vec()).unwrap());
        let l = ae_loss(&mut g, kind, pv, rv).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn loss_closed_forms() {
        assert_eq!(scalar_loss(LossKind::Mse, &[0.2, 0.7], &[0.2, 0.7]), 0.0);
        assert_eq!(scalar_loss(LossKind::Mse, &[1.0, 1.0], &[0.0, 0.0]), 1.0);
        let bce = scalar_loss(LossKind::Bce, &[0.5, 0.5, 0.5], &[0.0, 0.3, 1.0]);
        assert!((bce - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn loss_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2]));
        let b = g.constant(Tensor::zeros(vec![3]));
        assert!(ae_loss(&mut g, LossKind::Mse, a, b).is_err());
    }

    #[test]
    fn arch_scaling() {
        assert_eq!(AeArch::for_shape(ImageShape::MNIST), AeArch { hidden: 256, latent: 64 });
        let small = AeArch::for_shape(ImageShape::new(16, 16, 1));
        assert_eq!(small, AeArch { hidden: 84, latent: 21 });
    }

    #[test]
    fn reconstruct_preserves_shape_and_is_deterministic() {
        let shape = ImageShape::new(8, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = AutoencoderModel::new(shape, AeArch::for_shape(shape), LossKind::Mse, &mut rng).unwrap();
        let x = Tensor::full(vec![8, 8, 1], 0.5);
        let y = model.reconstruct(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y, model.reconstruct(&x).unwrap());
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let stack = Tensor::full(vec![3, 8, 8, 1], 0.5);
        assert_eq!(model.reconstruct(&stack).unwrap().shape(), &[3, 8, 8, 1]);
        assert!(model.reconstruct(&Tensor::zeros(vec![7, 7, 1])).is_err());
    }

    #[test]
    fn config_validation() {
        let d = synth_blobs(32, 8, 8, 0).unwrap();
        let mut cfg = AeTrainConfig::clean(1, 8, 0);
        cfg.poison_fraction = 1.5;
        assert!(matches!(train_autoencoder(&cfg, &d), Err(TrainError::Config(_))));
        cfg.poison_fraction = 0.5;
        cfg.trigger = TriggerSpec::white_patch();
        cfg.target = TargetSpec::Distribution(std::sync::Arc::new(d.clone()));
        assert!(train_autoencoder(&cfg, &d).is_err());
        cfg.target = TargetSpec::Inverse;
        cfg.trigger = TriggerSpec::last_noise();
        assert!(matches!(train_autoencoder(&cfg, &d), Err(TrainError::Backdoor(_))));
    }

    #[test]
    fn identical_config_gives_identical_history() {
        let d = synth_blobs(64, 8, 8, 3).unwrap();
        let mut cfg = AeTrainConfig::clean(2, 16, 5);
        cfg.poison_fraction = 0.5;
        cfg.trigger = TriggerSpec::ImagePatch {
            corner: crate::backdoor::Corner::TopLeft,
            size: 2,
            color: vec![1.0],
        };
        let (m1, h1) = train_autoencoder(&cfg, &d).unwrap();
        let (m2, h2) = train_autoencoder(&cfg, &d).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        let batches: usize = h1.epochs.iter().map(|e| e.clean_batches + e.poison_batches).sum();
        assert_eq!(batches, 2 * 4);
    }
}
