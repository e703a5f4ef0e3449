//! Triggers (how an input is marked) and targets (what a backdoored model
//! must produce for marked inputs).

use std::sync::Arc;

use bdlab_tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, ImageShape};

/// RGB pink used for patches on multi-channel images.
pub const PINK: [f32; 3] = [1.0, 0.41, 0.71];

#[derive(Debug, Error, PartialEq)]
pub enum BackdoorError {
    #[error("{size}×{size} patch does not fit a {height}×{width} image")]
    PatchTooLarge {
        size: usize,
        height: usize,
        width: usize,
    },
    #[error("noise index {index} out of range for dimension {dim}")]
    NoiseIndex { index: usize, dim: usize },
    #[error("expected a {expected} trigger")]
    WrongTriggerKind { expected: &'static str },
    #[error("patch color has {found} channels, image has {expected}")]
    ColorChannels { expected: usize, found: usize },
    #[error("patch color {0} outside [0, 1]")]
    ColorRange(f32),
    #[error("distribution targets cannot be applied per image")]
    DistributionTarget,
    #[error("target image shape {target:?} does not match input shape {input:?}")]
    TargetShape { target: Vec<usize>, input: Vec<usize> },
    #[error("target distribution is empty")]
    EmptyDistribution,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = BackdoorError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseIndex {
    Last,
    At(usize),
}

impl NoiseIndex {
    pub fn resolve(self, dim: usize) -> Result<usize> {
        let index = match self {
            NoiseIndex::Last => dim.checked_sub(1).ok_or(BackdoorError::NoiseIndex { index: 0, dim })?,
            NoiseIndex::At(i) => i,
        };
        if index >= dim {
            return Err(BackdoorError::NoiseIndex { index, dim });
        }
        Ok(index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TriggerSpec {
    /// `size × size` square of `color` in one corner. A single-value color is
    /// used for every channel.
    ImagePatch {
        corner: Corner,
        size: usize,
        color: Vec<f32>,
    },
    /// One noise component overwritten with `value`.
    NoiseComponent { index: NoiseIndex, value: f32 },
}

impl TriggerSpec {
    /// White 5×5 square in the top-left corner.
    pub fn white_patch() -> Self {
        Self::ImagePatch {
            corner: Corner::TopLeft,
            size: 5,
            color: vec![1.0],
        }
    }

    pub fn pink_patch(corner: Corner, size: usize) -> Self {
        Self::ImagePatch {
            corner,
            size,
            color: PINK.to_vec(),
        }
    }

    /// Last noise component set to −100.
    pub fn last_noise() -> Self {
        Self::NoiseComponent {
            index: NoiseIndex::Last,
            value: -100.0,
        }
    }

    pub fn is_image_patch(&self) -> bool {
        matches!(self, Self::ImagePatch { .. })
    }

    /// Checks an image-patch trigger against an image shape.
    pub fn validate_for_image(&self, shape: ImageShape) -> Result<()> {
        let Self::ImagePatch { size, color, .. } = self else {
            return Err(BackdoorError::WrongTriggerKind {
                expected: "image_patch",
            });
        };
        if *size == 0 || *size > shape.height.min(shape.width) {
            return Err(BackdoorError::PatchTooLarge {
                size: *size,
                height: shape.height,
                width: shape.width,
            });
        }
        if color.len() != 1 && color.len() != shape.channels {
            return Err(BackdoorError::ColorChannels {
                expected: shape.channels,
                found: color.len(),
            });
        }
        if let Some(&c) = color.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(BackdoorError::ColorRange(c));
        }
        Ok(())
    }

    /// Checks a noise trigger against a noise dimension.
    pub fn validate_for_noise(&self, dim: usize) -> Result<()> {
        match self {
            Self::NoiseComponent { index, value } => {
                index.resolve(dim)?;
                if !value.is_finite() {
                    return Err(BackdoorError::Tensor(TensorError::NonFinite {
                        context: "noise trigger value".into(),
                        index: 0,
                    }));
                }
                Ok(())
            }
            Self::ImagePatch { .. } => Err(BackdoorError::WrongTriggerKind {
                expected: "noise_component",
            }),
        }
    }
}

/// The output a backdoored model must produce on triggered inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetSpec {
    /// One stored `H × W × C` image for every input.
    FixedImage(Tensor),
    /// `1 − x` elementwise.
    Inverse,
    /// Samples from another dataset; only meaningful for GAN training.
    Distribution(Arc<Dataset>),
}

impl TargetSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::FixedImage(_) => "fixed_image",
            Self::Inverse => "inverse",
            Self::Distribution(_) => "distribution",
        }
    }

    pub fn validate_for_image(&self, shape: ImageShape) -> Result<()> {
        match self {
            Self::FixedImage(img) if img.len() != shape.len() => Err(BackdoorError::TargetShape {
                target: img.shape().to_vec(),
                input: shape.dims().to_vec(),
            }),
            Self::Distribution(d) if d.is_empty() => Err(BackdoorError::EmptyDistribution),
            Self::Distribution(d) if d.image_shape() != shape => Err(BackdoorError::TargetShape {
                target: d.image_shape().dims().to_vec(),
                input: shape.dims().to_vec(),
            }),
            _ => Ok(()),
        }
    }
}

fn stamp(pixels: &mut [f32], shape: ImageShape, corner: Corner, size: usize, color: &[f32]) {
    let top = match corner {
        Corner::TopLeft | Corner::TopRight => 0,
        Corner::BottomLeft | Corner::BottomRight => shape.height - size,
    };
    let left = match corner {
        Corner::TopLeft | Corner::BottomLeft => 0,
        Corner::TopRight | Corner::BottomRight => shape.width - size,
    };
    let c = shape.channels;
    for r in top..top + size {
        for col in left..left + size {
            let base = (r * shape.width + col) * c;
            for ch in 0..c {
                pixels[base + ch] = if color.len() == 1 { color[0] } else { color[ch] };
            }
        }
    }
}

fn image_shape_of(x: &Tensor) -> Result<ImageShape> {
    match *x.shape() {
        [h, w, c] => Ok(ImageShape::new(h, w, c)),
        [h, w] => Ok(ImageShape::new(h, w, 1)),
        _ => Err(BackdoorError::Tensor(TensorError::Rank {
            op: "image trigger",
            expected: 3,
            shape: x.shape().to_vec(),
        })),
    }
}

/// Copy of an `H × W × C` image with the trigger patch painted over it.
pub fn apply_image_trigger(x: &Tensor, trigger: &TriggerSpec) -> Result<Tensor> {
    let shape = image_shape_of(x)?;
    trigger.validate_for_image(shape)?;
    let TriggerSpec::ImagePatch {
        corner,
        size,
        color,
    } = trigger
    else {
        unreachable!("validated above");
    };
    let mut pixels = x.data().to_vec();
    stamp(&mut pixels, shape, *corner, *size, color);
    Ok(Tensor::new(x.shape().to_vec(), pixels)?)
}

/// [`apply_image_trigger`] over every row of a flattened `n × (H·W·C)` batch.
pub fn apply_image_trigger_batch(batch: &Tensor, shape: ImageShape, trigger: &TriggerSpec) -> Result<Tensor> {
    trigger.validate_for_image(shape)?;
    check_rows(batch, shape.len())?;
    let TriggerSpec::ImagePatch {
        corner,
        size,
        color,
    } = trigger
    else {
        unreachable!("validated above");
    };
    let mut pixels = batch.data().to_vec();
    for row in pixels.chunks_exact_mut(shape.len()) {
        stamp(row, shape, *corner, *size, color);
    }
    Ok(Tensor::new(batch.shape().to_vec(), pixels)?)
}

/// Copy of a noise vector (or of every row of a `n × d` noise batch) with the
/// trigger component overwritten.
pub fn apply_noise_trigger(z: &Tensor, trigger: &TriggerSpec) -> Result<Tensor> {
    let dim = *z.shape().last().expect("tensors have rank ≥ 1 here");
    trigger.validate_for_noise(dim)?;
    let TriggerSpec::NoiseComponent { index, value } = trigger else {
        unreachable!("validated above");
    };
    let index = index.resolve(dim)?;
    let mut data = z.data().to_vec();
    for row in data.chunks_exact_mut(dim) {
        row[index] = *value;
    }
    Ok(Tensor::new(z.shape().to_vec(), data)?)
}

/// The image a backdoored autoencoder must emit for (the triggered version
/// of) `x`.
pub fn make_target(x: &Tensor, spec: &TargetSpec) -> Result<Tensor> {
    match spec {
        TargetSpec::FixedImage(img) => {
            if img.len() != x.len() {
                return Err(BackdoorError::TargetShape {
                    target: img.shape().to_vec(),
                    input: x.shape().to_vec(),
                });
            }
            Ok(img.clone().reshape(x.shape().to_vec())?)
        }
        TargetSpec::Inverse => Ok(x.map(|v| 1.0 - v)?),
        TargetSpec::Distribution(_) => Err(BackdoorError::DistributionTarget),
    }
}

/// [`make_target`] over every row of a flattened batch.
pub fn make_target_batch(batch: &Tensor, shape: ImageShape, spec: &TargetSpec) -> Result<Tensor> {
    check_rows(batch, shape.len())?;
    match spec {
        TargetSpec::FixedImage(img) => {
            spec.validate_for_image(shape)?;
            let rows = batch.shape()[0];
            let data = img.data().repeat(rows);
            Ok(Tensor::new(batch.shape().to_vec(), data)?)
        }
        TargetSpec::Inverse => Ok(batch.map(|v| 1.0 - v)?),
        TargetSpec::Distribution(_) => Err(BackdoorError::DistributionTarget),
    }
}

fn check_rows(batch: &Tensor, row_len: usize) -> Result<()> {
    if batch.rank() != 2 || batch.shape()[1] != row_len {
        return Err(BackdoorError::Tensor(TensorError::ShapeMismatch {
            op: "batch trigger",
            left: batch.shape().to_vec(),
            right: vec![row_len],
        }));
    }
    Ok(())
}
