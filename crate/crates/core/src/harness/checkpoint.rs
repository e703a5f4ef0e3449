//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"BDLABCKP"  magic
//! u8           format version
//! 3 × (u64 length, JSON bytes)   descriptor, config echo, metrics snapshot
//! u64 count, count × f32         flat parameters
//! ```

use std::fs;
use std::path::Path;

use bdlab_tensor::{LayerSpec, Mlp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoencoder::{AutoencoderModel, LossKind};
use crate::data::ImageShape;
use crate::gan::Generator;

pub const MAGIC: &[u8; 8] = b"BDLABCKP";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    Version { found: u8, expected: u8 },
    #[error("truncated or padded checkpoint: {0}")]
    Length(String),
    #[error("descriptor promises {expected} parameters, payload holds {found}")]
    ParamCount { expected: usize, found: usize },
    #[error("bad checkpoint section: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid model: {0}")]
    Model(#[from] bdlab_tensor::TensorError),
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Architecture of a stored model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelDescriptor {
    Autoencoder {
        image_shape: ImageShape,
        loss: LossKind,
        encoder: Vec<LayerSpec>,
        decoder: Vec<LayerSpec>,
    },
    Generator {
        image_shape: ImageShape,
        layers: Vec<LayerSpec>,
    },
}

impl ModelDescriptor {
    pub fn param_count(&self) -> usize {
        let count = |specs: &[LayerSpec]| specs.iter().map(LayerSpec::param_count).sum::<usize>();
        match self {
            Self::Autoencoder { encoder, decoder, .. } => count(encoder) + count(decoder),
            Self::Generator { layers, .. } => count(layers),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Autoencoder(AutoencoderModel),
    Generator(Generator),
}

impl Model {
    pub fn descriptor(&self) -> ModelDescriptor {
        match self {
            Self::Autoencoder(m) => ModelDescriptor::Autoencoder {
                image_shape: m.image_shape(),
                loss: m.loss(),
                encoder: m.encoder().specs(),
                decoder: m.decoder().specs(),
            },
            Self::Generator(g) => ModelDescriptor::Generator {
                image_shape: g.image_shape(),
                layers: g.mlp().specs(),
            },
        }
    }

    pub fn flat_params(&self) -> Vec<f32> {
        match self {
            Self::Autoencoder(m) => {
                let mut p = m.encoder().flat_params();
                p.extend(m.decoder().flat_params());
                p
            }
            Self::Generator(g) => g.mlp().flat_params(),
        }
    }

    pub fn from_parts(descriptor: &ModelDescriptor, params: &[f32]) -> Result<Self, CheckpointError> {
        let expected = descriptor.param_count();
        if expected != params.len() {
            return Err(CheckpointError::ParamCount {
                expected,
                found: params.len(),
            });
        }
        Ok(match descriptor {
            ModelDescriptor::Autoencoder {
                image_shape,
                loss,
                encoder,
                decoder,
            } => {
                let split: usize = encoder.iter().map(LayerSpec::param_count).sum();
                let enc = Mlp::from_flat(encoder, &params[..split])?;
                let dec = Mlp::from_flat(decoder, &params[split..])?;
                Self::Autoencoder(AutoencoderModel::from_parts(enc, dec, *image_shape, *loss)?)
            }
            ModelDescriptor::Generator { image_shape, layers } => {
                Self::Generator(Generator::from_mlp(Mlp::from_flat(layers, params)?, *image_shape)?)
            }
        })
    }
}

/// A model plus the provenance stored beside it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    /// Echo of the configuration that trained the model.
    pub config: serde_json::Value,
    /// Metrics at save time, or `null`.
    pub metrics: serde_json::Value,
}

impl ModelCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        let descriptor = serde_json::to_vec(&self.model.descriptor()).expect("descriptor serializes");
        for section in [
            descriptor,
            serde_json::to_vec(&self.config).expect("json value"),
            serde_json::to_vec(&self.metrics).expect("json value"),
        ] {
            out.extend_from_slice(&(section.len() as u64).to_le_bytes());
            out.extend_from_slice(&section);
        }
        let params = self.model.flat_params();
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = r.take(1, "version")?[0];
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let descriptor: ModelDescriptor = serde_json::from_slice(r.section("descriptor")?)?;
        let config = serde_json::from_slice(r.section("config")?)?;
        let metrics = serde_json::from_slice(r.section("metrics")?)?;
        let count = r.u64("parameter count")?;
        let expected = descriptor.param_count();
        if count != expected as u64 {
            return Err(CheckpointError::ParamCount {
                expected,
                found: count as usize,
            });
        }
        let payload = r.take(count as usize * 4, "parameters")?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Length(format!(
                "{} trailing bytes after the parameters",
                bytes.len() - r.pos
            )));
        }
        let params: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self {
            model: Model::from_parts(&descriptor, &params)?,
            config,
            metrics,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Length(format!(
                "{what} needs {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn section(&mut self, what: &str) -> Result<&'a [u8], CheckpointError> {
        let len = self.u64(what)?;
        let len = usize::try_from(len).map_err(|_| CheckpointError::Length(format!("{what} length {len}")))?;
        self.take(len, what)
    }
}

/// Writes `bytes` next to `path` and renames into place, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn io_error(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &ModelCheckpoint) -> Result<(), CheckpointError> {
    write_atomic(path, &checkpoint.to_bytes()).map_err(|e| io_error(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint, CheckpointError> {
    ModelCheckpoint::from_bytes(&fs::read(path).map_err(|e| io_error(path, e))?)
}
