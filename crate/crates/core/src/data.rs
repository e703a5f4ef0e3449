//! Image datasets: IDX ingestion, a synthetic fixture, label filtering and
//! seeded batching.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use bdlab_tensor::{Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad IDX magic 0x{found:08x}, expected 0x{expected:08x}")]
    Magic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: payload holds {found} bytes, header promises {expected}")]
    Length {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{images} images but {labels} labels")]
    Consistency { images: usize, labels: usize },
    #[error("degenerate dataset: {0}")]
    Degenerate(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("pixel {index} = {value} lies outside [0, 1]")]
    PixelRange { index: usize, value: f32 },
    #[error("dataset {0} has no labels")]
    MissingLabels(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const MNIST: ImageShape = ImageShape::new(28, 28, 1);

    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    /// Number of values in one image.
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Immutable set of images with values in `[0, 1]`, stored as a
/// `count × H × W × C` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Option<Vec<u8>>,
    name: String,
    split: Split,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Option<Vec<u8>>,
        name: impl Into<String>,
        split: Split,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(DataError::Size(format!(
                "images must be count×H×W×C, got {:?}",
                images.shape()
            )));
        }
        if let Some((index, &value)) = images
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(DataError::PixelRange { index, value });
        }
        if let Some(labels) = &labels {
            if labels.len() != images.shape()[0] {
                return Err(DataError::Consistency {
                    images: images.shape()[0],
                    labels: labels.len(),
                });
            }
        }
        Ok(Self {
            images,
            labels,
            name: name.into(),
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn image_shape(&self) -> ImageShape {
        let s = self.images.shape();
        ImageShape::new(s[1], s[2], s[3])
    }

    /// Flat `H·W·C` pixel slice of image `i`.
    pub fn pixels(&self, i: usize) -> &[f32] {
        let n = self.image_shape().len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Image `i` as an `H × W × C` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        Tensor::new(self.image_shape().dims().to_vec(), self.pixels(i).to_vec())
            .expect("dataset pixels are finite")
    }

    /// Rows `indices` flattened into a `len × (H·W·C)` tensor, the layout the
    /// dense networks consume.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let n = self.image_shape().len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.pixels(i));
        }
        Tensor::new(vec![indices.len(), n], data).expect("dataset pixels are finite")
    }

    /// New dataset holding the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(DataError::Degenerate(format!("empty subset of {}", self.name)));
        }
        let shape = self.image_shape();
        let images = self.batch(indices).reshape(vec![
            indices.len(),
            shape.height,
            shape.width,
            shape.channels,
        ])?;
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(images, labels, self.name.clone(), self.split)
    }

    /// First `count` rows (or all of them when the set is smaller).
    pub fn take(&self, count: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..count.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Length {
            path: path.to_path_buf(),
            expected: offset + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(DataError::Magic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

/// Raw IDX image file: `(count, rows, cols, bytes)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    check_magic(&bytes, IDX_IMAGES_MAGIC, path)?;
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let payload = &bytes[16..];
    let expected = count * rows * cols;
    if payload.len() != expected {
        return Err(DataError::Length {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    Ok((count, rows, cols, payload.to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    check_magic(&bytes, IDX_LABELS_MAGIC, path)?;
    let count = be_u32(&bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(DataError::Length {
            path: path.to_path_buf(),
            expected: count,
            found: payload.len(),
        });
    }
    Ok(payload.to_vec())
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let per_image = rows * cols;
    if per_image == 0 || pixels.len() % per_image != 0 {
        return Err(DataError::Size(format!(
            "{} bytes do not tile {rows}×{cols} images",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [pixels.len() / per_image, rows, cols] {
        out.extend_from_slice(&(v as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an IDX image file (and optional label file) with pixels scaled to
/// `[0, 1]`. Files whose name starts with `t10k` or contains `test` are
/// tagged as the test split.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let (count, rows, cols, bytes) = read_idx_images(images_path)?;
    let labels = labels_path.map(read_idx_labels).transpose()?;
    if let Some(l) = &labels {
        if l.len() != count {
            return Err(DataError::Consistency {
                images: count,
                labels: l.len(),
            });
        }
    }
    if count == 0 {
        return Err(DataError::Degenerate(format!(
            "{} contains no images",
            images_path.display()
        )));
    }
    let data = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
    let images = Tensor::new(vec![count, rows, cols, 1], data)?;
    let file = images_path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let split = if file.starts_with("t10k") || file.contains("test") {
        Split::Test
    } else {
        Split::Train
    };
    let name = file.split('-').next().unwrap_or("idx").to_string();
    Dataset::new(images, labels, name, split)
}

/// MNIST from a directory holding the four standard (uncompressed) IDX files.
pub fn load_mnist(root: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = root.join(format!("{prefix}-images-idx3-ubyte"));
    let labels = root.join(format!("{prefix}-labels-idx1-ubyte"));
    Ok(load_idx(&images, Some(&labels))?.with_name("mnist"))
}

/// Writes a single-channel dataset as IDX, quantizing pixels to bytes.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: Option<&Path>) -> Result<()> {
    let shape = dataset.image_shape();
    if shape.channels != 1 {
        return Err(DataError::Size(format!(
            "IDX holds single-channel images, dataset has {} channels",
            shape.channels
        )));
    }
    let bytes: Vec<u8> = dataset
        .images()
        .data()
        .iter()
        .map(|&v| (v * 255.0).round() as u8)
        .collect();
    write_idx_images(images_path, shape.height, shape.width, &bytes)?;
    if let Some(path) = labels_path {
        let labels = dataset
            .labels()
            .ok_or_else(|| DataError::MissingLabels(dataset.name().into()))?;
        write_idx_labels(path, labels)?;
    }
    Ok(())
}

/// Examples whose label is in `keep`, original order preserved.
pub fn filter_by_labels(dataset: &Dataset, keep: &[u8]) -> Result<Dataset> {
    let labels = dataset
        .labels()
        .ok_or_else(|| DataError::MissingLabels(dataset.name().into()))?;
    let keep: BTreeSet<u8> = keep.iter().copied().collect();
    let idx: Vec<usize> = (0..labels.len()).filter(|&i| keep.contains(&labels[i])).collect();
    if idx.is_empty() {
        return Err(DataError::Degenerate(format!(
            "no example of {} has a label in {keep:?}",
            dataset.name()
        )));
    }
    dataset.subset(&idx)
}

/// Seeded images with one bright axis-aligned rectangle on a black
/// background. The label is the quadrant holding the rectangle's center:
/// 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
pub fn synth_blobs(count: usize, height: usize, width: usize, seed: u64) -> Result<Dataset> {
    if count == 0 || height < 4 || width < 4 {
        return Err(DataError::Size(format!(
            "synth_blobs needs count ≥ 1 and images of at least 4×4, got {count} of {height}×{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0f32; count * height * width];
    let mut labels = Vec::with_capacity(count);
    for img in data.chunks_exact_mut(height * width) {
        let rect_h = rng.random_range(2..=height / 2);
        let rect_w = rng.random_range(2..=width / 2);
        let top = rng.random_range(0..=height - rect_h);
        let left = rng.random_range(0..=width - rect_w);
        let brightness: f32 = rng.random_range(0.6..=1.0);
        for r in top..top + rect_h {
            img[r * width + left..r * width + left + rect_w].fill(brightness);
        }
        let bottom = 2 * top + rect_h >= height;
        let right = 2 * left + rect_w >= width;
        labels.push(u8::from(right) + 2 * u8::from(bottom));
    }
    let images = Tensor::new(vec![count, height, width, 1], data)?;
    Dataset::new(images, Some(labels), "synth_blobs", Split::Train)
}

const SHUFFLE_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub drop_last: bool,
}

impl BatchPlan {
    pub fn new(batch_size: usize, seed: u64, drop_last: bool) -> Self {
        Self {
            batch_size,
            seed,
            drop_last,
        }
    }

    /// Permutation of `0..count`, a pure function of `(seed, epoch)`.
    pub fn permutation(&self, count: usize, epoch: u64) -> Vec<usize> {
        // Salted so shuffling never shares a keystream with other consumers
        // of the same experiment seed.
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ SHUFFLE_SALT);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn batches(&self, count: usize, epoch: u64) -> Result<Vec<Vec<usize>>> {
        if self.batch_size == 0 || self.batch_size > count {
            return Err(DataError::Size(format!(
                "batch size {} does not fit {count} examples",
                self.batch_size
            )));
        }
        let order = self.permutation(count, epoch);
        Ok(order
            .chunks(self.batch_size)
            .filter(|c| !self.drop_last || c.len() == self.batch_size)
            .map(<[usize]>::to_vec)
            .collect())
    }
}

pub fn batches(dataset: &Dataset, plan: &BatchPlan, epoch: u64) -> Result<Vec<Vec<usize>>> {
    plan.batches(dataset.len(), epoch)
}
