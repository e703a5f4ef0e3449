use std::io::Cursor;
use std::path::Path;

use bdlab_tensor::Tensor;
use image::{ImageBuffer, ImageFormat, Luma, Rgb};
use thiserror::Error;

use super::checkpoint::write_atomic;

/// Width of the gap between tiles, in pixels.
pub const SEPARATOR: u32 = 2;
/// Gray level of the gaps.
pub const SEPARATOR_LEVEL: u8 = 128;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("{rows}×{cols} grid needs {} images, got {found}", rows * cols)]
    Count { rows: usize, cols: usize, found: usize },
    #[error("image {index} has shape {found:?}, expected {expected:?}")]
    Shape {
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("grids hold 1- or 3-channel images, got {0} channels")]
    Channels(usize),
    #[error("png encoding failed: {0}")]
    Encode(#[from] image::ImageError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// `[0, 1]` → `0..=255`, rounding to nearest.
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn dims(t: &Tensor) -> Option<(usize, usize, usize)> {
    match *t.shape() {
        [h, w] => Some((h, w, 1)),
        [h, w, c] => Some((h, w, c)),
        _ => None,
    }
}

/// Tiles `images` (each `H × W` or `H × W × C`) row-major into a PNG.
/// Tiles are separated by [`SEPARATOR`] gray pixels; there is no outer
/// border, so the result is `rows·H + (rows−1)·2` pixels tall.
pub fn render_grid(images: &[Tensor], rows: usize, cols: usize) -> Result<Vec<u8>, GridError> {
    if rows == 0 || cols == 0 || rows * cols != images.len() {
        return Err(GridError::Count {
            rows,
            cols,
            found: images.len(),
        });
    }
    let (h, w, c) = dims(&images[0]).ok_or_else(|| GridError::Shape {
        index: 0,
        expected: vec![0, 0, 1],
        found: images[0].shape().to_vec(),
    })?;
    if c != 1 && c != 3 {
        return Err(GridError::Channels(c));
    }
    for (index, img) in images.iter().enumerate() {
        if dims(img) != Some((h, w, c)) {
            return Err(GridError::Shape {
                index,
                expected: vec![h, w, c],
                found: img.shape().to_vec(),
            });
        }
    }
    let gap = SEPARATOR as usize;
    let width = (cols * w + (cols - 1) * gap) as u32;
    let height = (rows * h + (rows - 1) * gap) as u32;
    let mut pixels = vec![SEPARATOR_LEVEL; width as usize * height as usize * c];
    for (i, img) in images.iter().enumerate() {
        let (top, left) = ((i / cols) * (h + gap), (i % cols) * (w + gap));
        for y in 0..h {
            let src = &img.data()[y * w * c..(y + 1) * w * c];
            let start = ((top + y) * width as usize + left) * c;
            for (dst, &v) in pixels[start..start + w * c].iter_mut().zip(src) {
                *dst = to_byte(v);
            }
        }
    }
    let mut out = Cursor::new(Vec::new());
    if c == 1 {
        ImageBuffer::<Luma<u8>, _>::from_raw(width, height, pixels)
            .expect("buffer sized above")
            .write_to(&mut out, ImageFormat::Png)?;
    } else {
        ImageBuffer::<Rgb<u8>, _>::from_raw(width, height, pixels)
            .expect("buffer sized above")
            .write_to(&mut out, ImageFormat::Png)?;
    }
    Ok(out.into_inner())
}

pub fn emit_grid(images: &[Tensor], rows: usize, cols: usize, path: &Path) -> Result<(), GridError> {
    let png = render_grid(images, rows, cols)?;
    write_atomic(path, &png).map_err(|source| GridError::Io {
        path: path.display().to_string(),
        source,
    })
}
