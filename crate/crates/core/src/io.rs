//! On-disk formats.
//!
//! * Annotations: JSON `{"width": W, "height": H, "points": [[x, y], ...]}`.
//! * Density maps: magic `CRD1`, height and width as little-endian `u32`,
//!   then `height * width` little-endian `f32` values in row-major order.
//!   Values are rounded to `f32` on write.
//! * Images: 16-bit grayscale PNG mapped to [0, 1].
//! * Density previews: 8-bit grayscale PNG, max-normalized per map.

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma};

use crate::density::{DensityMap, PointAnnotation};
use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tensor};

pub const DENSITY_MAGIC: &[u8; 4] = b"CRD1";

pub fn parse_annotation(text: &str, context: &str) -> Result<PointAnnotation> {
    let ann: PointAnnotation =
        serde_json::from_str(text).map_err(|e| Error::parse(context, e.to_string()))?;
    ann.validate()?;
    Ok(ann)
}

pub fn load_annotation(path: &Path) -> Result<PointAnnotation> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotation(&text, &path.display().to_string())
}

pub fn write_annotation(path: &Path, ann: &PointAnnotation) -> Result<()> {
    let text = serde_json::to_string(ann).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn encode_density(map: &DensityMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * map.values().len());
    out.extend_from_slice(DENSITY_MAGIC);
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    for &v in map.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_density(bytes: &[u8], context: &str) -> Result<DensityMap> {
    if bytes.len() < 12 {
        return Err(Error::parse(context, format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != DENSITY_MAGIC {
        return Err(Error::parse(context, "bad magic, expected CRD1"));
    }
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if height == 0 || width == 0 {
        return Err(Error::parse(context, format!("empty grid {height}x{width}")));
    }
    let payload = &bytes[12..];
    let expected = height.checked_mul(width).and_then(|n| n.checked_mul(4));
    if expected != Some(payload.len()) {
        return Err(Error::parse(
            context,
            format!("{height}x{width} grid needs {expected:?} payload bytes, found {}", payload.len()),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Float)
        .collect();
    DensityMap::from_vec(height, width, values)
}

pub fn write_density(path: &Path, map: &DensityMap) -> Result<()> {
    fs::write(path, encode_density(map)).map_err(|e| Error::io(path, e))
}

pub fn read_density(path: &Path) -> Result<DensityMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_density(&bytes, &path.display().to_string())
}

fn image_err(path: &Path, e: impl ToString) -> Error {
    Error::Image { path: path.to_path_buf(), detail: e.to_string() }
}

/// Writes a `(1, 1, H, W)` tensor with values in [0, 1] as 16-bit grayscale.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let [_, _, h, w] = image.shape().0;
    let pixels: Vec<u16> = image.data()[..h * w]
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, pixels).expect("buffer matches dimensions");
    buf.save(path).map_err(|e| image_err(path, e))
}

/// Reads any grayscale-convertible image as a `(1, 1, H, W)` tensor in [0, 1].
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as Float / 65535.0).collect();
    Tensor::from_vec(Shape::new(1, 1, h as usize, w as usize), data)
}

/// Max-normalized 8-bit preview; negative values render as black.
pub fn write_density_png(path: &Path, map: &DensityMap) -> Result<()> {
    let max = map.values().iter().copied().fold(0.0, Float::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let pixels = map.values().iter().map(|v| (v.max(0.0) * scale).round() as u8).collect();
    let img = GrayImage::from_raw(map.width() as u32, map.height() as u32, pixels)
        .expect("buffer matches dimensions");
    img.save(path).map_err(|e| image_err(path, e))
}
