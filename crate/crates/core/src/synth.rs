//! Deterministic synthetic crowd scenes: soft blobs on a noisy background,
//! with blob size growing towards the bottom of the frame to mimic a
//! perspective scale gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::density::PointAnnotation;
use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub min_count: usize,
    pub max_count: usize,
    /// Blob radius (Gaussian std, pixels) at the top row.
    pub radius_top: Float,
    /// Blob radius at the bottom row; radii interpolate linearly in between.
    pub radius_bottom: Float,
    /// Peak intensity of one blob before clamping to [0, 1].
    pub blob_intensity: Float,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: Float,
    /// Constant background level.
    pub background: Float,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 64,
            height: 64,
            min_count: 1,
            max_count: 30,
            radius_top: 1.0,
            radius_bottom: 2.5,
            blob_intensity: 0.8,
            noise: 0.03,
            background: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("synthetic image size must be positive".into()));
        }
        if self.min_count > self.max_count {
            return Err(Error::InvalidConfig(format!(
                "count range ({}, {}) is empty",
                self.min_count, self.max_count
            )));
        }
        if !(self.radius_top > 0.0 && self.radius_bottom > 0.0) {
            return Err(Error::InvalidConfig("blob radii must be positive".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::InvalidConfig("noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Blob radius for a blob centered at row `y`.
    pub fn radius_at(&self, y: Float) -> Float {
        let t = if self.height > 1 { y / (self.height - 1) as Float } else { 0.0 };
        self.radius_top + (self.radius_bottom - self.radius_top) * t.clamp(0.0, 1.0)
    }
}

/// One generated image with its head annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `(1, 1, H, W)` grayscale image with values in [0, 1].
    pub image: Tensor,
    pub annotation: PointAnnotation,
}

pub fn generate_scene(cfg: &SynthConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width, cfg.height);
    let count = rng.random_range(cfg.min_count..=cfg.max_count);
    let points: Vec<[Float; 2]> = (0..count)
        .map(|_| [rng.random_range(0.0..w as Float), rng.random_range(0.0..h as Float)])
        .collect();

    let mut pixels = vec![cfg.background; w * h];
    for &[px, py] in &points {
        let r = cfg.radius_at(py);
        let reach = 3.0 * r;
        let x0 = (px - reach).floor().max(0.0) as usize;
        let x1 = ((px + reach).ceil() as usize).min(w - 1);
        let y0 = (py - reach).floor().max(0.0) as usize;
        let y1 = ((py + reach).ceil() as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as Float + 0.5 - px;
                let dy = y as Float + 0.5 - py;
                pixels[y * w + x] += cfg.blob_intensity * (-(dx * dx + dy * dy) / (2.0 * r * r)).exp();
            }
        }
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).expect("noise std is finite and non-negative");
        for p in &mut pixels {
            *p += normal.sample(&mut rng);
        }
    }
    for p in &mut pixels {
        *p = p.clamp(0.0, 1.0);
    }

    Ok(Scene {
        image: Tensor::from_vec(Shape::new(1, 1, h, w), pixels)?,
        annotation: PointAnnotation::new(w, h, points)?,
    })
}

/// Seed of the `index`-th scene in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` scenes derived from one dataset seed.
pub fn generate_dataset(cfg: &SynthConfig, count: usize, seed: u64) -> Result<Vec<Scene>> {
    (0..count).map(|i| generate_scene(cfg, scene_seed(seed, i))).collect()
}
