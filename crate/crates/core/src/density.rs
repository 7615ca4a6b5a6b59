//! Point annotations, ground-truth density maps and the multi-scale target
//! pyramid used for level-wise supervision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Float, Shape, Tensor};

/// Head positions of one image, in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub width: usize,
    pub height: usize,
    pub points: Vec<[Float; 2]>,
}

impl PointAnnotation {
    /// Builds an annotation, rejecting points outside `[0, width) x [0, height)`.
    pub fn new(width: usize, height: usize, points: Vec<[Float; 2]>) -> Result<Self> {
        let ann = PointAnnotation { width, height, points };
        ann.validate()?;
        Ok(ann)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::arg("annotation", "image dimensions must be positive"));
        }
        for &[x, y] in &self.points {
            let inside = x >= 0.0 && y >= 0.0 && x < self.width as Float && y < self.height as Float;
            if !inside {
                return Err(Error::PointOutOfBounds { x, y, width: self.width, height: self.height });
            }
        }
        Ok(())
    }

    /// Ground-truth person count.
    pub fn count(&self) -> usize {
        self.points.len()
    }
}

/// Single-channel density grid; its sum is a person count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    height: usize,
    width: usize,
    values: Vec<Float>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        DensityMap { height, width, values: vec![0.0; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<Float>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::arg("density_map", "dimensions must be positive"));
        }
        if values.len() != height * width {
            return Err(Error::shape(
                "density_map",
                format!("{} values for {height}x{width}", values.len()),
            ));
        }
        Ok(DensityMap { height, width, values })
    }

    /// Takes batch item `index`, channel 0 of a tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Self {
        let [_, c, h, w] = t.shape().0;
        let start = index * c * h * w;
        DensityMap { height: h, width: w, values: t.data()[start..start + h * w].to_vec() }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), self.values.clone())
            .expect("density map dimensions are positive")
    }

    /// Stacks maps of equal size into an `(M, 1, H, W)` tensor.
    pub fn stack(maps: &[DensityMap]) -> Result<Tensor> {
        let tensors: Vec<Tensor> = maps.iter().map(DensityMap::to_tensor).collect();
        Tensor::stack(&tensors)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[Float] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Float] {
        &mut self.values
    }

    pub fn at(&self, y: usize, x: usize) -> Float {
        self.values[y * self.width + x]
    }

    pub fn sum(&self) -> Float {
        self.values.iter().sum()
    }

    /// Copies the window with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || y + height > self.height || x + width > self.width {
            return Err(Error::arg(
                "crop",
                format!("{height}x{width} window at ({y}, {x}) of {}x{}", self.height, self.width),
            ));
        }
        let mut values = Vec::with_capacity(height * width);
        for row in y..y + height {
            values.extend_from_slice(&self.values[row * self.width + x..row * self.width + x + width]);
        }
        Ok(DensityMap { height, width, values })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut values = self.values.clone();
        for row in values.chunks_mut(self.width) {
            row.reverse();
        }
        DensityMap { height: self.height, width: self.width, values }
    }

    pub fn sub(&self, other: &DensityMap) -> Result<DensityMap> {
        if self.dims() != other.dims() {
            return Err(Error::shape("density_sub", format!("{:?} vs {:?}", self.dims(), other.dims())));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(DensityMap { height: self.height, width: self.width, values })
    }

    /// Sets negative values to zero.
    pub fn clamped(&self) -> Self {
        DensityMap {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| v.max(0.0)).collect(),
        }
    }
}

/// Support of a truncated Gaussian along one axis: `(first index, weights)`.
/// Pixel `i` has its center at `i + 0.5`.
fn axis_kernel(center: Float, len: usize, sigma: Float) -> (usize, Vec<Float>) {
    let radius = 4.0 * sigma;
    let lo = (center - 0.5 - radius).ceil().max(0.0) as usize;
    let hi = ((center - 0.5 + radius).floor() as isize).min(len as isize - 1);
    let mut weights = Vec::new();
    if hi >= lo as isize {
        for i in lo..=hi as usize {
            let d = i as Float + 0.5 - center;
            weights.push((-d * d / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: Float = weights.iter().sum();
    if total > 0.0 && total.is_finite() {
        weights.iter_mut().for_each(|w| *w /= total);
        (lo, weights)
    } else {
        // Kernel narrower than a pixel: all mass on the containing pixel.
        ((center.floor() as usize).min(len - 1), vec![1.0])
    }
}

/// Ground-truth density: one normalized Gaussian per point with standard
/// deviation `sigma`, truncated at 4 sigma and renormalized after clipping
/// to the image so that each point contributes exactly one unit of mass.
pub fn generate_density_map(ann: &PointAnnotation, sigma: Float) -> Result<DensityMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::arg("generate_density_map", format!("sigma must be positive, got {sigma}")));
    }
    ann.validate()?;
    let mut map = DensityMap::zeros(ann.height, ann.width);
    for &[x, y] in &ann.points {
        let (x0, kx) = axis_kernel(x, ann.width, sigma);
        let (y0, ky) = axis_kernel(y, ann.height, sigma);
        for (dy, wy) in ky.iter().enumerate() {
            let row = &mut map.values[(y0 + dy) * ann.width + x0..(y0 + dy) * ann.width + x0 + kx.len()];
            for (v, wx) in row.iter_mut().zip(&kx) {
                *v += wy * wx;
            }
        }
    }
    Ok(map)
}

/// Sum-preserving downsampling by non-overlapping `factor x factor` block sums.
pub fn downsample_density(map: &DensityMap, factor: usize) -> Result<DensityMap> {
    if factor == 0 || map.height % factor != 0 || map.width % factor != 0 {
        return Err(Error::arg(
            "downsample_density",
            format!("{}x{} not divisible by {factor}", map.height, map.width),
        ));
    }
    let (oh, ow) = (map.height / factor, map.width / factor);
    let mut out = DensityMap::zeros(oh, ow);
    for y in 0..map.height {
        for x in 0..map.width {
            out.values[(y / factor) * ow + x / factor] += map.values[y * map.width + x];
        }
    }
    Ok(out)
}

/// Ground truth at every pyramid resolution, finest first: level `k`
/// (0-based) is the ground truth block-summed by `scale^k`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetPyramid {
    pub levels: Vec<DensityMap>,
}

pub fn build_target_pyramid(gt: &DensityMap, levels: usize, scale: usize) -> Result<TargetPyramid> {
    if levels == 0 {
        return Err(Error::arg("build_target_pyramid", "at least one level is required"));
    }
    let mut out = Vec::with_capacity(levels);
    out.push(gt.clone());
    let mut factor = 1;
    for _ in 1..levels {
        factor *= scale;
        out.push(downsample_density(gt, factor)?);
    }
    Ok(TargetPyramid { levels: out })
}

/// `H - u_s(D_prev)`: the residual a level must add to the upsampled coarser
/// estimate to hit its target.
pub fn target_residual(target: &DensityMap, previous: &DensityMap, scale: usize) -> Result<DensityMap> {
    let up = ops::bilinear_upsample(&previous.to_tensor(), scale)?;
    let up = DensityMap::from_tensor(&up, 0);
    if up.dims() != target.dims() {
        return Err(Error::shape(
            "target_residual",
            format!("upsampled {:?} vs target {:?}", up.dims(), target.dims()),
        ));
    }
    target.sub(&up)
}
