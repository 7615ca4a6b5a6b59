//! Dense NCHW tensors.

use std::fmt;

use crate::error::{Error, Result};

/// Floating point type used throughout the crate.
pub type Float = f64;

/// Shape of a 4-D tensor in (batch, channels, height, width) order.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape([batch, channels, height, width])
    }

    pub fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn batch(&self) -> usize {
        self.0[0]
    }

    pub fn channels(&self) -> usize {
        self.0[1]
    }

    pub fn height(&self) -> usize {
        self.0[2]
    }

    pub fn width(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Number of elements in one spatial plane.
    pub fn plane(&self) -> usize {
        self.0[2] * self.0[3]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n}, {c}, {h}, {w})")
    }
}

/// Row-major dense tensor. All dimensions are at least 1.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<Float>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape).finish_non_exhaustive()
    }
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<Float>) -> Result<Self> {
        if shape.0.contains(&0) {
            return Err(Error::arg("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "tensor",
                format!("{} values for shape {shape:?}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics if any dimension is zero.
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    /// Panics if any dimension is zero.
    pub fn full(shape: Shape, value: Float) -> Self {
        assert!(!shape.0.contains(&0), "zero-sized dimension in {shape:?}");
        Tensor { shape, data: vec![value; shape.numel()] }
    }

    pub fn scalar(value: Float) -> Self {
        Tensor { shape: Shape::scalar(), data: vec![value] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> Float) -> Self {
        assert!(!shape.0.contains(&0), "zero-sized dimension in {shape:?}");
        let [n, c, h, w] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([b, ch, y, x]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[Float] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Float] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Float> {
        self.data
    }

    pub fn index(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape.0;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    pub fn at(&self, idx: [usize; 4]) -> Float {
        self.data[self.index(idx)]
    }

    pub fn set(&mut self, idx: [usize; 4], value: Float) {
        let i = self.index(idx);
        self.data[i] = value;
    }

    pub fn sum(&self) -> Float {
        self.data.iter().sum()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Float {
        debug_assert!(self.shape.is_scalar());
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(Float) -> Float) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(Float, Float) -> Float) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "elementwise",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape, data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: Float) -> Tensor {
        self.map(|v| v * factor)
    }

    /// Copies out channels `[start, start + len)`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.shape.0;
        if len == 0 || start + len > c {
            return Err(Error::arg(
                "slice_channels",
                format!("range {start}..{} of {c} channels", start + len),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let from = (b * c + start) * plane;
            data.extend_from_slice(&self.data[from..from + len * plane]);
        }
        Ok(Tensor { shape: Shape::new(n, len, h, w), data })
    }

    /// Copies out batch item `index` as a batch of one.
    pub fn batch_item(&self, index: usize) -> Tensor {
        let [_, c, h, w] = self.shape.0;
        let len = c * h * w;
        Tensor {
            shape: Shape::new(1, c, h, w),
            data: self.data[index * len..(index + 1) * len].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::arg("stack", "no tensors"))?;
        let [_, c, h, w] = first.shape.0;
        let mut batch = 0;
        let mut data = Vec::new();
        for t in items {
            let [n, tc, th, tw] = t.shape.0;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::shape("stack", format!("{:?} vs {:?}", t.shape, first.shape)));
            }
            batch += n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape: Shape::new(batch, c, h, w), data })
    }

    /// Copies the spatial window with top-left corner `(y, x)` from every plane.
    pub fn crop_spatial(&self, y: usize, x: usize, height: usize, width: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.shape.0;
        if height == 0 || width == 0 || y + height > h || x + width > w {
            return Err(Error::arg(
                "crop",
                format!("{height}x{width} window at ({y}, {x}) of {h}x{w}"),
            ));
        }
        let mut data = Vec::with_capacity(n * c * height * width);
        for plane in self.data.chunks(h * w) {
            for row in y..y + height {
                data.extend_from_slice(&plane[row * w + x..row * w + x + width]);
            }
        }
        Ok(Tensor { shape: Shape::new(n, c, height, width), data })
    }

    /// Mirrors every plane left to right.
    pub fn flip_horizontal(&self) -> Tensor {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.shape.width()) {
            row.reverse();
        }
        Tensor { shape: self.shape, data }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Float {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Float::max)
    }
}
