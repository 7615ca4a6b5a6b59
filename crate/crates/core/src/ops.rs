//! Forward and backward kernels for the differentiable operations.
//!
//! These are plain functions over [`Tensor`]s; the [`crate::tape`] module
//! records them and wires the backward kernels together.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tensor};

/// Stride, padding and dilation of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn unit() -> Self {
        ConvGeometry { stride: 1, padding: 0, dilation: 1 }
    }

    /// Stride 1 with the padding that keeps the spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvGeometry { stride: 1, padding: dilation * (kernel - 1) / 2, dilation }
    }

    /// `floor((len + 2p - d(k-1) - 1) / s) + 1`, or `None` when that is below 1.
    pub fn output_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        if self.stride == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn conv_dims(input: Shape, weight: Shape, bias: Shape, geo: ConvGeometry) -> Result<ConvDims> {
    let [_, cin, h, w] = input.0;
    let [cout, wcin, kh, kw] = weight.0;
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, weights expect {wcin}"),
        ));
    }
    if bias.numel() != cout {
        return Err(Error::shape("conv2d", format!("bias {bias:?} for {cout} output channels")));
    }
    if geo.stride == 0 || geo.dilation == 0 {
        return Err(Error::arg("conv2d", "stride and dilation must be at least 1"));
    }
    let (oh, ow) = match (geo.output_len(h, kh), geo.output_len(w, kw)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::arg(
                "conv2d",
                format!("output size < 1 for {h}x{w} input, {kh}x{kw} kernel, {geo:?}"),
            ))
        }
    };
    Ok(ConvDims { cin, h, w, cout, kh, kw, oh, ow })
}

/// Unfolds one batch item into a `(cin*kh*kw) x (oh*ow)` matrix.
fn im2col(item: &[Float], d: &ConvDims, geo: ConvGeometry, cols: &mut [Float]) {
    let p = d.cols();
    for ci in 0..d.cin {
        let plane = &item[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let iy = (oy * geo.stride + ky * geo.dilation) as isize - geo.padding as isize;
                    let line = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kx * geo.dilation) as isize
                            - geo.padding as isize;
                        *v = if ix < 0 || ix >= d.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds an unfolded matrix back onto one batch item.
fn col2im(cols: &[Float], d: &ConvDims, geo: ConvGeometry, item: &mut [Float]) {
    let p = d.cols();
    for ci in 0..d.cin {
        let plane = &mut item[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let iy = (oy * geo.stride + ky * geo.dilation) as isize - geo.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let ix = (ox * geo.stride + kx * geo.dilation) as isize
                            - geo.padding as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c (m x n) = alpha * a (m x k) * b (k x n) + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Float],
    (rsa, csa): (usize, usize),
    b: &[Float],
    (rsb, csb): (usize, usize),
    beta: Float,
    c: &mut [Float],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index the kernel touches lies inside the slices given the
    // shapes and strides asserted by the callers below.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cross-correlation of an NCHW input with `(cout, cin, kh, kw)` weights.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, geo: ConvGeometry) -> Result<Tensor> {
    let d = conv_dims(input.shape(), weight.shape(), bias.shape(), geo)?;
    let n = input.shape().batch();
    let (rows, p) = (d.rows(), d.cols());
    let in_len = d.cin * d.h * d.w;
    let mut out = vec![0.0; n * d.cout * p];
    out.par_chunks_mut(d.cout * p).enumerate().for_each(|(b, dst)| {
        let mut cols = vec![0.0; rows * p];
        im2col(&input.data()[b * in_len..(b + 1) * in_len], &d, geo, &mut cols);
        for (oc, chunk) in dst.chunks_mut(p).enumerate() {
            chunk.fill(bias.data()[oc]);
        }
        gemm(d.cout, rows, p, weight.data(), (rows, 1), &cols, (p, 1), 1.0, dst);
    });
    Tensor::from_vec(Shape::new(n, d.cout, d.oh, d.ow), out)
}

/// Gradients of [`conv2d`] with respect to input (if requested), weights and bias.
pub struct Conv2dGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    bias_shape: Shape,
    geo: ConvGeometry,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<Conv2dGrads> {
    let d = conv_dims(input.shape(), weight.shape(), bias_shape, geo)?;
    let n = input.shape().batch();
    let (rows, p) = (d.rows(), d.cols());
    let in_len = d.cin * d.h * d.w;
    let out_len = d.cout * p;
    if grad_out.shape() != Shape::new(n, d.cout, d.oh, d.ow) {
        return Err(Error::shape("conv2d_backward", format!("{:?}", grad_out.shape())));
    }

    let per_item: Vec<(Vec<Float>, Vec<Float>, Vec<Float>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let g = &grad_out.data()[b * out_len..(b + 1) * out_len];
            let mut cols = vec![0.0; rows * p];
            im2col(&input.data()[b * in_len..(b + 1) * in_len], &d, geo, &mut cols);
            let mut dw = vec![0.0; d.cout * rows];
            // dW = dOut (cout x p) * cols^T (p x rows)
            gemm(d.cout, p, rows, g, (p, 1), &cols, (1, p), 0.0, &mut dw);
            let db = g.chunks(p).map(|c| c.iter().sum()).collect();
            let mut dx = Vec::new();
            if need_input {
                // dcols = W^T (rows x cout) * dOut (cout x p)
                gemm(rows, d.cout, p, weight.data(), (1, rows), g, (p, 1), 0.0, &mut cols);
                dx = vec![0.0; in_len];
                col2im(&cols, &d, geo, &mut dx);
            }
            (dx, dw, db)
        })
        .collect();

    let mut dw = vec![0.0; d.cout * rows];
    let mut db = vec![0.0; d.cout];
    let mut dx = if need_input { Vec::with_capacity(n * in_len) } else { Vec::new() };
    for (item_dx, item_dw, item_db) in per_item {
        dw.iter_mut().zip(&item_dw).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&item_db).for_each(|(a, b)| *a += b);
        dx.extend_from_slice(&item_dx);
    }
    Ok(Conv2dGrads {
        input: if need_input { Some(Tensor::from_vec(input.shape(), dx)?) } else { None },
        weight: Tensor::from_vec(weight.shape(), dw)?,
        bias: Tensor::from_vec(bias_shape, db)?,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    input
        .zip_map(grad_out, |x, g| if x > 0.0 { g } else { 0.0 })
        .expect("relu gradient has the input's shape")
}

/// 2x2 non-overlapping max pooling. Returns the pooled tensor and, per output
/// element, the flat input index that won (first occurrence on ties).
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = input.shape().0;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::arg("maxpool2", format!("odd spatial size {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(Shape::new(n, c, oh, ow), out)?, argmax))
}

pub fn maxpool2_backward(input_shape: Shape, argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut grad = Tensor::zeros(input_shape);
    let dst = grad.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        dst[i] += g;
    }
    grad
}

/// Interpolation taps along one axis: `(lower index, upper index, upper weight)`.
fn upsample_taps(len: usize, factor: usize) -> Vec<(usize, usize, Float)> {
    let last = (len - 1) as Float;
    (0..len * factor)
        .map(|i| {
            let src = ((i as Float + 0.5) / factor as Float - 0.5).clamp(0.0, last);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as Float)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor with half-pixel centers and
/// edge clamping.
pub fn bilinear_upsample(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::arg("bilinear_upsample", "factor must be at least 1"));
    }
    let [n, c, h, w] = input.shape().0;
    let (oh, ow) = (h * factor, w * factor);
    let ty = upsample_taps(h, factor);
    let tx = upsample_taps(w, factor);
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, wy) in &ty {
            for &(x0, x1, wx) in &tx {
                let top = (1.0 - wx) * p[y0 * w + x0] + wx * p[y0 * w + x1];
                let bottom = (1.0 - wx) * p[y1 * w + x0] + wx * p[y1 * w + x1];
                out.push((1.0 - wy) * top + wy * bottom);
            }
        }
    }
    Tensor::from_vec(Shape::new(n, c, oh, ow), out)
}

pub fn bilinear_upsample_backward(input_shape: Shape, factor: usize, grad_out: &Tensor) -> Tensor {
    let [n, c, h, w] = input_shape.0;
    let ty = upsample_taps(h, factor);
    let tx = upsample_taps(w, factor);
    let mut grad = Tensor::zeros(input_shape);
    let g = grad_out.data();
    let dst = grad.data_mut();
    let mut k = 0;
    for plane in 0..n * c {
        let p = &mut dst[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, wy) in &ty {
            for &(x0, x1, wx) in &tx {
                let v = g[k];
                k += 1;
                p[y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * v;
                p[y0 * w + x1] += (1.0 - wy) * wx * v;
                p[y1 * w + x0] += wy * (1.0 - wx) * v;
                p[y1 * w + x1] += wy * wx * v;
            }
        }
    }
    grad
}

/// Concatenates along channels, `a` first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    concat_channels_all(&[a, b])
}

/// Concatenates any number of tensors along channels, in order. A single
/// part is returned unchanged.
pub fn concat_channels_all(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::arg("concat_channels", "no inputs"))?;
    let [n, _, h, w] = first.shape().0;
    for p in parts {
        let [pn, _, ph, pw] = p.shape().0;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", p.shape(), first.shape()),
            ));
        }
    }
    let plane = h * w;
    let channels: usize = parts.iter().map(|p| p.shape().channels()).sum();
    let mut out = Vec::with_capacity(n * channels * plane);
    for item in 0..n {
        for p in parts {
            let c = p.shape().channels();
            out.extend_from_slice(&p.data()[item * c * plane..(item + 1) * c * plane]);
        }
    }
    Tensor::from_vec(Shape::new(n, channels, h, w), out)
}

/// Splits a channel gradient back into pieces of the given channel counts.
pub fn split_channels(grad: &Tensor, channels: &[usize]) -> Vec<Tensor> {
    let mut start = 0;
    channels
        .iter()
        .map(|&c| {
            let part = grad.slice_channels(start, c).expect("split matches concat layout");
            start += c;
            part
        })
        .collect()
}

/// Count-error grid of every full `patch x patch` window anchored on the
/// `stride` grid (no padding): entry `(i, j)` is the sum of `diff` over the
/// window whose top-left corner is `(i * stride, j * stride)`, accumulated
/// in row-major order.
pub fn patch_sums(diff: &[Float], height: usize, width: usize, patch: usize, stride: usize) -> Vec<Float> {
    let (ay, ax) = anchor_counts(height, width, patch, stride);
    let mut out = Vec::with_capacity(ay * ax);
    for i in 0..ay {
        for j in 0..ax {
            let (y0, x0) = (i * stride, j * stride);
            let mut s = 0.0;
            for y in y0..y0 + patch {
                for &v in &diff[y * width + x0..y * width + x0 + patch] {
                    s += v;
                }
            }
            out.push(s);
        }
    }
    out
}

/// Number of patch anchors along each axis.
pub fn anchor_counts(height: usize, width: usize, patch: usize, stride: usize) -> (usize, usize) {
    ((height - patch) / stride + 1, (width - patch) / stride + 1)
}
