#![allow(dead_code)]
pub mod criteria;

use crdnet::ops::ConvGeometry;
use crdnet::tape::{ParamStore, Tape, Var};
use crdnet::{Float, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: Shape, lo: Float, hi: Float) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Entries bounded away from zero, so kinks at 0 stay out of reach of a
/// finite-difference step.
pub fn random_off_zero(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: Float = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { v } else { -v }
    })
}

/// `||a - b|| / max(||a||, ||b||, floor)` in the Euclidean norm.
pub fn relative_error(a: &[Float], b: &[Float], floor: Float) -> Float {
    let norm = |v: &[Float]| v.iter().map(|x| x * x).sum::<Float>().sqrt();
    let diff: Vec<Float> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(floor)
}

pub const FD_STEP: Float = 1e-5;
pub const FD_TOLERANCE: Float = 1e-4;
pub const FD_FLOOR: Float = 1e-8;

/// Compares reverse-mode gradients of a scalar function of `inputs` with
/// central differences; returns the worst relative error over inputs.
pub fn check_inputs(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> Float {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars);
    let grads = tape.backward(root, &mut ParamStore::new()).unwrap();
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&mut tape, &vars);
        tape.value(root).item()
    };
    let mut worst: Float = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).map_or_else(|| vec![0.0; inputs[k].shape().numel()], |g| g.data().to_vec());
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut xs = inputs.to_vec();
        for i in 0..inputs[k].shape().numel() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&xs);
            xs[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric, FD_FLOOR));
    }
    worst
}

/// Scalar probe of a tensor-valued node: `sum((x - c)^2)` for a fixed `c`.
pub fn probe(tape: &mut Tape, x: Var, c: &Tensor) -> Var {
    let c = tape.constant(c.clone());
    let d = tape.sub(x, c).unwrap();
    tape.sum_squares(d)
}

/// Direct convolution by explicit loops over every output and kernel tap.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, geo: ConvGeometry) -> Tensor {
    let [n, cin, h, wd] = x.shape().0;
    let [cout, _, k, _] = w.shape().0;
    let span = geo.dilation * (k - 1) + 1;
    let oh = (h + 2 * geo.padding - span) / geo.stride + 1;
    let ow = (wd + 2 * geo.padding - span) / geo.stride + 1;
    Tensor::from_fn(Shape::new(n, cout, oh, ow), |[i, o, y, xo]| {
        let mut acc = b.at([o, 0, 0, 0]);
        for c in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (y * geo.stride + ky * geo.dilation) as isize - geo.padding as isize;
                    let ix = (xo * geo.stride + kx * geo.dilation) as isize - geo.padding as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        acc += w.at([o, c, ky, kx]) * x.at([i, c, iy as usize, ix as usize]);
                    }
                }
            }
        }
        acc
    })
}

pub fn tent(d: Float) -> Float {
    (1.0 - d.abs()).max(0.0)
}

/// Every output pixel as an explicit weighted sum of all input pixels.
pub fn tent_upsample(x: &Tensor, s: usize) -> Tensor {
    let [n, c, h, w] = x.shape().0;
    let src = |i: usize, len: usize| ((i as Float + 0.5) / s as Float - 0.5).clamp(0.0, (len - 1) as Float);
    Tensor::from_fn(Shape::new(n, c, h * s, w * s), |[b, ch, y, xo]| {
        let (sy, sx) = (src(y, h), src(xo, w));
        let mut acc = 0.0;
        for p in 0..h {
            for q in 0..w {
                acc += x.at([b, ch, p, q]) * tent(sy - p as Float) * tent(sx - q as Float);
            }
        }
        acc
    })
}
