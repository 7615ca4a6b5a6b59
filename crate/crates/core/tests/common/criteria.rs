//! Criterion-level checks, shared by the core test suites and the CLI
//! acceptance harness. Each returns its worst observed error, or a
//! description of the first hard failure.

use crdnet::cnet::{self, CascadeConfig};
use crdnet::density::{build_target_pyramid, generate_density_map, DensityMap, PointAnnotation};
use crdnet::eval::{evaluate, EvalResult, EvalSample};
use crdnet::losses::{self, compute_losses, LossConfig};
use crdnet::model::{CrdNet, ModelConfig};
use crdnet::ops::{self, ConvGeometry};
use crdnet::pnet::{BackboneConfig, ConvSpec};
use crdnet::synth::{generate_scene, SynthConfig};
use crdnet::tape::{ParamStore, Tape, Var};
use crdnet::{Float, Shape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

pub const GRADIENT_INSTANCES: u64 = 20;

pub type GradientCase = fn(u64) -> Result<Float, String>;

pub const GRADIENT_CASES: &[(&str, GradientCase)] = &[
    ("conv2d", grad_conv2d),
    ("relu", grad_relu),
    ("maxpool2", grad_maxpool2),
    ("upsample", grad_upsample),
    ("concat_channels", grad_concat),
    ("add", grad_add),
    ("sub", grad_sub),
    ("scale", grad_scale),
    ("sum", grad_sum),
    ("sum_squares", grad_sum_squares),
    ("patch_abs_sum", grad_patch_abs_sum),
    ("euclidean_loss", grad_euclidean_loss),
    ("local_count_loss", grad_local_count_loss),
    ("total_loss", grad_total_loss),
    ("residual_step inputs", grad_residual_step_inputs),
    ("residual_step params", grad_residual_step_params),
    ("network total loss", grad_full_network),
];

/// Worst relative error of `case` over `instances` seeds.
pub fn worst_gradient_error(case: GradientCase, instances: u64) -> Result<Float, String> {
    let mut worst: Float = 0.0;
    for seed in 0..instances {
        let err = case(seed).map_err(|e| format!("instance {seed}: {e}"))?;
        if !err.is_finite() {
            return Err(format!("instance {seed}: non-finite error"));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn grad_conv2d(seed: u64) -> Result<Float, String> {
    let mut r = rng(seed);
    let (n, cin, cout) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
    let kernel = [1, 3][r.random_range(0..2)];
    let geo = ConvGeometry {
        stride: r.random_range(1..=2),
        padding: r.random_range(0..=kernel / 2 + 1),
        dilation: r.random_range(1..=2),
    };
    let (h, w) = (r.random_range(5..=8), r.random_range(5..=8));
    let x = random(&mut r, Shape::new(n, cin, h, w), -1.0, 1.0);
    let wt = random(&mut r, Shape::new(cout, cin, kernel, kernel), -1.0, 1.0);
    let b = random(&mut r, Shape::new(cout, 1, 1, 1), -1.0, 1.0);
    let out = ops::conv2d(&x, &wt, &b, geo).map_err(|e| e.to_string())?;
    let c = random(&mut r, out.shape(), -1.0, 1.0);
    Ok(check_inputs(&[x, wt, b], &|t, v| {
        let y = t.conv2d(v[0], v[1], v[2], geo).unwrap();
        probe(t, y, &c)
    }))
}

fn small_shape(r: &mut ChaCha8Rng, channels: usize, side: usize) -> Shape {
    Shape::new(r.random_range(1..=2), r.random_range(1..=channels), r.random_range(1..=side), r.random_range(1..=side))
}

pub fn grad_relu(seed: u64) -> Result<Float, String> {
    let mut r = rng(seed);
    let shape = small_shape(&mut r, 3, 5);
    let x = random_off_zero(&mut r, shape);
    let c = random(&mut r, shape, -1.0, 1.0);
    Ok(check_inputs(&[x], &|t, v| {
        let y = t.relu(v[0]);
        probe(t, y, &c)
    }))
}

pub fn grad_maxpool2(seed: u64) -> Result<Float, String> {
    let mut r = rng(seed);
    let shape = Shape::new(r.random_range(1..=2), r.random_range(1..=2), 2 * r.random_range(1..=3), 2 * r.random_range(1..=3));
    // Distinct values at least 0.01 apart, so no step flips a window's maximum.
    let mut values: Vec<Float> = (0..shape.numel()).map(|i| i as Float * 0.01 - 0.3).collect();
    values.shuffle(&mut r);
    let x = Tensor::from_vec(shape, values).map_err(|e| e.to_string())?;
    let c = random(&mut r, Shape::new(shape.batch(), shape.channels(), shape.height() / 2, shape.width() / 2), -1.0, 1.0);
    Ok(check_inputs(&[x], &|t, v| {
        let y = t.maxpool2(v[0]).unwrap();
        probe(t, y, &c)
    }))
}

pub fn grad_upsample(seed: u64) -> Result<Float, String> {
    let mut r = rng(seed);
    let factor = r.random_range(1..=4);
    let shape = small_shape(&mut r, 2, 4);
    let x = random(&mut r, shape, -1.0, 1.0);
    let c = random(&mut r, Shape::new(shape.batch(), shape.channels(), shape.height() * factor, shape.width() * factor), -1.0, 1.0);
    Ok(check_inputs(&[x], &|t, v| {
        let y = t.upsample(v[0], factor).unwrap();
        probe(t, y, &c)
    }))
}

pub fn grad_concat(seed: u64) -> Result<Float, String> {
    let mut r = rng(seed);
    let (n, h, w) = (r.random_range(1..=2), r.random_range(1..=4), r.random_range(1..=4));
    let parts: Vec<Tensor> = (0..r.random_range(1..=3))
        .map(|_| {
            let c = r.random_range(1..=3);
            random(&mut r, Shape::new(n, c, h, w), -1.0, 1.0)
        })
        .collect();
    let total: usize = parts.iter().map(|p| p.shape().channels()).sum();
    let c = random(&mut r, Shape::new(n, total, h, w), -1.0, 1.0);
    Ok(check_inputs(&parts, &|t, v| {
        let y = t.concat_channels(v).unwrap();
        probe(t, y, &c)
    }))
}

/// Two operands and a probe target of one random shape.
fn operands(seed: u64) -> ([Tensor; 2], Tensor, Float) {
    let mut r = rng(seed);
    let shape = small_shape(&mut r, 2, 4);
    let a = random(&mut r, shape, -1.0, 1.0);
    let b = random(&mut r, shape, -1.0, 1.0);
    let c = random(&mut r, shape, -1.0, 1.0);
    ([a, b], c, r.random_range(-2.0..2.0))
}

pub fn grad_add(seed: u64) -> Result<Float, String> {
    let (ins, c, _) = operands(seed);
    Ok(check_inputs(&ins, &|t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        probe(t, y, &c)
    }))
}

pub fn grad_sub(seed: u64) -> Result<Float, String> {
    let (ins, c, _) = operands(seed);
    Ok(check_inputs(&ins, &|t, v| {
        let y = t.sub(v[0], v[1]).unwrap();
        probe(t, y, &c)
    }))
}

pub fn grad_scale(seed: u64) -> Result<Float, String> {
    let (ins, c, k) = operands(seed);
    Ok(check_inputs(&ins[..1], &|t, v| {
        let y = t.scale(v[0], k);
        probe(t, y, &c)
    }))
}

pub fn grad_sum(seed: u64) -> Result<Float, String> {
    let (ins, _, _) = operands(seed);
    Ok(check_inputs(&ins[..1], &|t, v| {
        let s = t.sum(v[0]);
        let s2 = t.sum_squares(s);
        t.scale(s2, 0.5)
    }))
}

pub fn grad_sum_squares(seed: u64) -> Result<Float, String> {
    let (ins, _, _) = operands(seed);
    Ok(check_inputs(&ins[..1], &|t, v| t.sum_squares(v[0])))
}

/// Single-channel maps whose difference has every patch sum bounded away from zero.
pub fn maps_off_kink(r: &mut ChaCha8Rng, shape: Shape, patch: usize, stride: usize) -> (Tensor, Tensor) {
    let [_, _, h, w] = shape.0;
    loop {
        let d = random(r, shape, -1.0, 1.0);
        let q = random(r, shape, -1.0, 1.0);
        let diff = d.sub(&q).unwrap();
        let ok = diff
            .data()
            .chunks(h * w)
            .all(|p| ops::patch_sums(p, h, w, patch, stride).iter().all(|c| c.abs() > 1e-3));
        if ok {
            return (d, q);
        }
    }
}

pub fn grad_patch_abs_sum(seed: u64) -> Result<Float, String> {
    let mut r = rng(seed);
    let (h, w) = (r.random_range(2..=7), r.random_range(2..=7));
    let patch = r.random_range(1..=h.min(w));
    let stride = r.random_range(1..=3);
    let batch = r.random_range(1..=2);
    let (x, _) = maps_off_kink(&mut r, Shape::new(batch, 1, h, w), patch, stride);
    Ok(check_inputs(&[x], &|t, v| t.patch_abs_sum(v[0], patch, stride).unwrap()))
}

fn loss_operands(seed: u64) -> ([Tensor; 2], LossConfig) {
    let mut r = rng(seed);
    let (h, w) = (r.random_range(4..=8), r.random_range(4..=8));
    let cfg = LossConfig {
        lambda: [1e-4, 0.3][seed as usize % 2],
        patch_size: r.random_range(1..=4),
        patch_stride: r.random_range(1..=2),
    };
    let shape = Shape::new(r.random_range(1..=3), 1, h, w);
    let (d, q) = maps_off_kink(&mut r, shape, cfg.patch_size, cfg.patch_stride);
    ([d, q], cfg)
}

pub fn grad_euclidean_loss(seed: u64) -> Result<Float, String> {
    let (ins, _) = loss_operands(seed);
    Ok(check_inputs(&ins, &|t, v| losses::euclidean_loss(t, v[0], v[1]).unwrap()))
}

pub fn grad_local_count_loss(seed: u64) -> Result<Float, String> {
    let (ins, cfg) = loss_operands(seed);
    Ok(check_inputs(&ins, &|t, v| losses::local_count_loss(t, v[0], v[1], cfg.patch_size, cfg.patch_stride).unwrap()))
}

pub fn grad_total_loss(seed: u64) -> Result<Float, String> {
    let (ins, cfg) = loss_operands(seed);
    Ok(check_inputs(&ins, &|t, v| losses::total_loss(t, v[0], v[1], &cfg).unwrap().total))
}

struct StepCase {
    store: ParamStore,
    module: cnet::ResidualDensityModule,
    prev: Tensor,
    feats: Tensor,
    target: Tensor,
}

fn step_case(seed: u64) -> StepCase {
    let mut r = rng(seed);
    let channels = r.random_range(1..=3);
    let mut cascade = CascadeConfig::default();
    if seed % 2 == 1 {
        cascade.pre_convs = vec![ConvSpec::new(2, 3, 1)];
    }
    let mut store = ParamStore::new();
    let module = cnet::build_modules(&cascade, &[channels], 2, &mut store, seed).unwrap().remove(0);
    let (h, w) = (r.random_range(1..=3), r.random_range(1..=3));
    let prev = random(&mut r, Shape::new(1, 1, h, w), -1.0, 1.0);
    let feats = random(&mut r, Shape::new(1, channels, 2 * h, 2 * w), 0.0, 1.0);
    let target = random(&mut r, Shape::new(1, 1, 2 * h, 2 * w), -1.0, 1.0);
    StepCase { store, module, prev, feats, target }
}

impl StepCase {
    fn step(&self, t: &mut Tape, s: &ParamStore, v: &[Var]) -> Var {
        let (_, d, _) = cnet::residual_step(t, s, v[0], v[1], &self.module, 2).unwrap();
        probe(t, d, &self.target)
    }
}

pub fn grad_residual_step_inputs(seed: u64) -> Result<Float, String> {
    let case = step_case(seed);
    let mut frozen = case.store.clone();
    frozen.set_frozen(|_, _| true);
    Ok(check_inputs(&[case.prev.clone(), case.feats.clone()], &|t, v| case.step(t, &frozen, v)))
}

pub fn grad_residual_step_params(seed: u64) -> Result<Float, String> {
    let case = step_case(seed);
    let mut store = case.store.clone();
    Ok(check_params(&mut store, &|s| {
        let mut t = Tape::new();
        let v = [t.constant(case.prev.clone()), t.constant(case.feats.clone())];
        let root = case.step(&mut t, s, &v);
        (t.value(root).item(), Some((t, root)))
    }))
}

/// Gradient check over every parameter of `store`. `f` returns the scalar
/// and, when asked for gradients, the tape to back-propagate.
pub fn check_params(store: &mut ParamStore, f: &dyn Fn(&ParamStore) -> (Float, Option<(Tape, Var)>)) -> Float {
    store.zero_grad();
    let (_, taped) = f(store);
    let (mut tape, root) = taped.expect("tape");
    tape.backward(root, store).unwrap();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut worst: Float = 0.0;
    for id in ids {
        let analytic = store.get(id).grad.data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let up = f(store).0;
            store.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let down = f(store).0;
            store.get_mut(id).value.data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric, FD_FLOOR));
    }
    worst
}

/// Every parameter of a small three-level network against the total loss.
/// Fails if some parameter receives no gradient at all.
pub fn grad_full_network(seed: u64) -> Result<Float, String> {
    let mut r = rng(1000 + seed);
    let backbone = BackboneConfig::with_widths(&[3, 4, 4], 1, [1, 2][seed as usize % 2]);
    let mut model = CrdNet::new(ModelConfig { backbone, ..Default::default() }, seed).map_err(|e| e.to_string())?;
    let image = random(&mut r, Shape::new(1, 1, 16, 16), 0.0, 1.0);
    let target = random(&mut r, Shape::new(1, 1, 16, 16), 0.0, 0.05);
    let cfg = LossConfig { lambda: [1e-4, 0.5][seed as usize % 2], patch_size: 8, patch_stride: 4 };
    let shell = model.clone();
    let err = check_params(&mut model.store, &|s| {
        let mut t = Tape::new();
        let x = t.constant(image.clone());
        let pyramid = shell.encoder.extract_pyramid(&mut t, s, x).unwrap();
        let cascade = cnet::estimate_density(&mut t, s, &pyramid, &shell.modules, shell.scale()).unwrap();
        let q = t.constant(target.clone());
        let root = losses::total_loss(&mut t, cascade.final_density(), q, &cfg).unwrap().total;
        (t.value(root).item(), Some((t, root)))
    });
    for (_, p) in model.store.iter() {
        if p.grad.data().iter().all(|&g| g == 0.0) {
            return Err(format!("no gradient reaches {}", p.name));
        }
    }
    Ok(err)
}

pub fn random_map(r: &mut ChaCha8Rng, h: usize, w: usize) -> DensityMap {
    DensityMap::from_vec(h, w, (0..h * w).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn brute_euclidean(d: &[DensityMap], q: &[DensityMap]) -> Float {
    let mut total = 0.0;
    for (dj, qj) in d.iter().zip(q) {
        for y in 0..dj.height() {
            for x in 0..dj.width() {
                let e = dj.at(y, x) - qj.at(y, x);
                total += e * e;
            }
        }
    }
    (1.0 / d.len() as Float) * total
}

pub fn brute_local_count(d: &[DensityMap], q: &[DensityMap], h: usize, t: usize) -> Float {
    let mut total = 0.0;
    for (dj, qj) in d.iter().zip(q) {
        let mut image = 0.0;
        let mut y0 = 0;
        while y0 + h <= dj.height() {
            let mut x0 = 0;
            while x0 + h <= dj.width() {
                let mut c = 0.0;
                for y in y0..y0 + h {
                    for x in x0..x0 + h {
                        c += dj.at(y, x) - qj.at(y, x);
                    }
                }
                image += Float::abs(c);
                x0 += t;
            }
            y0 += t;
        }
        total += image;
    }
    (1.0 / d.len() as Float) * total
}

/// Both loss terms against the brute-force loops on every map size up to
/// 8x8, patch sizes {1, 2, 4}, strides {1, 2} and 1..=3 maps. The values
/// must agree bit for bit. Returns the number of cases compared.
pub fn loss_oracle_cases() -> Result<usize, String> {
    let mut r = rng(77);
    let mut cases = 0;
    for hgt in 1..=8 {
        for wid in 1..=8 {
            for patch in [1, 2, 4] {
                if patch > hgt.min(wid) {
                    continue;
                }
                for stride in [1, 2] {
                    for m in 1..=3 {
                        let d: Vec<DensityMap> = (0..m).map(|_| random_map(&mut r, hgt, wid)).collect();
                        let q: Vec<DensityMap> = (0..m).map(|_| random_map(&mut r, hgt, wid)).collect();
                        let cfg = LossConfig { lambda: 1e-4, patch_size: patch, patch_stride: stride };
                        let rep = compute_losses(&d, &q, &cfg).map_err(|e| e.to_string())?;
                        let (le, ly) = (brute_euclidean(&d, &q), brute_local_count(&d, &q, patch, stride));
                        if rep.euclidean != le || rep.local_count != ly || rep.total != le + 1e-4 * ly {
                            return Err(format!(
                                "{hgt}x{wid} h={patch} t={stride} M={m}: ({}, {}) vs ({le}, {ly})",
                                rep.euclidean, rep.local_count
                            ));
                        }
                        cases += 1;
                    }
                }
            }
        }
    }
    Ok(cases)
}

pub fn random_model(r: &mut ChaCha8Rng, seed: u64) -> CrdNet {
    let levels = r.random_range(1..=4);
    let widths: Vec<usize> = (0..levels).map(|_| r.random_range(1..=4)).collect();
    let mut backbone = BackboneConfig::with_widths(&widths, r.random_range(1..=2), r.random_range(1..=2));
    if levels <= 2 && r.random_bool(0.5) {
        backbone.scale = 4;
    }
    let mut cascade = CascadeConfig::default();
    if r.random_bool(0.3) {
        cascade.pre_convs = vec![ConvSpec::new(2, 3, 1)];
    }
    let mut model = CrdNet::new(ModelConfig { backbone, cascade }, seed).unwrap();
    for (_, p) in model.store.iter_mut() {
        if p.name.ends_with("bias") {
            p.value = Tensor::from_fn(p.value.shape(), |_| r.random_range(-0.2..0.2));
        }
    }
    model
}

/// Random networks and images. Every stored level map must equal the
/// upsampled coarser map plus its residual exactly, the initial map must be
/// zero, and rebuilding the final map from the residuals must agree. Returns
/// the worst rebuild error.
pub fn telescoping_error(instances: u64) -> Result<Float, String> {
    let mut worst: Float = 0.0;
    for seed in 0..instances {
        let mut r = rng(seed);
        let model = random_model(&mut r, seed);
        let m = model.input_multiple();
        let (h, w) = (m * r.random_range(1..=3), m * r.random_range(1..=3));
        let batch = r.random_range(1..=2);
        let image = random(&mut r, Shape::new(batch, 1, h, w), 0.0, 1.0);
        let state = model.infer(&image).map_err(|e| format!("instance {seed}: {e}"))?;
        let s = model.scale();
        let fin = state.final_density();
        if (fin.shape().height(), fin.shape().width()) != (h, w) {
            return Err(format!("instance {seed}: final map {:?} for a {h}x{w} input", fin.shape()));
        }
        if state.initial().data().iter().any(|&v| v != 0.0) {
            return Err(format!("instance {seed}: initial map is not zero"));
        }
        for j in 0..state.residuals.len() {
            if state.densities[j + 1] != state.upsampled[j].add(&state.residuals[j]).unwrap() {
                return Err(format!("instance {seed}, level {j}: map differs from upsampled + residual"));
            }
        }
        let rebuilt = cnet::reconstruct(state.initial(), &state.decompose(), s).map_err(|e| e.to_string())?;
        let telescoped = cnet::telescoped_sum(&state.decompose(), s).map_err(|e| e.to_string())?;
        worst = worst.max(rebuilt.max_abs_diff(fin)).max(telescoped.max_abs_diff(fin));
    }
    Ok(worst)
}

/// All-zero parameters give an all-zero map and residuals.
pub fn zero_parameters_give_zero_map() -> Result<(), String> {
    let mut model = CrdNet::new(ModelConfig::default(), 3).unwrap();
    for (_, p) in model.store.iter_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    let image = random(&mut rng(3), Shape::new(1, 1, 64, 64), 0.0, 1.0);
    let state = model.infer(&image).map_err(|e| e.to_string())?;
    if state.final_density().data().iter().any(|&v| v != 0.0) {
        return Err("final map is not zero".into());
    }
    if state.decompose().iter().any(|r| r.data().iter().any(|&v| v != 0.0)) {
        return Err("a residual is not zero".into());
    }
    Ok(())
}

/// The default network keeps the input size at the finest level.
pub fn output_sizes() -> Result<(), String> {
    let model = CrdNet::new(ModelConfig::default(), 4).unwrap();
    for n in [32, 64, 128] {
        let image = random(&mut rng(n as u64), Shape::new(1, 1, n, n), 0.0, 1.0);
        let state = model.infer(&image).map_err(|e| e.to_string())?;
        if state.final_density().shape() != Shape::new(1, 1, n, n) {
            return Err(format!("{n}x{n} input gave {:?}", state.final_density().shape()));
        }
        let sizes: Vec<usize> = state.residuals.iter().map(|r| r.shape().height()).collect();
        if sizes != [n / 8, n / 4, n / 2, n] {
            return Err(format!("{n}x{n} input gave level sizes {sizes:?}"));
        }
    }
    Ok(())
}

/// Random annotations rendered at random sizes and widths. Returns the worst
/// `|sum - count|`; fails on a negative density value.
pub fn annotation_count_error(instances: usize) -> Result<Float, String> {
    let mut r = rng(2024);
    let mut worst: Float = 0.0;
    for i in 0..instances {
        let (w, h) = (r.random_range(4..=96), r.random_range(4..=96));
        let n = r.random_range(0..=60);
        let points = (0..n).map(|_| [r.random_range(0.0..w as Float), r.random_range(0.0..h as Float)]).collect();
        let ann = PointAnnotation::new(w, h, points).map_err(|e| e.to_string())?;
        let sigma = if r.random_bool(0.5) { 4.0 } else { r.random_range(0.2..12.0) };
        let map = generate_density_map(&ann, sigma).map_err(|e| e.to_string())?;
        if map.values().iter().any(|&v| v < 0.0) {
            return Err(format!("annotation {i}: negative density"));
        }
        worst = worst.max((map.sum() - n as Float).abs());
    }
    Ok(worst)
}

/// Synthetic scenes at sigma 4 with a four-level target pyramid. Returns the
/// worst `|sum - count|` at full resolution and the worst drift of a coarser
/// level's sum from the full-resolution sum.
pub fn pyramid_count_error(scenes: u64) -> Result<(Float, Float), String> {
    let cfg = SynthConfig::default();
    let (mut count_err, mut level_err): (Float, Float) = (0.0, 0.0);
    for seed in 0..scenes {
        let scene = generate_scene(&cfg, seed).map_err(|e| e.to_string())?;
        let gt = generate_density_map(&scene.annotation, 4.0).map_err(|e| e.to_string())?;
        count_err = count_err.max((gt.sum() - scene.annotation.count() as Float).abs());
        let pyramid = build_target_pyramid(&gt, 4, 2).map_err(|e| e.to_string())?;
        if pyramid.levels.len() != 4 {
            return Err(format!("scene {seed}: {} levels", pyramid.levels.len()));
        }
        for (k, level) in pyramid.levels.iter().enumerate() {
            if level.dims() != (gt.height() >> k, gt.width() >> k) {
                return Err(format!("scene {seed}, level {k}: {:?}", level.dims()));
            }
            level_err = level_err.max((level.sum() - gt.sum()).abs());
        }
    }
    Ok((count_err, level_err))
}

/// A one-level network whose density map is the input image itself.
pub fn pass_through_model() -> CrdNet {
    let backbone = BackboneConfig::with_widths(&[1], 1, 1);
    let mut model = CrdNet::new(ModelConfig { backbone, ..Default::default() }, 0).unwrap();
    let head = model.modules[0].head.weight;
    for (id, p) in model.store.iter_mut() {
        let shape = p.value.shape();
        p.value = Tensor::zeros(shape);
        if id == head {
            // Channel 0 is the upsampled coarser map, channel 1 the features.
            p.value.set([0, 1, 0, 0], 1.0);
        } else if p.name.ends_with("weight") {
            p.value.set([0, 0, 1, 1], 1.0);
        }
    }
    model
}

/// Ground truths {10, 12} against estimated counts {11, 15}, with the
/// estimates produced by a real `evaluate` pass.
pub fn metric_fixture() -> Result<EvalResult, String> {
    let model = pass_through_model();
    let images = [Tensor::full(Shape::new(1, 1, 8, 8), 11.0 / 64.0), Tensor::full(Shape::new(1, 1, 8, 8), 15.0 / 64.0)];
    let samples = [EvalSample { image: &images[0], count: 10.0 }, EvalSample { image: &images[1], count: 12.0 }];
    evaluate(&model, &samples, false).map_err(|e| e.to_string())
}
