mod common;

use common::criteria::{output_sizes, random_model, telescoping_error, zero_parameters_give_zero_map};
use common::*;
use crdnet::cnet::{self, CascadeConfig};
use crdnet::model::{CrdNet, ModelConfig};
use crdnet::ops::{self, ConvGeometry};
use crdnet::pnet::BackboneConfig;
use crdnet::tape::{ParamStore, Tape};
use crdnet::{Shape, Tensor};
use rand::Rng;

#[test]
fn telescoping_over_random_passes() {
    let worst = telescoping_error(100).unwrap();
    assert!(worst <= 1e-9, "rebuild error {worst}");
}

#[test]
fn zero_parameters_give_zero_output() {
    zero_parameters_give_zero_map().unwrap();
}

#[test]
fn final_map_has_input_size() {
    output_sizes().unwrap();
}

#[test]
fn residual_step_matches_direct_recomputation() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let channels = r.random_range(1..=5);
        let scale = [2, 3, 4][r.random_range(0..3)];
        let mut store = ParamStore::new();
        let module = cnet::build_modules(&CascadeConfig::default(), &[channels], scale, &mut store, seed).unwrap().remove(0);
        for (_, p) in store.iter_mut() {
            p.value = Tensor::from_fn(p.value.shape(), |_| r.random_range(-1.0..1.0));
        }
        let (h, w) = (r.random_range(1..=4), r.random_range(1..=4));
        let prev = random(&mut r, Shape::new(1, 1, h, w), -1.0, 1.0);
        let feats = random(&mut r, Shape::new(1, channels, h * scale, w * scale), -1.0, 1.0);

        let mut tape = Tape::new();
        let (pv, fv) = (tape.constant(prev.clone()), tape.constant(feats.clone()));
        let (rv, dv, _) = cnet::residual_step(&mut tape, &store, pv, fv, &module, scale).unwrap();

        let up = tent_upsample(&prev, scale);
        let input = ops::concat_channels(&up, &feats).unwrap();
        let weight = &store.get(module.head.weight).value;
        let bias = &store.get(module.head.bias).value;
        let residual = naive_conv(&input, weight, bias, ConvGeometry::unit());
        assert!(tape.value(rv).max_abs_diff(&residual) < 1e-10);
        assert!(tape.value(dv).max_abs_diff(&up.add(&residual).unwrap()) < 1e-10);
    }
}

#[test]
fn zero_module_passes_coarse_map_through() {
    let mut store = ParamStore::new();
    let module = cnet::build_modules(&CascadeConfig::default(), &[3], 2, &mut store, 0).unwrap().remove(0);
    let mut r = rng(1);
    let prev = random(&mut r, Shape::new(1, 1, 3, 4), 0.0, 1.0);
    let feats = random(&mut r, Shape::new(1, 3, 6, 8), 0.0, 1.0);
    for (_, p) in store.iter_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    let mut tape = Tape::new();
    let (pv, fv) = (tape.constant(prev.clone()), tape.constant(feats.clone()));
    let (rv, dv, _) = cnet::residual_step(&mut tape, &store, pv, fv, &module, 2).unwrap();
    assert!(tape.value(rv).data().iter().all(|&v| v == 0.0));
    assert_eq!(tape.value(dv), &ops::bilinear_upsample(&prev, 2).unwrap());

    let b = 0.37;
    store.get_mut(module.head.bias).value = Tensor::full(Shape::new(1, 1, 1, 1), b);
    let mut tape = Tape::new();
    let (pv, fv) = (tape.constant(Tensor::zeros(prev.shape())), tape.constant(feats));
    let (_, dv, _) = cnet::residual_step(&mut tape, &store, pv, fv, &module, 2).unwrap();
    assert!(tape.value(dv).data().iter().all(|&v| v == b));
}

#[test]
fn single_level_is_one_step_from_zero() {
    let backbone = BackboneConfig::with_widths(&[3], 1, 1);
    let model = CrdNet::new(ModelConfig { backbone, ..Default::default() }, 5).unwrap();
    let image = random(&mut rng(5), Shape::new(1, 1, 8, 6), 0.0, 1.0);
    let mut tape = Tape::new();
    let x = tape.constant(image);
    let fwd = model.forward(&mut tape, x).unwrap();
    let feats = tape.value(fwd.pyramid.levels[0]).clone();
    let zero = Tensor::zeros(Shape::new(1, 1, 8, 6));
    let input = ops::concat_channels(&zero, &feats).unwrap();
    let head = &model.modules[0].head;
    let expected = naive_conv(&input, &model.store.get(head.weight).value, &model.store.get(head.bias).value, ConvGeometry::unit());
    assert!(tape.value(fwd.density()).max_abs_diff(&expected) < 1e-10);
}

#[test]
fn residual_perturbation_spreads_through_upsampling_chain() {
    for seed in 0..20 {
        let mut r = rng(500 + seed);
        let model = random_model(&mut r, seed);
        let m = model.input_multiple();
        let image = random(&mut r, Shape::new(1, 1, 2 * m, 2 * m), 0.0, 1.0);
        let state = model.infer(&image).unwrap();
        let s = model.scale();
        let base = cnet::reconstruct(state.initial(), &state.decompose(), s).unwrap();

        let mut residuals = state.decompose();
        let j = r.random_range(0..residuals.len());
        let delta = r.random_range(-1.0..1.0);
        let shape = residuals[j].shape();
        let (py, px) = (r.random_range(0..shape.height()), r.random_range(0..shape.width()));
        let old = residuals[j].at([0, 0, py, px]);
        residuals[j].set([0, 0, py, px], old + delta);
        let moved = cnet::reconstruct(state.initial(), &residuals, s).unwrap();

        let mut impulse = Tensor::zeros(shape);
        impulse.set([0, 0, py, px], delta);
        for _ in j + 1..residuals.len() {
            impulse = tent_upsample(&impulse, s);
        }
        assert!(moved.sub(&base).unwrap().max_abs_diff(&impulse) < 1e-12, "instance {seed}");
    }
}
