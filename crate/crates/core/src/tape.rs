//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the nodes in exact reverse order and accumulates gradients into the
//! [`ParamStore`]. A tape can be differentiated once.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry};
use crate::tensor::{Float, Shape, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A learnable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Frozen parameters enter the tape as constants and receive no gradient.
    pub frozen: bool,
}

/// Ordered, named collection of parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad, frozen: false });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Freezes exactly the parameters for which `frozen` returns true.
    pub fn set_frozen(&mut self, mut frozen: impl FnMut(ParamId, &str) -> bool) {
        for (i, p) in self.params.iter_mut().enumerate() {
            p.frozen = frozen(ParamId(i), &p.name);
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.set_frozen(|_, _| false);
    }

    /// Total number of scalar values across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.shape().numel()).sum()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    Conv2d { input: Var, weight: Var, bias: Var, geo: ConvGeometry },
    Relu(Var),
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Upsample { input: Var, factor: usize },
    Concat(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, Float),
    Sum(Var),
    SumSquares(Var),
    PatchAbsSum { input: Var, patch: usize, stride: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a backward pass with respect to every tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if nothing downstream of the loss
    /// depends on it through a differentiable path.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> Shape {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A non-parameter value whose gradient is reported in [`Gradients`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records the current value of a parameter; frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        if p.frozen {
            self.constant(p.value.clone())
        } else {
            self.push(p.value.clone(), Op::Param(id), true)
        }
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geo: ConvGeometry) -> Result<Var> {
        let value = ops::conv2d(self.value(input), self.value(weight), self.value(bias), geo)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geo }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = ops::relu(self.value(input));
        let rg = self.rg(input);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (value, argmax) = ops::maxpool2(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        let value = ops::bilinear_upsample(self.value(input), factor)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Upsample { input, factor }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = ops::concat_channels_all(&values)?;
        let rg = parts.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: Float) -> Var {
        let value = self.value(input).scale(factor);
        let rg = self.rg(input);
        self.push(value, Op::Scale(input, factor), rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.rg(input);
        self.push(value, Op::Sum(input), rg)
    }

    pub fn sum_squares(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).data().iter().map(|v| v * v).sum());
        let rg = self.rg(input);
        self.push(value, Op::SumSquares(input), rg)
    }

    /// Sum over every plane and every `patch x patch` window on the `stride`
    /// grid of the absolute window sum. The subgradient of `|.|` at 0 is 0.
    pub fn patch_abs_sum(&mut self, input: Var, patch: usize, stride: usize) -> Result<Var> {
        let t = self.value(input);
        let [_, _, h, w] = t.shape().0;
        if patch == 0 || stride == 0 || patch > h || patch > w {
            return Err(Error::arg(
                "patch_abs_sum",
                format!("patch {patch}, stride {stride} on {h}x{w} maps"),
            ));
        }
        let total = t
            .data()
            .chunks(h * w)
            .map(|plane| ops::patch_sums(plane, h, w, patch, stride).iter().map(|c| c.abs()).sum::<Float>())
            .sum();
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(total), Op::PatchAbsSum { input, patch, stride }, rg))
    }

    /// Back-propagates from a scalar root, adding parameter gradients into
    /// `store`. Gradients accumulate until [`ParamStore::zero_grad`].
    pub fn backward(&mut self, root: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let root_shape = self.shape(root);
        if !root_shape.is_scalar() {
            return Err(Error::NonScalarRoot(root_shape.0));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(root_shape, 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (var, contrib) in self.input_grads(node, &g)? {
                accumulate(&mut grads[var.0], contrib);
            }
            if let Op::Param(id) = node.op {
                let p = store.get_mut(id);
                p.grad.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            &Op::Conv2d { input, weight, bias, geo } => {
                let grads = ops::conv2d_backward(
                    self.value(input),
                    self.value(weight),
                    self.shape(bias),
                    geo,
                    g,
                    self.rg(input),
                )?;
                if let Some(gi) = grads.input {
                    out.push((input, gi));
                }
                if self.rg(weight) {
                    out.push((weight, grads.weight));
                }
                if self.rg(bias) {
                    out.push((bias, grads.bias));
                }
            }
            &Op::Relu(input) => out.push((input, ops::relu_backward(self.value(input), g))),
            Op::MaxPool2 { input, argmax } => {
                out.push((*input, ops::maxpool2_backward(self.shape(*input), argmax, g)));
            }
            &Op::Upsample { input, factor } => {
                out.push((input, ops::bilinear_upsample_backward(self.shape(input), factor, g)));
            }
            Op::Concat(parts) => {
                let channels: Vec<usize> = parts.iter().map(|&v| self.shape(v).channels()).collect();
                for (&v, piece) in parts.iter().zip(ops::split_channels(g, &channels)) {
                    if self.rg(v) {
                        out.push((v, piece));
                    }
                }
            }
            &Op::Add(a, b) => {
                if self.rg(a) {
                    out.push((a, g.clone()));
                }
                if self.rg(b) {
                    out.push((b, g.clone()));
                }
            }
            &Op::Sub(a, b) => {
                if self.rg(a) {
                    out.push((a, g.clone()));
                }
                if self.rg(b) {
                    out.push((b, g.scale(-1.0)));
                }
            }
            &Op::Scale(input, factor) => out.push((input, g.scale(factor))),
            &Op::Sum(input) => out.push((input, Tensor::full(self.shape(input), g.item()))),
            &Op::SumSquares(input) => {
                let gs = 2.0 * g.item();
                out.push((input, self.value(input).scale(gs)));
            }
            &Op::PatchAbsSum { input, patch, stride } => {
                let t = self.value(input);
                let [_, _, h, w] = t.shape().0;
                let (ay, ax) = ops::anchor_counts(h, w, patch, stride);
                let mut grad = Tensor::zeros(t.shape());
                let gs = g.item();
                for (src, dst) in t.data().chunks(h * w).zip(grad.data_mut().chunks_mut(h * w)) {
                    let sums = ops::patch_sums(src, h, w, patch, stride);
                    for i in 0..ay {
                        for j in 0..ax {
                            let s = sums[i * ax + j];
                            let sign = if s > 0.0 {
                                1.0
                            } else if s < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            if sign == 0.0 {
                                continue;
                            }
                            for y in i * stride..i * stride + patch {
                                for v in &mut dst[y * w + j * stride..y * w + j * stride + patch] {
                                    *v += sign * gs;
                                }
                            }
                        }
                    }
                }
                out.push((input, grad));
            }
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) {
    match slot {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(contrib.data())
            .for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib),
    }
}
