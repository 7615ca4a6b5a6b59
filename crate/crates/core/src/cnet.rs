//! Cascaded residual density decoder.
//!
//! Levels are processed coarsest to finest. Starting from an all-zero map,
//! each step upsamples the current estimate bilinearly, concatenates it with
//! that level's features, and a 1x1 convolution predicts a residual that is
//! added to the upsampled map:
//!
//! ```text
//! R = C(concat(up(D_prev), F))
//! D = up(D_prev) + R
//! ```
//!
//! The finest step produces a map at input resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::pnet::{add_conv, ConvLayer, ConvSpec, FeaturePyramid};
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::{Float, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    /// Optional 3x3 (or other odd) convolutions with ReLU applied to the
    /// concatenated input before the 1x1 head. Empty by default.
    pub pre_convs: Vec<ConvSpec>,
    /// Gain of the fan-in scaled Gaussian used for the head's feature weights.
    pub head_gain: Float,
    /// Initialize the head's density-channel weight to `1/s^2 - 1`, so an
    /// untrained step maps block-summed mass at one level onto the next.
    pub mass_preserving_init: bool,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig { pre_convs: Vec::new(), head_gain: 0.1, mass_preserving_init: true }
    }
}

/// Module for one pyramid level: optional pre-convolutions and the 1x1 head
/// mapping `channels(F) + 1` inputs to one residual channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualDensityModule {
    pub in_channels: usize,
    pub pre: Vec<ConvLayer>,
    pub head: ConvLayer,
}

impl ResidualDensityModule {
    pub fn params(&self) -> Vec<ParamId> {
        self.pre.iter().chain(std::iter::once(&self.head)).flat_map(|l| [l.weight, l.bias]).collect()
    }

    /// Residual from an already upsampled coarser estimate and this level's features.
    pub fn residual(&self, tape: &mut Tape, store: &ParamStore, upsampled: Var, features: Var) -> Result<Var> {
        let (us, fs) = (tape.shape(upsampled), tape.shape(features));
        if (us.batch(), us.height(), us.width()) != (fs.batch(), fs.height(), fs.width()) {
            return Err(Error::shape(
                "residual_step",
                format!("upsampled density {us:?} vs features {fs:?}"),
            ));
        }
        if fs.channels() + 1 != self.in_channels {
            return Err(Error::shape(
                "residual_step",
                format!("module expects {} input channels, got {} + 1", self.in_channels, fs.channels()),
            ));
        }
        let mut x = tape.concat_channels(&[upsampled, features])?;
        for layer in &self.pre {
            let y = layer.forward(tape, store, x)?;
            x = tape.relu(y);
        }
        self.head.forward(tape, store, x)
    }
}

/// Builds one module per pyramid level (index 0 = finest).
pub fn build_modules(
    cfg: &CascadeConfig,
    level_channels: &[usize],
    scale: usize,
    store: &mut ParamStore,
    seed: u64,
) -> Result<Vec<ResidualDensityModule>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut modules = Vec::with_capacity(level_channels.len());
    for (k, &c) in level_channels.iter().enumerate() {
        let in_channels = c + 1;
        let mut channels = in_channels;
        let mut pre = Vec::with_capacity(cfg.pre_convs.len());
        for (j, &spec) in cfg.pre_convs.iter().enumerate() {
            pre.push(add_conv(store, &mut rng, &format!("cascade.l{k}.pre{j}"), channels, spec, Float::sqrt(2.0))?);
            channels = spec.out_channels;
        }
        let head = add_conv(store, &mut rng, &format!("cascade.l{k}.head"), channels, ConvSpec::new(1, 1, 1), cfg.head_gain)?;
        if cfg.mass_preserving_init && pre.is_empty() {
            let w = &mut store.get_mut(head.weight).value;
            w.data_mut()[0] = 1.0 / (scale * scale) as Float - 1.0;
        }
        modules.push(ResidualDensityModule { in_channels, pre, head });
    }
    Ok(modules)
}

/// One refinement step; returns `(residual, density, upsampled previous density)`.
pub fn residual_step(
    tape: &mut Tape,
    store: &ParamStore,
    previous: Var,
    features: Var,
    module: &ResidualDensityModule,
    scale: usize,
) -> Result<(Var, Var, Var)> {
    let up = tape.upsample(previous, scale)?;
    let r = module.residual(tape, store, up, features)?;
    let d = tape.add(up, r)?;
    Ok((r, d, up))
}

/// Tape handles of one cascade pass, in processing order (coarsest first).
/// `densities[0]` is the zero initial map; `densities[j + 1]` is produced
/// from `upsampled[j] + residuals[j]`.
#[derive(Clone, Debug)]
pub struct CascadeVars {
    pub densities: Vec<Var>,
    pub upsampled: Vec<Var>,
    pub residuals: Vec<Var>,
}

impl CascadeVars {
    pub fn final_density(&self) -> Var {
        *self.densities.last().expect("cascade has at least the initial map")
    }

    pub fn to_state(&self, tape: &Tape) -> CascadeState {
        let grab = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect();
        CascadeState {
            densities: grab(&self.densities),
            upsampled: grab(&self.upsampled),
            residuals: grab(&self.residuals),
        }
    }
}

/// Shape of the initial zero map for a coarsest level of the given shape.
fn initial_shape(coarsest: Shape, scale: usize) -> Shape {
    Shape::new(coarsest.batch(), 1, coarsest.height().div_ceil(scale), coarsest.width().div_ceil(scale))
}

/// Runs the full cascade over `pyramid` (finest level first) with one module
/// per level, returning every intermediate map.
pub fn estimate_density(
    tape: &mut Tape,
    store: &ParamStore,
    pyramid: &FeaturePyramid,
    modules: &[ResidualDensityModule],
    scale: usize,
) -> Result<CascadeVars> {
    if modules.len() != pyramid.levels.len() || modules.is_empty() {
        return Err(Error::arg(
            "estimate_density",
            format!("{} modules for {} pyramid levels", modules.len(), pyramid.levels.len()),
        ));
    }
    let coarsest = tape.shape(*pyramid.levels.last().unwrap());
    let d0_shape = initial_shape(coarsest, scale);
    let d0 = tape.constant(Tensor::zeros(d0_shape));
    let mut vars = CascadeVars { densities: vec![d0], upsampled: Vec::new(), residuals: Vec::new() };
    let mut current = d0;
    for (k, module) in modules.iter().enumerate().rev() {
        let features = pyramid.levels[k];
        let fs = tape.shape(features);
        let (r, d, up) = if k + 1 == modules.len()
            && (d0_shape.height() * scale, d0_shape.width() * scale) != (fs.height(), fs.width())
        {
            // Coarsest level not divisible by the scale: u_s(0) is zero at any size.
            let up = tape.constant(Tensor::zeros(Shape::new(fs.batch(), 1, fs.height(), fs.width())));
            let r = module.residual(tape, store, up, features)?;
            let d = tape.add(up, r)?;
            (r, d, up)
        } else {
            residual_step(tape, store, current, features, module, scale)?
        };
        vars.upsampled.push(up);
        vars.residuals.push(r);
        vars.densities.push(d);
        current = d;
    }
    Ok(vars)
}

/// Concrete values of a cascade pass (same ordering as [`CascadeVars`]).
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeState {
    pub densities: Vec<Tensor>,
    pub upsampled: Vec<Tensor>,
    pub residuals: Vec<Tensor>,
}

impl CascadeState {
    pub fn final_density(&self) -> &Tensor {
        self.densities.last().expect("cascade has at least the initial map")
    }

    pub fn initial(&self) -> &Tensor {
        &self.densities[0]
    }

    /// Residuals per level, coarsest first.
    pub fn decompose(&self) -> Vec<Tensor> {
        self.residuals.clone()
    }
}

/// Rebuilds the final map from an initial map and per-level residuals
/// (coarsest first) by alternately upsampling and adding.
pub fn reconstruct(initial: &Tensor, residuals: &[Tensor], scale: usize) -> Result<Tensor> {
    let mut d = initial.clone();
    for (j, r) in residuals.iter().enumerate() {
        let up = if j == 0 && ops::bilinear_upsample(&d, scale)?.shape() != r.shape() {
            Tensor::zeros(r.shape())
        } else {
            ops::bilinear_upsample(&d, scale)?
        };
        d = up.add(r)?;
    }
    Ok(d)
}

/// Sum over levels of each residual upsampled through every finer level.
/// Equals the final map whenever the initial map is zero.
pub fn telescoped_sum(residuals: &[Tensor], scale: usize) -> Result<Tensor> {
    let last = residuals.last().ok_or_else(|| Error::arg("telescoped_sum", "no residuals"))?;
    let mut total = Tensor::zeros(last.shape());
    for (j, r) in residuals.iter().enumerate() {
        let mut up = r.clone();
        for _ in j + 1..residuals.len() {
            up = ops::bilinear_upsample(&up, scale)?;
        }
        total = total.add(&up)?;
    }
    Ok(total)
}
