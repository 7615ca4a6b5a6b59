//! Encoder producing the multi-scale feature pyramid.
//!
//! The backbone is a stack of stages, each an optional downsampling step
//! followed by same-padded convolutions with ReLU. Selected stage outputs
//! are tapped as pyramid levels, finest first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::ConvGeometry;
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::{Float, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub dilation: usize,
}

fn one() -> usize {
    1
}

impl ConvSpec {
    pub fn new(out_channels: usize, kernel: usize, dilation: usize) -> Self {
        ConvSpec { out_channels, kernel, dilation }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    /// Reduce resolution by the pyramid scale before this stage's convolutions.
    pub downsample: bool,
    pub convs: Vec<ConvSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
    /// Stage indices whose outputs become pyramid levels, finest first.
    pub taps: Vec<usize>,
    /// Inter-level scale factor; a power of two realized by repeated 2x2 max pooling.
    pub scale: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::with_widths(&[16, 32, 64, 64], 2, 2)
    }
}

impl BackboneConfig {
    /// One stage per pyramid level, `convs_per_stage` 3x3 convolutions each;
    /// the last stage is dilated by 2.
    pub fn with_widths(widths: &[usize], convs_per_stage: usize, last_dilation: usize) -> Self {
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let dilation = if i + 1 == widths.len() { last_dilation } else { 1 };
                StageSpec { downsample: i > 0, convs: vec![ConvSpec::new(c, 3, dilation); convs_per_stage] }
            })
            .collect();
        BackboneConfig { in_channels: 1, stages, taps: (0..widths.len()).collect(), scale: 2 }
    }

    pub fn levels(&self) -> usize {
        self.taps.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.taps.is_empty() {
            return bad("backbone needs at least one tap".into());
        }
        if self.scale < 2 || !self.scale.is_power_of_two() {
            return bad(format!("scale must be a power of two >= 2, got {}", self.scale));
        }
        if self.in_channels == 0 {
            return bad("input channels must be positive".into());
        }
        for (i, stage) in self.stages.iter().enumerate() {
            for c in &stage.convs {
                if c.out_channels == 0 || c.kernel % 2 == 0 || c.dilation == 0 {
                    return bad(format!("stage {i}: invalid convolution {c:?} (kernel must be odd)"));
                }
            }
        }
        let mut prev: Option<usize> = None;
        for (k, &t) in self.taps.iter().enumerate() {
            if t >= self.stages.len() {
                return bad(format!("tap {k} refers to missing stage {t}"));
            }
            if prev.is_some_and(|p| t <= p) {
                return bad("taps must be strictly increasing".into());
            }
            let reductions = self.stages[..=t].iter().filter(|s| s.downsample).count();
            if reductions != k {
                return bad(format!(
                    "tap {k} (stage {t}) sits {reductions} reductions deep; level {k} needs exactly {k}"
                ));
            }
            prev = Some(t);
        }
        Ok(())
    }

    /// Channel count of each tapped level.
    pub fn level_channels(&self) -> Vec<usize> {
        let mut channels = self.in_channels;
        let mut per_stage = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            if let Some(last) = stage.convs.last() {
                channels = last.out_channels;
            }
            per_stage.push(channels);
        }
        self.taps.iter().map(|&t| per_stage[t]).collect()
    }

    /// Required divisibility of input height and width.
    pub fn input_multiple(&self) -> usize {
        self.scale.pow(self.levels() as u32 - 1)
    }
}

/// One convolution with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geo: ConvGeometry,
}

impl ConvLayer {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(input, w, b, self.geo)
    }
}

/// Registers a conv layer whose weights are drawn from N(0, gain^2 / fan_in).
pub(crate) fn add_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    in_channels: usize,
    spec: ConvSpec,
    gain: Float,
) -> Result<ConvLayer> {
    let fan_in = in_channels * spec.kernel * spec.kernel;
    let std = gain / (fan_in as Float).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let shape = Shape::new(spec.out_channels, in_channels, spec.kernel, spec.kernel);
    let weight = Tensor::from_fn(shape, |_| normal.sample(rng));
    let weight = store.add(format!("{name}.weight"), weight)?;
    let bias = store.add(format!("{name}.bias"), Tensor::zeros(Shape::new(spec.out_channels, 1, 1, 1)))?;
    Ok(ConvLayer { weight, bias, geo: ConvGeometry::same(spec.kernel, spec.dilation) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: BackboneConfig,
    pub stages: Vec<Vec<ConvLayer>>,
}

/// Builds the encoder's parameters into `store` with He-scaled Gaussian
/// weights and zero biases, deterministically from `seed`.
pub fn build_backbone(cfg: &BackboneConfig, store: &mut ParamStore, seed: u64) -> Result<Encoder> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut channels = cfg.in_channels;
    let mut stages = Vec::with_capacity(cfg.stages.len());
    for (i, stage) in cfg.stages.iter().enumerate() {
        let mut layers = Vec::with_capacity(stage.convs.len());
        for (j, &spec) in stage.convs.iter().enumerate() {
            layers.push(add_conv(store, &mut rng, &format!("encoder.s{i}.c{j}"), channels, spec, Float::sqrt(2.0))?);
            channels = spec.out_channels;
        }
        stages.push(layers);
    }
    Ok(Encoder { config: cfg.clone(), stages })
}

/// Tapped encoder activations, finest level first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

impl Encoder {
    pub fn all_params(&self) -> Vec<ParamId> {
        self.stages.iter().flatten().flat_map(|l| [l.weight, l.bias]).collect()
    }

    pub fn extract_pyramid(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<FeaturePyramid> {
        let cfg = &self.config;
        let [_, c, h, w] = tape.shape(image).0;
        let multiple = cfg.input_multiple();
        if h % multiple != 0 || w % multiple != 0 {
            return Err(Error::arg(
                "extract_pyramid",
                format!("input {h}x{w} not divisible by {multiple}"),
            ));
        }
        if c != cfg.in_channels {
            return Err(Error::shape(
                "extract_pyramid",
                format!("image has {c} channels, backbone expects {}", cfg.in_channels),
            ));
        }
        let pools = cfg.scale.trailing_zeros();
        let last = *cfg.taps.last().expect("validated non-empty");
        let mut x = image;
        let mut levels = Vec::with_capacity(cfg.taps.len());
        for (i, (spec, layers)) in cfg.stages.iter().zip(&self.stages).enumerate().take(last + 1) {
            if spec.downsample {
                for _ in 0..pools {
                    x = tape.maxpool2(x)?;
                }
            }
            for layer in layers {
                let y = layer.forward(tape, store, x)?;
                x = tape.relu(y);
            }
            if cfg.taps.contains(&i) {
                levels.push(x);
            }
        }
        Ok(FeaturePyramid { levels })
    }
}
