use serde::{Deserialize, Serialize};

use crate::cnet::{self, CascadeConfig, CascadeState, CascadeVars, ResidualDensityModule};
use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::pnet::{self, BackboneConfig, Encoder, FeaturePyramid};
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub cascade: CascadeConfig,
}

/// Encoder plus one residual density module per pyramid level, with all
/// learnable parameters in one store.
#[derive(Clone, Debug, PartialEq)]
pub struct CrdNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    /// Indexed by pyramid level, 0 = finest.
    pub modules: Vec<ResidualDensityModule>,
    /// Levels whose module has completed level-wise pretraining.
    pub pretrained: Vec<bool>,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub pyramid: FeaturePyramid,
    pub cascade: CascadeVars,
}

impl Forward {
    pub fn density(&self) -> Var {
        self.cascade.final_density()
    }
}

impl CrdNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = pnet::build_backbone(&config.backbone, &mut store, seed)?;
        let modules = cnet::build_modules(
            &config.cascade,
            &config.backbone.level_channels(),
            config.backbone.scale,
            &mut store,
            seed.wrapping_add(0x5EED),
        )?;
        let levels = modules.len();
        Ok(CrdNet { config, store, encoder, modules, pretrained: vec![false; levels] })
    }

    pub fn levels(&self) -> usize {
        self.modules.len()
    }

    pub fn scale(&self) -> usize {
        self.config.backbone.scale
    }

    pub fn input_multiple(&self) -> usize {
        self.config.backbone.input_multiple()
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.encoder.all_params()
    }

    pub fn module_params(&self, level: usize) -> Vec<ParamId> {
        self.modules[level].params()
    }

    pub fn forward(&self, tape: &mut Tape, image: Var) -> Result<Forward> {
        let pyramid = self.encoder.extract_pyramid(tape, &self.store, image)?;
        let cascade = cnet::estimate_density(tape, &self.store, &pyramid, &self.modules, self.scale())?;
        Ok(Forward { pyramid, cascade })
    }

    /// Cascade from the coarsest level down to and including `level`.
    pub fn forward_to_level(&self, tape: &mut Tape, image: Var, level: usize) -> Result<Forward> {
        if level >= self.levels() {
            return Err(Error::arg("forward_to_level", format!("level {level} of {}", self.levels())));
        }
        let pyramid = self.encoder.extract_pyramid(tape, &self.store, image)?;
        let sub = FeaturePyramid { levels: pyramid.levels[level..].to_vec() };
        let cascade = cnet::estimate_density(tape, &self.store, &sub, &self.modules[level..], self.scale())?;
        Ok(Forward { pyramid, cascade })
    }

    /// Full cascade for an `(N, C, H, W)` image batch without recording gradients.
    pub fn infer(&self, image: &Tensor) -> Result<CascadeState> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let fwd = self.forward(&mut tape, x)?;
        Ok(fwd.cascade.to_state(&tape))
    }

    /// Final density map for a single `(1, C, H, W)` image.
    pub fn predict_density(&self, image: &Tensor) -> Result<DensityMap> {
        let state = self.infer(image)?;
        Ok(DensityMap::from_tensor(state.final_density(), 0))
    }

    /// Copies parameter values from `other`, matching by name and shape.
    pub fn load_values(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint holds {} parameters, model has {}",
                values.len(),
                self.store.len()
            )));
        }
        for (name, value) in values {
            let id = self
                .store
                .id(name)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name}")))?;
            let p = self.store.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(Error::InvalidConfig(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value.clone();
        }
        Ok(())
    }
}
