//! Two-stage training.
//!
//! Stage one pretrains the residual modules one level at a time, coarsest
//! first. Level `k` regresses the target residual `H_k - up(D_prev)`, where
//! `H_k` is the block-summed ground truth at that level and `D_prev` comes
//! from the already trained, frozen coarser levels. The encoder trains
//! together with the coarsest module and stays frozen afterwards.
//!
//! Stage two fine-tunes every parameter end to end on the total loss of the
//! final density map.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{downsample_density, DensityMap};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig};
use crate::model::CrdNet;
use crate::tape::{ParamId, ParamStore, Tape};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd,
    Momentum { momentum: Float },
    Adam { beta1: Float, beta2: Float, eps: Float },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<Float>,
    second: Vec<Float>,
    steps: i32,
}

/// First-order optimizer over the non-frozen parameters of a store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    lr: Float,
    state: Vec<Option<Moments>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, lr: Float) -> Self {
        Optimizer { config, lr, state: Vec::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        for (ParamId(i), p) in store.iter_mut() {
            if p.frozen {
                continue;
            }
            let n = p.value.shape().numel();
            let st = self.state[i].get_or_insert_with(|| Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
                steps: 0,
            });
            st.steps += 1;
            let lr = self.lr;
            let grad = p.grad.data();
            let value = p.value.data_mut();
            match self.config {
                OptimizerConfig::Sgd => {
                    for (v, g) in value.iter_mut().zip(grad) {
                        *v -= lr * g;
                    }
                }
                OptimizerConfig::Momentum { momentum } => {
                    for ((v, g), m) in value.iter_mut().zip(grad).zip(&mut st.first) {
                        *m = momentum * *m + g;
                        *v -= lr * *m;
                    }
                }
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(st.steps);
                    let c2 = 1.0 - beta2.powi(st.steps);
                    for (((v, g), m), s) in value.iter_mut().zip(grad).zip(&mut st.first).zip(&mut st.second) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *s = beta2 * *s + (1.0 - beta2) * g * g;
                        *v -= lr * (*m / c1) / ((*s / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub crop_size: usize,
    pub patches_per_image: usize,
    /// Mirror each crop left-right with probability 0.5.
    pub flip: bool,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub pretrain_lr: Float,
    pub finetune_lr: Float,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    /// Allow fine-tuning without level-wise pretraining.
    pub cold_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            crop_size: 64,
            patches_per_image: 4,
            flip: true,
            batch_size: 8,
            optimizer: OptimizerConfig::default(),
            pretrain_lr: 1e-4,
            finetune_lr: 1e-5,
            pretrain_epochs: 10,
            finetune_epochs: 10,
            seed: 0,
            loss: LossConfig::default(),
            cold_start: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, input_multiple: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.crop_size == 0 || self.crop_size % input_multiple != 0 {
            return bad(format!("crop size {} must be a positive multiple of {input_multiple}", self.crop_size));
        }
        if self.patches_per_image == 0 || self.batch_size == 0 {
            return bad("patches per image and batch size must be positive".into());
        }
        if !(self.pretrain_lr >= 0.0 && self.finetune_lr >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        self.loss.validate_for(self.crop_size, self.crop_size)
    }
}

/// One training image with its ground-truth density and annotated count.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(1, C, H, W)`.
    pub image: Tensor,
    pub gt: DensityMap,
    pub count: Float,
}

/// An aligned image/target crop.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub image: Tensor,
    pub target: DensityMap,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn crop_with(sample: &Sample, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Patch>> {
    let c = cfg.crop_size;
    let (h, w) = sample.gt.dims();
    let [_, _, ih, iw] = sample.image.shape().0;
    if (ih, iw) != (h, w) {
        return Err(Error::shape("crop_patches", format!("image {ih}x{iw} vs ground truth {h}x{w}")));
    }
    if c > h || c > w {
        return Err(Error::arg("crop_patches", format!("crop {c} larger than {h}x{w} image")));
    }
    (0..cfg.patches_per_image)
        .map(|_| {
            let y = rng.random_range(0..=h - c);
            let x = rng.random_range(0..=w - c);
            let mut image = sample.image.crop_spatial(y, x, c, c)?;
            let mut target = sample.gt.crop(y, x, c, c)?;
            if cfg.flip && rng.random_bool(0.5) {
                image = image.flip_horizontal();
                target = target.flip_horizontal();
            }
            Ok(Patch { image, target })
        })
        .collect()
}

/// `patches_per_image` random aligned crops of one sample, deterministic in `seed`.
pub fn crop_patches(sample: &Sample, cfg: &TrainConfig, seed: u64) -> Result<Vec<Patch>> {
    crop_with(sample, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A stacked training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub targets: Vec<DensityMap>,
}

/// Crops every sample, shuffles the patches and groups them into batches.
pub fn epoch_batches(samples: &[Sample], cfg: &TrainConfig, seed: u64) -> Result<Vec<Batch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patches = Vec::with_capacity(samples.len() * cfg.patches_per_image);
    for s in samples {
        patches.extend(crop_with(s, cfg, &mut rng)?);
    }
    patches.shuffle(&mut rng);
    patches
        .chunks(cfg.batch_size)
        .map(|chunk| {
            let images: Vec<Tensor> = chunk.iter().map(|p| p.image.clone()).collect();
            Ok(Batch {
                images: Tensor::stack(&images)?,
                targets: chunk.iter().map(|p| p.target.clone()).collect(),
            })
        })
        .collect()
}

fn check_finite(step: usize, value: Float) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, value })
    }
}

/// Pretrains the module at pyramid `level` (0 = finest) against its target
/// residual; returns the mean loss of each epoch. Coarser modules stay
/// frozen; the encoder trains only with the coarsest level.
pub fn pretrain_level(model: &mut CrdNet, level: usize, samples: &[Sample], cfg: &TrainConfig) -> Result<Vec<Float>> {
    let levels = model.levels();
    if level >= levels {
        return Err(Error::arg("pretrain_level", format!("level {level} of {levels}")));
    }
    if let Some(missing) = (level + 1..levels).find(|&l| !model.pretrained[l]) {
        return Err(Error::CoarserLevelUntrained { level, missing });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate(model.input_multiple())?;

    let mut trainable = model.module_params(level);
    if level + 1 == levels {
        trainable.extend(model.encoder_params());
    }
    model.store.set_frozen(|id, _| !trainable.contains(&id));

    let factor = model.scale().pow(level as u32);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.pretrain_lr);
    let mut history = Vec::with_capacity(cfg.pretrain_epochs);
    let mut step = 0;
    let result = (|| {
        for epoch in 0..cfg.pretrain_epochs {
            let batches = epoch_batches(samples, cfg, mix_seed(cfg.seed, level as u64 + 1, epoch as u64))?;
            let mut total = 0.0;
            for batch in &batches {
                let targets: Vec<DensityMap> =
                    batch.targets.iter().map(|t| downsample_density(t, factor)).collect::<Result<_>>()?;
                let mut tape = Tape::new();
                let x = tape.constant(batch.images.clone());
                let fwd = model.forward_to_level(&mut tape, x, level)?;
                let up = *fwd.cascade.upsampled.last().unwrap();
                let residual = *fwd.cascade.residuals.last().unwrap();
                let h = tape.constant(DensityMap::stack(&targets)?);
                let target_residual = tape.sub(h, up)?;
                let diff = tape.sub(residual, target_residual)?;
                let ss = tape.sum_squares(diff);
                let loss = tape.scale(ss, 1.0 / tape.shape(diff).numel() as Float);
                let value = tape.value(loss).item();
                check_finite(step, value)?;
                model.store.zero_grad();
                tape.backward(loss, &mut model.store)?;
                opt.step(&mut model.store);
                total += value;
                step += 1;
            }
            history.push(total / batches.len() as Float);
        }
        Ok(history)
    })();
    model.store.unfreeze_all();
    model.store.zero_grad();
    if result.is_ok() {
        model.pretrained[level] = true;
    }
    result
}

/// Loss values of one fine-tuning step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub euclidean: Float,
    pub local_count: Float,
    pub total: Float,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,l_e,l_y,total";

    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.step, self.euclidean, self.local_count, self.total)
    }
}

/// End-to-end optimization of the total loss on final density maps.
/// `on_epoch(epoch, model)` runs after every epoch (e.g. to save a checkpoint).
pub fn finetune(
    model: &mut CrdNet,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &CrdNet) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    if !cfg.cold_start {
        if let Some(missing) = (0..model.levels()).find(|&l| !model.pretrained[l]) {
            return Err(Error::InvalidConfig(format!(
                "level {missing} is not pretrained; pretrain first or set cold_start"
            )));
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate(model.input_multiple())?;
    model.store.unfreeze_all();

    let mut opt = Optimizer::new(cfg.optimizer, cfg.finetune_lr);
    let mut records = Vec::new();
    for epoch in 0..cfg.finetune_epochs {
        let batches = epoch_batches(samples, cfg, mix_seed(cfg.seed, 0, epoch as u64))?;
        for batch in &batches {
            let mut tape = Tape::new();
            let x = tape.constant(batch.images.clone());
            let fwd = model.forward(&mut tape, x)?;
            let d = fwd.density();
            let q = tape.constant(DensityMap::stack(&batch.targets)?);
            let lv = losses::total_loss(&mut tape, d, q, &cfg.loss)?;
            let record = StepRecord {
                step: records.len(),
                euclidean: tape.value(lv.euclidean).item(),
                local_count: tape.value(lv.local_count).item(),
                total: tape.value(lv.total).item(),
            };
            check_finite(record.step, record.total)?;
            model.store.zero_grad();
            tape.backward(lv.total, &mut model.store)?;
            opt.step(&mut model.store);
            records.push(record);
        }
        on_epoch(epoch, model)?;
    }
    model.store.zero_grad();
    Ok(records)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Epoch-mean pretraining losses per level, in training order (coarsest first).
    pub pretrain: Vec<(usize, Vec<Float>)>,
    pub finetune: Vec<StepRecord>,
}

/// Level-wise pretraining (skipped under `cold_start`) followed by fine-tuning.
pub fn train(
    model: &mut CrdNet,
    samples: &[Sample],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(usize, &CrdNet) -> Result<()>,
) -> Result<TrainReport> {
    let pretrain = pretrain_all(model, samples, cfg)?;
    let finetune = finetune(model, samples, cfg, on_epoch)?;
    Ok(TrainReport { pretrain, finetune })
}

/// Runs [`pretrain_level`] for every level, coarsest first, unless `cold_start`.
pub fn pretrain_all(model: &mut CrdNet, samples: &[Sample], cfg: &TrainConfig) -> Result<Vec<(usize, Vec<Float>)>> {
    let mut out = Vec::new();
    if !cfg.cold_start {
        for level in (0..model.levels()).rev() {
            out.push((level, pretrain_level(model, level, samples, cfg)?));
        }
    }
    Ok(out)
}
