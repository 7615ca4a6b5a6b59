//! Training objective: pixel-wise Euclidean loss, local count loss, and
//! their weighted sum.
//!
//! For a batch of `M` estimated maps `D_j` and targets `Q_j`:
//!
//! ```text
//! L_E = 1/M sum_j ||D_j - Q_j||^2
//! c_j(x) = sum over the h x h patch at anchor x of (D_j - Q_j)
//! L_Y = 1/M sum_j sum_{x on the stride-t grid} |c_j(x)|
//! L   = L_E + lambda * L_Y
//! ```
//!
//! Patches are `h x h` pixels, anchored every `t` pixels, and only windows
//! that fit entirely inside the map are used.

use serde::{Deserialize, Serialize};

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{ParamStore, Tape, Var};
use crate::tensor::Float;

/// Default weight of the local count term.
pub const DEFAULT_LAMBDA: Float = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: Float,
    pub patch_size: usize,
    pub patch_stride: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: DEFAULT_LAMBDA, patch_size: 32, patch_stride: 16 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.patch_size == 0 || self.patch_stride == 0 {
            return Err(Error::InvalidConfig("patch size and stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Checks the patch fits maps of the given size.
    pub fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        self.validate()?;
        if self.patch_size > height.min(width) {
            return Err(Error::InvalidConfig(format!(
                "patch size {} exceeds {height}x{width} maps",
                self.patch_size
            )));
        }
        Ok(())
    }
}

fn check_pair(tape: &Tape, estimates: Var, targets: Var, op: &'static str) -> Result<usize> {
    let (es, ts) = (tape.shape(estimates), tape.shape(targets));
    if es != ts {
        return Err(Error::shape(op, format!("estimates {es:?} vs targets {ts:?}")));
    }
    Ok(es.batch())
}

/// `(1/M) sum_j ||D_j - Q_j||^2` over `(M, 1, H, W)` batches.
pub fn euclidean_loss(tape: &mut Tape, estimates: Var, targets: Var) -> Result<Var> {
    let m = check_pair(tape, estimates, targets, "euclidean_loss")?;
    let diff = tape.sub(estimates, targets)?;
    let ss = tape.sum_squares(diff);
    Ok(tape.scale(ss, 1.0 / m as Float))
}

/// `(1/M) sum_j sum_i |c_j(x_i)|` over `(M, 1, H, W)` batches.
pub fn local_count_loss(tape: &mut Tape, estimates: Var, targets: Var, patch: usize, stride: usize) -> Result<Var> {
    let m = check_pair(tape, estimates, targets, "local_count_loss")?;
    let diff = tape.sub(estimates, targets)?;
    let abs = tape.patch_abs_sum(diff, patch, stride)?;
    Ok(tape.scale(abs, 1.0 / m as Float))
}

/// Tape handles of the three loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub euclidean: Var,
    pub local_count: Var,
    pub total: Var,
}

pub fn total_loss(tape: &mut Tape, estimates: Var, targets: Var, cfg: &LossConfig) -> Result<LossVars> {
    cfg.validate()?;
    let euclidean = euclidean_loss(tape, estimates, targets)?;
    let local_count = local_count_loss(tape, estimates, targets, cfg.patch_size, cfg.patch_stride)?;
    let weighted = tape.scale(local_count, cfg.lambda);
    let total = tape.add(euclidean, weighted)?;
    Ok(LossVars { euclidean, local_count, total })
}

/// Anchor-grid of patch count errors for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<Float>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub euclidean: Float,
    pub local_count: Float,
    pub total: Float,
    /// `c_j(x_i)` for each image `j`, row-major over anchors.
    pub patch_count_errors: Vec<PatchGrid>,
}

impl LossVars {
    pub fn report(&self, tape: &Tape, estimates: Var, targets: Var, cfg: &LossConfig) -> Result<LossReport> {
        let diff = tape.value(estimates).sub(tape.value(targets))?;
        let [_, _, h, w] = diff.shape().0;
        let (rows, cols) = ops::anchor_counts(h, w, cfg.patch_size, cfg.patch_stride);
        let patch_count_errors = diff
            .data()
            .chunks(h * w)
            .map(|plane| PatchGrid {
                rows,
                cols,
                values: ops::patch_sums(plane, h, w, cfg.patch_size, cfg.patch_stride),
            })
            .collect();
        Ok(LossReport {
            euclidean: tape.value(self.euclidean).item(),
            local_count: tape.value(self.local_count).item(),
            total: tape.value(self.total).item(),
            patch_count_errors,
        })
    }
}

/// Loss values for batches of density maps (no gradients).
pub fn compute_losses(estimates: &[DensityMap], targets: &[DensityMap], cfg: &LossConfig) -> Result<LossReport> {
    if estimates.is_empty() || targets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if estimates.len() != targets.len() {
        return Err(Error::shape(
            "losses",
            format!("{} estimates vs {} targets", estimates.len(), targets.len()),
        ));
    }
    let mut tape = Tape::new();
    let d = tape.constant(DensityMap::stack(estimates)?);
    let q = tape.constant(DensityMap::stack(targets)?);
    let vars = total_loss(&mut tape, d, q, cfg)?;
    vars.report(&tape, d, q, cfg)
}

/// Differentiates the total loss with respect to the estimate maps; returns
/// the report and the gradient stack `(M, 1, H, W)` as maps.
pub fn total_loss_gradient(
    estimates: &[DensityMap],
    targets: &[DensityMap],
    cfg: &LossConfig,
) -> Result<(LossReport, Vec<DensityMap>)> {
    let mut tape = Tape::new();
    let d = tape.leaf(DensityMap::stack(estimates)?);
    let q = tape.constant(DensityMap::stack(targets)?);
    let vars = total_loss(&mut tape, d, q, cfg)?;
    let report = vars.report(&tape, d, q, cfg)?;
    let grads = tape.backward(vars.total, &mut ParamStore::new())?;
    let g = grads.wrt(d).expect("estimates are a leaf");
    let maps = (0..estimates.len()).map(|i| DensityMap::from_tensor(g, i)).collect();
    Ok((report, maps))
}
