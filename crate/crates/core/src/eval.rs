//! Counting metrics and dataset splits.
//!
//! `MAE = 1/N sum |n_j - n^_j|`, `MSE = sqrt(1/N sum (n_j - n^_j)^2)`, where
//! `n_j` is the annotated count and `n^_j` the integral of the estimate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::model::CrdNet;
use crate::tensor::{Float, Tensor};

/// Estimated count: the sum of all pixel values.
pub fn count(map: &DensityMap) -> Float {
    map.sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mae: Float,
    pub mse: Float,
    /// `(ground truth, estimate)` per image.
    pub pairs: Vec<(Float, Float)>,
}

impl EvalResult {
    pub fn from_pairs(pairs: Vec<(Float, Float)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = pairs.len() as Float;
        let mae = pairs.iter().map(|(g, e)| (g - e).abs()).sum::<Float>() / n;
        let mse = (pairs.iter().map(|(g, e)| (g - e).powi(2)).sum::<Float>() / n).sqrt();
        Ok(EvalResult { mae, mse, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// An evaluation image with its annotated count.
#[derive(Clone, Debug)]
pub struct EvalSample<'a> {
    pub image: &'a Tensor,
    pub count: Float,
}

/// Whole-image inference and count metrics. With `clamp`, negative density
/// values are zeroed before counting.
pub fn evaluate(model: &CrdNet, samples: &[EvalSample<'_>], clamp: bool) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut pairs = Vec::with_capacity(samples.len());
    for s in samples {
        let mut map = model.predict_density(s.image)?;
        if clamp {
            map = map.clamped();
        }
        pairs.push((s.count, count(&map)));
    }
    EvalResult::from_pairs(pairs)
}

/// Train/test index sets of one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn shuffled(len: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// `k` folds over `len` samples; test folds partition the indices and their
/// sizes differ by at most one.
pub fn kfold_split(len: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::arg("kfold_split", format!("k must be >= 2, got {k}")));
    }
    if k > len {
        return Err(Error::arg("kfold_split", format!("k = {k} exceeds dataset size {len}")));
    }
    let order = shuffled(len, seed);
    let (base, extra) = (len / k, len % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut test = order[start..start + size].to_vec();
        let mut train: Vec<usize> = order[..start].iter().chain(&order[start + size..]).copied().collect();
        test.sort_unstable();
        train.sort_unstable();
        folds.push(Fold { train, test });
        start += size;
    }
    Ok(folds)
}

/// Single seeded hold-out split with `round(len * test_fraction)` test samples.
pub fn train_test_split(len: usize, test_fraction: Float, seed: u64) -> Result<Fold> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::arg("train_test_split", format!("test fraction {test_fraction}")));
    }
    let order = shuffled(len, seed);
    let n_test = (len as Float * test_fraction).round() as usize;
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok(Fold { train, test })
}
