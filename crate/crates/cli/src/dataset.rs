//! On-disk dataset layout.
//!
//! ```text
//! <data_dir>/manifest.json
//! <data_dir>/images/<id>.png
//! <data_dir>/annotations/<id>.json
//! <data_dir>/density/<id>.crd      (written by `gt`)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use crdnet::density::DensityMap;
use crdnet::eval::{train_test_split, Fold};
use crdnet::io;
use crdnet::train::Sample;
use crdnet::Float;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub id: String,
    /// Relative to the dataset directory.
    pub image: PathBuf,
    pub annotation: PathBuf,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn load(data_dir: &Path) -> Result<Self> {
        let path = data_dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        text
    }
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:05}")
}

/// A loaded image with its ground truth.
#[derive(Clone, Debug)]
pub struct Item {
    pub id: String,
    pub sample: Sample,
}

pub fn density_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.crd"))
}

/// Loads every manifest entry with its density map from `density_dir`.
pub fn load_items(data_dir: &Path, density_dir: &Path) -> Result<Vec<Item>> {
    let manifest = Manifest::load(data_dir)?;
    if manifest.entries.is_empty() {
        bail!("dataset {} is empty", data_dir.display());
    }
    manifest
        .entries
        .iter()
        .map(|e| {
            let image = io::read_image(&data_dir.join(&e.image))?;
            let path = density_path(density_dir, &e.id);
            if !path.exists() {
                bail!("missing ground truth {} (run `crdnet gt` first)", path.display());
            }
            let gt = io::read_density(&path)?;
            Ok(Item { id: e.id.clone(), sample: Sample { image, gt, count: e.count as Float } })
        })
        .collect()
}

/// Which part of the hold-out split to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

pub fn split(cfg: &ExperimentConfig, len: usize) -> Result<Fold> {
    Ok(train_test_split(len, cfg.test_fraction, cfg.seed)?)
}

pub fn select(items: &[Item], fold: &Fold, which: Split) -> Vec<Item> {
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect();
    match which {
        Split::Train => pick(&fold.train),
        Split::Test => pick(&fold.test),
        Split::All => items.to_vec(),
    }
}

pub fn samples(items: &[Item]) -> Vec<Sample> {
    items.iter().map(|i| i.sample.clone()).collect()
}

/// Precomputed estimate for `id` from a directory of `.crd` files.
pub fn read_prediction(dir: &Path, id: &str) -> Result<DensityMap> {
    Ok(io::read_density(&density_path(dir, id))?)
}
