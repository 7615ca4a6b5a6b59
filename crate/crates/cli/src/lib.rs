//! Command-line front end: dataset synthesis, ground truth, training,
//! evaluation, inference and the loss ablation.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

pub mod commands;
pub mod config;
pub mod dataset;

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", path.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}
