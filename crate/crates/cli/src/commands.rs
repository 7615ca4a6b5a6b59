use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use crdnet::checkpoint;
use crdnet::density::{generate_density_map, DensityMap};
use crdnet::eval::{self, EvalResult, EvalSample};
use crdnet::io;
use crdnet::losses::DEFAULT_LAMBDA;
use crdnet::model::CrdNet;
use crdnet::synth;
use crdnet::train::{self, Sample, StepRecord, TrainConfig};
use crdnet::Float;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::dataset::{self, Entry, Item, Manifest, Split};
use crate::write_file;

pub const CHECKPOINT: &str = "checkpoint.crdc";
pub const CONFIG: &str = "config.json";
pub const METRICS: &str = "metrics.csv";
pub const PRETRAIN_LOG: &str = "pretrain.csv";
pub const EVAL_REPORT: &str = "eval_report.json";

/// Largest tolerated gap between a ground-truth map's sum and its point count.
pub const COUNT_TOLERANCE: Float = 1e-3;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Writes `count` synthetic scenes into `out` and a config pointing at them.
pub fn synth(cfg: &ExperimentConfig, count: usize, out: &Path, log: &mut dyn Write) -> Result<()> {
    let scenes = synth::generate_dataset(&cfg.synth, count, cfg.seed)?;
    create_dir(&out.join("images"))?;
    create_dir(&out.join("annotations"))?;
    let mut entries = Vec::with_capacity(count);
    for (i, scene) in scenes.iter().enumerate() {
        let id = dataset::scene_id(i);
        let image = PathBuf::from("images").join(format!("{id}.png"));
        let annotation = PathBuf::from("annotations").join(format!("{id}.json"));
        io::write_image(&out.join(&image), &scene.image)?;
        io::write_annotation(&out.join(&annotation), &scene.annotation)?;
        entries.push(Entry { id, image, annotation, count: scene.annotation.count() });
    }
    let manifest = Manifest { seed: cfg.seed, entries };
    write_file(&out.join(dataset::MANIFEST), manifest.to_json().as_bytes())?;
    let mut own = cfg.clone();
    own.data_dir = out.to_path_buf();
    own.scenes = count;
    own.save(&out.join(CONFIG))?;
    writeln!(log, "wrote {count} scenes to {}", out.display())?;
    Ok(())
}

/// Builds one density file per annotation and checks count preservation.
pub fn gt(annotations: &Path, sigma: Float, out: &Path, log: &mut dyn Write) -> Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(annotations)
        .with_context(|| format!("reading {}", annotations.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|x| x == "json"));
    files.sort();
    create_dir(out)?;
    let mut worst: Float = 0.0;
    for path in &files {
        let ann = io::load_annotation(path)?;
        let map = generate_density_map(&ann, sigma)?;
        let bytes = io::encode_density(&map);
        let stored = io::decode_density(&bytes, &path.display().to_string())?;
        let gap = (stored.sum() - ann.count() as Float).abs();
        if gap >= COUNT_TOLERANCE {
            bail!("{}: density sums to {} for {} points", path.display(), stored.sum(), ann.count());
        }
        worst = worst.max(gap);
        let stem = path.file_stem().expect("json file has a stem").to_string_lossy();
        write_file(&dataset::density_path(out, &stem), &bytes)?;
        writeln!(log, "{stem}: count={} sum={:.6}", ann.count(), stored.sum())?;
    }
    writeln!(log, "wrote {} density maps to {} (max |sum - count| = {worst:.3e})", files.len(), out.display())?;
    Ok(())
}

fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<CrdNet> {
    let mut model = CrdNet::new(cfg.model.clone(), cfg.seed)?;
    let values = checkpoint::load_params(path)?;
    model.load_values(&values).with_context(|| format!("loading {}", path.display()))?;
    Ok(model)
}

fn metrics_csv(records: &[StepRecord]) -> String {
    let mut text = format!("{}\n", StepRecord::CSV_HEADER);
    for r in records {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    text
}

fn pretrain_csv(history: &[(usize, Vec<Float>)]) -> String {
    let mut text = String::from("level,epoch,loss\n");
    for (level, losses) in history {
        for (epoch, loss) in losses.iter().enumerate() {
            writeln!(text, "{level},{epoch},{loss}").unwrap();
        }
    }
    text
}

fn pretrain(model: &mut CrdNet, samples: &[Sample], cfg: &TrainConfig, log: &mut dyn Write) -> Result<String> {
    let history = train::pretrain_all(model, samples, cfg)?;
    for (level, losses) in &history {
        let first = losses.first().copied().unwrap_or(Float::NAN);
        let last = losses.last().copied().unwrap_or(Float::NAN);
        writeln!(log, "pretrain level {level}: loss {first:.4e} -> {last:.4e}")?;
    }
    Ok(pretrain_csv(&history))
}

fn finetune(
    model: &mut CrdNet,
    samples: &[Sample],
    cfg: &TrainConfig,
    checkpoints: Option<&Path>,
    log: &mut dyn Write,
) -> Result<Vec<StepRecord>> {
    let records = train::finetune(model, samples, cfg, |epoch, m| match checkpoints {
        Some(dir) => checkpoint::save_params(&dir.join(format!("epoch_{:03}.crdc", epoch + 1)), &m.store),
        None => Ok(()),
    })?;
    let epochs = cfg.finetune_epochs;
    if epochs > 0 {
        for (epoch, chunk) in records.chunks(records.len() / epochs).enumerate() {
            let mean = chunk.iter().map(|r| r.total).sum::<Float>() / chunk.len() as Float;
            writeln!(log, "finetune epoch {}/{epochs}: mean loss {mean:.4e}", epoch + 1)?;
        }
    }
    Ok(records)
}

/// Staged training on the train split; writes the checkpoint, per-epoch
/// checkpoints, the metrics log and the pretraining log.
pub fn train(cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<()> {
    let items = dataset::load_items(&cfg.data_dir, &cfg.density_dir())?;
    let fold = dataset::split(cfg, items.len())?;
    let samples = dataset::samples(&dataset::select(&items, &fold, Split::Train));
    let out = &cfg.output_dir;
    let checkpoints = out.join("checkpoints");
    create_dir(&checkpoints)?;
    cfg.save(&out.join(CONFIG))?;
    writeln!(log, "training on {} of {} images", samples.len(), items.len())?;

    let mut model = CrdNet::new(cfg.model.clone(), cfg.seed)?;
    let pretrain_log = pretrain(&mut model, &samples, &cfg.train, log)?;
    write_file(&out.join(PRETRAIN_LOG), pretrain_log.as_bytes())?;
    let records = finetune(&mut model, &samples, &cfg.train, Some(&checkpoints), log)?;
    write_file(&out.join(METRICS), metrics_csv(&records).as_bytes())?;
    checkpoint::save_params(&out.join(CHECKPOINT), &model.store)?;
    writeln!(log, "checkpoint: {}", out.join(CHECKPOINT).display())?;
    Ok(())
}

#[derive(Serialize)]
struct ImageRow<'a> {
    id: &'a str,
    ground_truth: Float,
    estimate: Float,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    split: String,
    source: String,
    images: usize,
    mae: Float,
    mse: Float,
    per_image: Vec<ImageRow<'a>>,
}

fn evaluate_items(model: &CrdNet, items: &[Item], clamp: bool) -> Result<EvalResult> {
    let samples: Vec<EvalSample> =
        items.iter().map(|i| EvalSample { image: &i.sample.image, count: i.sample.count }).collect();
    Ok(eval::evaluate(model, &samples, clamp)?)
}

/// Where eval takes its density estimates from.
pub enum Estimates<'a> {
    Checkpoint(&'a Path),
    /// A directory of `<id>.crd` maps used in place of network output.
    Predictions(&'a Path),
}

pub fn eval(cfg: &ExperimentConfig, source: Estimates, which: Split, out: &Path, log: &mut dyn Write) -> Result<()> {
    let items = dataset::load_items(&cfg.data_dir, &cfg.density_dir())?;
    let fold = dataset::split(cfg, items.len())?;
    let selected = dataset::select(&items, &fold, which);
    let (result, source) = match source {
        Estimates::Checkpoint(path) => {
            let model = load_model(cfg, path)?;
            (evaluate_items(&model, &selected, cfg.clamp_counts)?, path.display().to_string())
        }
        Estimates::Predictions(dir) => {
            let pairs = selected
                .iter()
                .map(|item| {
                    let mut map = dataset::read_prediction(dir, &item.id)?;
                    if cfg.clamp_counts {
                        map = map.clamped();
                    }
                    Ok((item.sample.count, eval::count(&map)))
                })
                .collect::<Result<_>>()?;
            (EvalResult::from_pairs(pairs)?, dir.display().to_string())
        }
    };
    let report = EvalReport {
        split: format!("{which:?}").to_lowercase(),
        source,
        images: result.len(),
        mae: result.mae,
        mse: result.mse,
        per_image: selected
            .iter()
            .zip(&result.pairs)
            .map(|(item, &(ground_truth, estimate))| ImageRow { id: &item.id, ground_truth, estimate })
            .collect(),
    };
    create_dir(out)?;
    let path = out.join(EVAL_REPORT);
    write_file(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    writeln!(log, "evaluated {} {} images; report: {}", result.len(), report.split, path.display())?;
    writeln!(log, "MAE={:.6} MSE={:.6}", result.mae, result.mse)?;
    Ok(())
}

fn write_map(dir: &Path, name: &str, map: &DensityMap) -> Result<()> {
    io::write_density(&dir.join(format!("{name}.crd")), map)?;
    io::write_density_png(&dir.join(format!("{name}.png")), map)?;
    Ok(())
}

/// Density estimate for one image. With `levels`, also exports each level's
/// density and residual maps.
pub fn infer(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    image: &Path,
    out: &Path,
    levels: bool,
    log: &mut dyn Write,
) -> Result<()> {
    let model = load_model(cfg, checkpoint)?;
    let tensor = io::read_image(image)?;
    let state = model.infer(&tensor)?;
    let map = DensityMap::from_tensor(state.final_density(), 0);
    let stem = image.file_stem().context("image path has no file name")?.to_string_lossy().into_owned();
    create_dir(out)?;
    write_map(out, &stem, &map)?;
    if levels {
        let k = model.levels();
        for (j, (d, r)) in state.densities[1..].iter().zip(&state.residuals).enumerate() {
            let level = k - 1 - j;
            write_map(out, &format!("{stem}.level{level}.density"), &DensityMap::from_tensor(d, 0))?;
            write_map(out, &format!("{stem}.level{level}.residual"), &DensityMap::from_tensor(r, 0))?;
        }
    }
    writeln!(log, "wrote {}", out.join(format!("{stem}.crd")).display())?;
    writeln!(log, "count={:.4}", eval::count(&map))?;
    Ok(())
}

/// One arm of the loss ablation.
#[derive(Clone, Debug, Serialize)]
pub struct ArmResult {
    pub loss: &'static str,
    pub lambda: Float,
    pub mae: Float,
    pub mse: Float,
}

pub fn ablation_csv(arms: &[ArmResult]) -> String {
    let mut text = String::from("loss,lambda,mae,mse\n");
    for a in arms {
        writeln!(text, "{},{},{:.6},{:.6}", a.loss, a.lambda, a.mae, a.mse).unwrap();
    }
    text
}

fn ablation_markdown(arms: &[ArmResult], delta: Float, relative: Float) -> String {
    let mut text = String::from("| Loss | MAE | MSE |\n|---|---|---|\n");
    for a in arms {
        writeln!(text, "| {} | {:.4} | {:.4} |", a.loss, a.mae, a.mse).unwrap();
    }
    writeln!(text, "\nMAE(L_E+L_Y) - MAE(L_E) = {delta:+.4} ({:+.2}%)", relative * 100.0).unwrap();
    text
}

/// Fine-tunes with and without the local count term from one shared
/// pretraining run and compares test-split errors.
pub fn ablate(cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<()> {
    let items = dataset::load_items(&cfg.data_dir, &cfg.density_dir())?;
    let fold = dataset::split(cfg, items.len())?;
    let samples = dataset::samples(&dataset::select(&items, &fold, Split::Train));
    let test = dataset::select(&items, &fold, Split::Test);
    if test.is_empty() {
        bail!("ablation needs a non-empty test split (test_fraction = {})", cfg.test_fraction);
    }
    let out = &cfg.output_dir;
    create_dir(out)?;
    cfg.save(&out.join(CONFIG))?;

    let mut base = CrdNet::new(cfg.model.clone(), cfg.seed)?;
    let pretrain_log = pretrain(&mut base, &samples, &cfg.train, log)?;
    write_file(&out.join(PRETRAIN_LOG), pretrain_log.as_bytes())?;

    let lambda = if cfg.train.loss.lambda > 0.0 { cfg.train.loss.lambda } else { DEFAULT_LAMBDA };
    let mut arms = Vec::with_capacity(2);
    for (loss, tag, lambda) in [("L_E", "le", 0.0), ("L_E+L_Y", "le_ly", lambda)] {
        writeln!(log, "arm {loss} (lambda = {lambda})")?;
        let mut train_cfg = cfg.train.clone();
        train_cfg.loss.lambda = lambda;
        let mut model = base.clone();
        let records = finetune(&mut model, &samples, &train_cfg, None, log)?;
        write_file(&out.join(format!("metrics_{tag}.csv")), metrics_csv(&records).as_bytes())?;
        checkpoint::save_params(&out.join(format!("checkpoint_{tag}.crdc")), &model.store)?;
        let r = evaluate_items(&model, &test, cfg.clamp_counts)?;
        arms.push(ArmResult { loss, lambda, mae: r.mae, mse: r.mse });
    }

    let delta = arms[1].mae - arms[0].mae;
    let relative = if arms[0].mae > 0.0 { delta / arms[0].mae } else { 0.0 };
    write_file(&out.join("ablation.csv"), ablation_csv(&arms).as_bytes())?;
    let markdown = ablation_markdown(&arms, delta, relative);
    write_file(&out.join("ablation.md"), markdown.as_bytes())?;
    write!(log, "{markdown}")?;
    Ok(())
}
