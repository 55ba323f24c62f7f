//! Command implementations, callable without going through argument parsing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ensure_writable, ExperimentConfig};
use super::figures::{overlay_panel, save_png};
use crate::data::store::write_volume;
use crate::data::{
    batch_images, content_hash, generate_border_bias, prepare_dataset, stack_labels, Dataset, DatasetManifest, Image, PrepareManifest,
    PrepareSummary, SliceSample, Split, SynthConfig, VolumeRecord,
};
use crate::diagnostics::{control_score, export_heatmaps, feature_stats, shift_score};
use crate::error::{Error, Result};
use crate::heads::{segment, sigmoid};
use crate::mask::Mask;
use crate::metrics::{evaluate_volumes, fmt_mean_std, fmt_value, summarize, Conventions, MetricsReport, VolumePair, METRIC_NAMES};
use crate::model::SegModel;
use crate::nn::Parameterized;
use crate::train::{train_model, TrainHistory, TrainOptions, BEST_CHECKPOINT};

pub const CONFIG_FILE: &str = "config.toml";
pub const HISTORY_FILE: &str = "history.csv";
pub const HISTORY_JSON: &str = "history.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const METRICS_DIR: &str = "metrics";
pub const FIGURES_DIR: &str = "figures";
pub const PREDICTIONS_DIR: &str = "predictions";
const PREDICT_BATCH: usize = 8;

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))
}

fn write_row<I, S>(w: &mut csv::Writer<fs::File>, path: &Path, row: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(row).map_err(|e| Error::format(path, e.to_string()))
}

pub fn cmd_prepare(manifest: &Path, out: &Path) -> Result<PrepareSummary> {
    let m = PrepareManifest::load(manifest)?;
    ensure_writable(out)?;
    prepare_dataset(&m, out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SynthSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub content_hash: String,
}

pub fn cmd_synth(config: &SynthConfig, out: &Path) -> Result<SynthSummary> {
    config.validate()?;
    ensure_writable(out)?;
    let ds = generate_border_bias(config)?;
    let manifest = ds.write(out)?;
    let count = |s| manifest.volumes_in(s).count();
    Ok(SynthSummary { train: count(Split::Train), val: count(Split::Val), test: count(Split::Test), content_hash: content_hash(out)? })
}

/// Synthesizes into `dir` unless it already holds a dataset from the same config.
fn ensure_synth(config: &SynthConfig, dir: &Path) -> Result<()> {
    if let Ok(m) = DatasetManifest::read(dir) {
        let same = serde_json::to_value(config).ok().as_ref() == m.provenance.get("config");
        if same {
            return Ok(());
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    cmd_synth(config, dir).map(|_| ())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub history: TrainHistory,
    /// `None` when training stopped before the last epoch.
    pub report: Option<MetricsReport>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainRunOptions {
    pub stop_after: Option<usize>,
    pub verbose: bool,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Trains one model per seed into `out/seed_<s>/`, evaluates each finished
/// run on the test split and writes `out/summary.csv`.
pub fn cmd_train(config: &ExperimentConfig, out: &Path, options: &TrainRunOptions) -> Result<Vec<SeedRun>> {
    config.validate()?;
    ensure_writable(out)?;
    let dataset_dir = match (&config.dataset.path, &config.dataset.synth) {
        (Some(p), _) => absolute(p)?,
        (None, Some(s)) => {
            let dir = absolute(&out.join("dataset"))?;
            ensure_synth(s, &dir)?;
            dir
        }
        (None, None) => unreachable!("validated"),
    };
    let dataset = Dataset::open(&dataset_dir)?;
    let channels = dataset
        .manifest()
        .volumes
        .first()
        .map(|v| v.channels)
        .ok_or_else(|| Error::EmptyDataset(format!("{} lists no volumes", dataset_dir.display())))?;
    let train = dataset.load_split(Split::Train)?;
    let val = dataset.load_split(Split::Val)?;
    let test = dataset.load_split(Split::Test)?;

    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let mut frozen = config.clone();
        frozen.out = None;
        frozen.seeds = vec![seed];
        frozen.dataset.path = Some(dataset_dir.clone());
        frozen.dataset.synth = None;
        frozen.train.seed = seed;
        let dir = seed_dir(out, seed);
        let ckpt_dir = dir.join(CHECKPOINT_DIR);
        fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        let text = frozen.to_toml()?;
        let cfg_path = dir.join(CONFIG_FILE);
        if let Ok(existing) = fs::read_to_string(&cfg_path) {
            if existing != text {
                return Err(Error::Config(format!(
                    "{} holds a run with a different config; choose another output directory",
                    dir.display()
                )));
            }
        } else {
            write_text(&cfg_path, &text)?;
        }

        let model = SegModel::new(frozen.model.model_config(channels)?, seed)?;
        let opts = TrainOptions { checkpoint_dir: Some(ckpt_dir), resume: true, stop_after: options.stop_after, verbose: options.verbose };
        let (best, history) = train_model(model, &train, &val, &frozen.train, &opts)?;
        history.write_csv(&dir.join(HISTORY_FILE))?;
        history.write_json(&dir.join(HISTORY_JSON))?;
        let report = if history.records.len() == frozen.train.epochs {
            let conventions = frozen.evaluation.conventions();
            let threshold = frozen.evaluation.threshold;
            let report = evaluate_model(&best, &dataset, Split::Test, &conventions, threshold)?;
            report.write(&dir.join(METRICS_DIR))?;
            let n = frozen.evaluation.overlay_slices.min(test.len());
            for (k, sample) in test.iter().take(n).enumerate() {
                let pred = &predict_samples(&best, std::slice::from_ref(sample), threshold)?[0];
                let panel = overlay_panel(&sample.image, &sample.label, &[&pred.mask])?;
                save_png(&panel, &dir.join(FIGURES_DIR).join(format!("overlay_{k:04}.png")))?;
            }
            Some(report)
        } else {
            None
        };
        runs.push(SeedRun { seed, dir, history, report });
    }
    write_seed_summary(&runs, &out.join(SUMMARY_FILE))?;
    Ok(runs)
}

/// One row per metric: the per-seed test means and their mean (std).
fn write_seed_summary(runs: &[SeedRun], path: &Path) -> Result<()> {
    let done: Vec<&SeedRun> = runs.iter().filter(|r| r.report.is_some()).collect();
    let mut w = csv_writer(path)?;
    let mut header = vec!["metric".to_string()];
    header.extend(done.iter().map(|r| format!("seed_{}", r.seed)));
    header.extend(["mean", "std", "n", "mean_std"].map(String::from));
    write_row(&mut w, path, &header)?;
    for metric in METRIC_NAMES {
        let values: Vec<Option<f64>> =
            done.iter().map(|r| r.report.as_ref().and_then(|rep| rep.summary(metric)).and_then(|s| s.mean)).collect();
        let s = summarize(metric, values.iter().copied());
        let mut row = vec![metric.to_string()];
        row.extend(values.iter().map(|&v| fmt_value(v)));
        row.extend([fmt_value(s.mean), fmt_value(s.std), s.n.to_string(), fmt_mean_std(&s)]);
        write_row(&mut w, path, &row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Foreground probability per pixel, `H x W`.
    pub probability: Vec<f64>,
    /// `1 x H x W`.
    pub mask: Mask,
}

pub fn predict_samples(model: &SegModel, samples: &[SliceSample], threshold: f64) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(PREDICT_BATCH) {
        let refs: Vec<&SliceSample> = chunk.iter().collect();
        let logits = model.predict(&batch_images(&refs)?)?;
        let masks = segment(&logits, threshold)?;
        for b in 0..logits.batch {
            out.push(Prediction { probability: logits.sample(b).iter().map(|&s| sigmoid(s)).collect(), mask: masks.plane(b) });
        }
    }
    Ok(out)
}

fn predict_volume(
    model: &SegModel,
    dataset: &Dataset,
    record: &VolumeRecord,
    threshold: f64,
) -> Result<(Vec<SliceSample>, Vec<Prediction>)> {
    let samples = dataset.load_volume(record)?;
    let preds = predict_samples(model, &samples, threshold)?;
    Ok((samples, preds))
}

fn stack_predictions(preds: &[Prediction]) -> Result<Mask> {
    let planes: Vec<Mask> = preds.iter().map(|p| p.mask.clone()).collect();
    Mask::stack(&planes)
}

/// Scores `model` volume by volume on one split.
pub fn evaluate_model(
    model: &SegModel,
    dataset: &Dataset,
    split: Split,
    conventions: &Conventions,
    threshold: f64,
) -> Result<MetricsReport> {
    let records: Vec<&VolumeRecord> = dataset.manifest().volumes_in(split).collect();
    if records.is_empty() {
        return Err(Error::EmptyDataset(format!("no {split} volumes in {}", dataset.root().display())));
    }
    let mut masks = Vec::with_capacity(records.len());
    for r in &records {
        let (samples, preds) = predict_volume(model, dataset, r, threshold)?;
        masks.push((stack_predictions(&preds)?, stack_labels(&samples)?));
    }
    score(&records, &masks, conventions)
}

fn score(records: &[&VolumeRecord], masks: &[(Mask, Mask)], conventions: &Conventions) -> Result<MetricsReport> {
    let pairs: Vec<VolumePair<'_>> =
        records.iter().zip(masks).map(|(r, (pred, gt))| VolumePair { id: &r.id, pred, gt, spacing: r.spacing }).collect();
    evaluate_volumes(&pairs, conventions)
}

/// Writes predictions of `model` on `split` in the dataset layout: the image
/// holds the foreground probability and the label the thresholded mask.
pub fn write_predictions(model: &SegModel, dataset: &Dataset, split: Split, threshold: f64, out: &Path) -> Result<DatasetManifest> {
    let mut volumes = Vec::new();
    for record in dataset.manifest().volumes_in(split) {
        let (samples, preds) = predict_volume(model, dataset, record, threshold)?;
        let written: Vec<SliceSample> = samples
            .iter()
            .zip(preds)
            .map(|(s, p)| SliceSample {
                image: Image { height: s.image.height, width: s.image.width, channels: 1, values: p.probability },
                label: p.mask,
                volume_id: s.volume_id.clone(),
                slice_index: s.slice_index,
            })
            .collect();
        let rec = VolumeRecord { channels: 1, modalities: vec!["probability".into()], source_hash: None, ..record.clone() };
        write_volume(out, &rec, &written)?;
        volumes.push(rec);
    }
    let manifest = DatasetManifest { volumes, provenance: serde_json::json!({ "source": "predictions", "threshold": threshold }) };
    manifest.write(out)?;
    Ok(manifest)
}

pub enum EvalSource<'a> {
    Checkpoint(&'a Path),
    /// A directory in the dataset layout whose labels are predicted masks.
    Predictions(&'a Path),
}

pub fn cmd_evaluate(
    source: EvalSource<'_>,
    dataset: &Path,
    split: Split,
    conventions: &Conventions,
    threshold: f64,
    out: &Path,
) -> Result<MetricsReport> {
    conventions.validate()?;
    let dataset = Dataset::open(dataset)?;
    ensure_writable(out)?;
    let report = match source {
        EvalSource::Checkpoint(path) => {
            let model = SegModel::load(path)?;
            let report = evaluate_model(&model, &dataset, split, conventions, threshold)?;
            write_predictions(&model, &dataset, split, threshold, &out.join(PREDICTIONS_DIR))?;
            report
        }
        EvalSource::Predictions(dir) => {
            let preds = Dataset::open(dir)?;
            let records: Vec<&VolumeRecord> = dataset.manifest().volumes_in(split).collect();
            if records.is_empty() {
                return Err(Error::EmptyDataset(format!("no {split} volumes in {}", dataset.root().display())));
            }
            let mut masks = Vec::with_capacity(records.len());
            for r in &records {
                let p = preds
                    .manifest()
                    .find(&r.id)
                    .ok_or_else(|| Error::InvalidArgument(format!("{} has no prediction for volume `{}`", dir.display(), r.id)))?;
                let pred = stack_labels(&preds.load_volume(p)?)?;
                let gt = stack_labels(&dataset.load_volume(r)?)?;
                if pred.dims() != gt.dims() {
                    return Err(Error::Shape(format!("volume `{}`: prediction {:?} vs ground truth {:?}", r.id, pred.dims(), gt.dims())));
                }
                masks.push((pred, gt));
            }
            score(&records, &masks, conventions)?
        }
    };
    report.write(out)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub band: usize,
    pub samples: usize,
    pub shift_score: f64,
    pub control_score: f64,
}

/// Feature statistics of a checkpoint over one split: `stats.json`,
/// `heatmaps/` and `shift.json`.
pub fn cmd_diagnose(checkpoint: &Path, dataset: &Path, split: Split, band: usize, batch_size: usize, out: &Path) -> Result<ShiftReport> {
    let model = SegModel::load(checkpoint)?;
    let dataset = Dataset::open(dataset)?;
    let samples = dataset.load_split(split)?;
    ensure_writable(out)?;
    let stats = feature_stats(&model, &samples, batch_size)?;
    let report =
        ShiftReport { band, samples: samples.len(), shift_score: shift_score(&stats, band)?, control_score: control_score(&stats, band)? };
    stats.write_json(&out.join("stats.json"))?;
    export_heatmaps(&stats, &out.join("heatmaps"))?;
    let path = out.join("shift.json");
    write_text(&path, &serde_json::to_string_pretty(&report).expect("plain json"))?;
    Ok(report)
}

/// A finished seed run found on disk.
#[derive(Clone, Debug)]
struct RunRecord {
    dir: PathBuf,
    config: ExperimentConfig,
    report: MetricsReport,
}

fn load_run(dir: &Path) -> Result<RunRecord> {
    let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let path = dir.join(METRICS_DIR).join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let report = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    Ok(RunRecord { dir: dir.to_path_buf(), config, report })
}

/// A run directory is either one seed run or an output directory with `seed_*` children.
fn collect_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    if !dir.is_dir() {
        return Err(Error::InvalidArgument(format!("run directory {} does not exist", dir.display())));
    }
    if dir.join(CONFIG_FILE).exists() {
        return Ok(vec![load_run(dir)?]);
    }
    let mut seeds: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed_")))
        .collect();
    seeds.sort();
    if seeds.is_empty() {
        return Err(Error::InvalidArgument(format!("{} holds no finished runs", dir.display())));
    }
    seeds.iter().map(|d| load_run(d)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub model: String,
    pub filters: String,
    pub params: usize,
    pub runs: usize,
    /// `mean (std)` over runs of each run's mean, in `METRIC_NAMES` order.
    pub cells: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportSummary {
    pub rows: Vec<ReportRow>,
    pub panels: Vec<PathBuf>,
}

/// Comparison table with one row per (head, filters) pair and overlay panels
/// for the requested test slices, one prediction column per row.
pub fn cmd_report(run_dirs: &[PathBuf], slices: &[usize], out: &Path) -> Result<ReportSummary> {
    if run_dirs.is_empty() {
        return Err(Error::InvalidArgument("no run directories given".into()));
    }
    let mut runs = Vec::new();
    for d in run_dirs {
        runs.extend(collect_runs(d)?);
    }
    ensure_writable(out)?;
    let mut groups: BTreeMap<(String, String), Vec<RunRecord>> = BTreeMap::new();
    let mut order: Vec<(String, String)> = Vec::new();
    for r in runs {
        let filters = r.config.model.filters()?.iter().map(|f| f.to_string()).collect::<Vec<_>>().join("-");
        let key = (r.config.model.head.to_string(), filters);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }

    let path = out.join("table.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["model", "filters", "params", "runs"];
    header.extend(METRIC_NAMES);
    write_row(&mut w, &path, &header)?;
    let mut rows = Vec::new();
    let mut models = Vec::new();
    for key in &order {
        let group = &groups[key];
        let best = SegModel::load(&group[0].dir.join(CHECKPOINT_DIR).join(BEST_CHECKPOINT))?;
        let cells: Vec<String> = METRIC_NAMES
            .iter()
            .map(|m| fmt_mean_std(&summarize(m, group.iter().map(|r| r.report.summary(m).and_then(|s| s.mean)))))
            .collect();
        let row = ReportRow { model: key.0.clone(), filters: key.1.clone(), params: best.param_count(), runs: group.len(), cells };
        let mut rec = vec![row.model.clone(), row.filters.clone(), row.params.to_string(), row.runs.to_string()];
        rec.extend(row.cells.iter().cloned());
        write_row(&mut w, &path, &rec)?;
        rows.push(row);
        models.push((best, group[0].config.evaluation.threshold, group[0].config.dataset.path.clone()));
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let mut panels = Vec::new();
    if !slices.is_empty() {
        let data_path = models[0].2.clone().ok_or_else(|| Error::Config("run config names no dataset path".into()))?;
        let test = Dataset::open(&data_path)?.load_split(Split::Test)?;
        if let Some(&bad) = slices.iter().find(|&&s| s >= test.len()) {
            return Err(Error::InvalidArgument(format!("slice {bad} is out of range, the test split has {} slices", test.len())));
        }
        let picked: Vec<SliceSample> = slices.iter().map(|&s| test[s].clone()).collect();
        let preds: Vec<Vec<Prediction>> = models.iter().map(|(m, t, _)| predict_samples(m, &picked, *t)).collect::<Result<_>>()?;
        for (k, (&s, sample)) in slices.iter().zip(&picked).enumerate() {
            let masks: Vec<&Mask> = preds.iter().map(|p| &p[k].mask).collect();
            let panel = overlay_panel(&sample.image, &sample.label, &masks)?;
            let file = out.join(FIGURES_DIR).join(format!("overlay_{s:04}.png"));
            save_png(&panel, &file)?;
            panels.push(file);
        }
        let columns: Vec<String> =
            ["image".to_string(), "ground_truth".to_string()].into_iter().chain(order.iter().map(|(h, f)| format!("{h} [{f}]"))).collect();
        let index = serde_json::json!({ "columns": columns, "slices": slices, "dataset": data_path });
        write_text(&out.join(FIGURES_DIR).join("panels.json"), &serde_json::to_string_pretty(&index).expect("plain json"))?;
    }
    Ok(ReportSummary { rows, panels })
}
