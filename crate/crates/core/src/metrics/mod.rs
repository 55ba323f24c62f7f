//! Voxel overlap, lesion-wise and boundary metrics.
//!
//! Reports express Dice, Jaccard and the lesion-wise scores in percent and
//! distances in millimetres. Undefined values are kept as `None` and written
//! as `NA`.

mod components;
mod lesion;
mod surface;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use components::{connected_components, Connectivity, LesionSet};
pub use lesion::{lesion_counts, lesion_metrics, LesionCounts, LesionMetrics};
pub use surface::{boundary, nearest_rank, squared_distance_transform, surface_distances, Spacing, SurfaceDistances};

use crate::error::{Error, Result};
use crate::mask::Mask;

pub const MISSING: &str = "NA";

fn check_dims(pred: &Mask, gt: &Mask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    Ok(())
}

fn overlap(pred: &Mask, gt: &Mask) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        p += a as usize;
        g += b as usize;
        inter += (a & b) as usize;
    }
    (inter, p, g)
}

/// `2|P∩G| / (|P|+|G|)`, 1 when both masks are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_dims(pred, gt)?;
    let (i, p, g) = overlap(pred, gt);
    Ok(if p + g == 0 { 1.0 } else { 2.0 * i as f64 / (p + g) as f64 })
}

/// `|P∩G| / |P∪G|`, 1 when both masks are empty.
pub fn jaccard(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_dims(pred, gt)?;
    let (i, p, g) = overlap(pred, gt);
    let union = p + g - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

/// Evaluation settings recorded alongside every report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conventions {
    pub connectivity: Connectivity,
    pub ldice_factor: u32,
}

impl Default for Conventions {
    fn default() -> Self {
        Self { connectivity: Connectivity::TwentySix, ldice_factor: 2 }
    }
}

impl Conventions {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.ldice_factor, 1 | 2) {
            return Err(Error::Config(format!("ldice_factor must be 1 or 2, got {}", self.ldice_factor)));
        }
        Ok(())
    }

    pub fn describe(&self) -> ConventionsBlock {
        ConventionsBlock {
            connectivity: self.connectivity,
            ldice_factor: self.ldice_factor,
            units: "dice, jaccard, ldice, ltpr, lppv, lfpr in percent; hd, hd95, asd in mm".into(),
            dice_empty: "both masks empty gives dice = jaccard = 100".into(),
            lesion_empty: "no lesions on either side gives ldice = 100; ltpr is missing without ground-truth lesions; lppv and lfpr are missing without predicted lesions".into(),
            ldice: format!("ldice = {} * tp_gt / (gl + pl)", self.ldice_factor),
            lfpr: "lfpr = 1 - lppv, lppv = tp_pred / pl".into(),
            boundary: "foreground voxels with a background face neighbour; outside the volume is background except along axes of extent 1".into(),
            hd95: "max of the two directed nearest-rank 95th percentiles".into(),
            asd: "mean over the union of both directed distance sets".into(),
            surface_empty: "hd, hd95, asd are missing when either mask is empty".into(),
            aggregate: "mean and population std over volumes with a defined value".into(),
            missing_value: MISSING.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConventionsBlock {
    pub connectivity: Connectivity,
    pub ldice_factor: u32,
    pub units: String,
    pub dice_empty: String,
    pub lesion_empty: String,
    pub ldice: String,
    pub lfpr: String,
    pub boundary: String,
    pub hd95: String,
    pub asd: String,
    pub surface_empty: String,
    pub aggregate: String,
    pub missing_value: String,
}

pub const METRIC_NAMES: [&str; 9] = ["dice", "jaccard", "ldice", "ltpr", "lppv", "lfpr", "hd", "hd95", "asd"];

/// Metrics of one volume, in report units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub volume_id: String,
    pub spacing: Spacing,
    pub counts: LesionCounts,
    pub dice: Option<f64>,
    pub jaccard: Option<f64>,
    pub ldice: Option<f64>,
    pub ltpr: Option<f64>,
    pub lppv: Option<f64>,
    pub lfpr: Option<f64>,
    pub hd: Option<f64>,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

impl VolumeMetrics {
    pub fn values(&self) -> [Option<f64>; 9] {
        [self.dice, self.jaccard, self.ldice, self.ltpr, self.lppv, self.lfpr, self.hd, self.hd95, self.asd]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        METRIC_NAMES.iter().position(|&n| n == name).and_then(|i| self.values()[i])
    }
}

fn pct(v: f64) -> f64 {
    100.0 * v
}

pub fn evaluate_volume(id: &str, pred: &Mask, gt: &Mask, spacing: Spacing, conventions: &Conventions) -> Result<VolumeMetrics> {
    conventions.validate()?;
    let dice_v = dice(pred, gt)?;
    let jaccard_v = jaccard(pred, gt)?;
    let pc = connected_components(pred, conventions.connectivity);
    let gc = connected_components(gt, conventions.connectivity);
    let counts = lesion_counts(&pc, &gc)?;
    let lm = lesion_metrics(counts, conventions.ldice_factor);
    let surf = match surface_distances(pred, gt, spacing) {
        Ok(s) => Some(s),
        Err(Error::UndefinedBoundary(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(VolumeMetrics {
        volume_id: id.to_string(),
        spacing,
        counts,
        dice: Some(pct(dice_v)),
        jaccard: Some(pct(jaccard_v)),
        ldice: lm.ldice.map(pct),
        ltpr: lm.ltpr.map(pct),
        lppv: lm.lppv.map(pct),
        lfpr: lm.lfpr.map(pct),
        hd: surf.as_ref().map(SurfaceDistances::hd),
        hd95: surf.as_ref().map(SurfaceDistances::hd95),
        asd: surf.as_ref().map(SurfaceDistances::asd),
    })
}

/// One prediction / ground-truth pair to score.
pub struct VolumePair<'a> {
    pub id: &'a str,
    pub pred: &'a Mask,
    pub gt: &'a Mask,
    pub spacing: Spacing,
}

/// Scores volumes in parallel; rows keep the input order.
pub fn evaluate_volumes(pairs: &[VolumePair<'_>], conventions: &Conventions) -> Result<MetricsReport> {
    let volumes = pairs.par_iter().map(|p| evaluate_volume(p.id, p.pred, p.gt, p.spacing, conventions)).collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::new(*conventions, volumes))
}

/// Mean and population standard deviation of the defined values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub metric: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
}

pub fn summarize(metric: &str, values: impl IntoIterator<Item = Option<f64>>) -> Summary {
    let defined: Vec<f64> = values.into_iter().flatten().collect();
    let n = defined.len();
    if n == 0 {
        return Summary { metric: metric.into(), mean: None, std: None, n };
    }
    let mean = defined.iter().sum::<f64>() / n as f64;
    let var = defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Summary { metric: metric.into(), mean: Some(mean), std: Some(var.sqrt()), n }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub conventions: ConventionsBlock,
    pub volumes: Vec<VolumeMetrics>,
    pub aggregate: Vec<Summary>,
}

pub fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => MISSING.into(),
    }
}

/// `mean (std)` with two decimals, the layout of comparison tables.
pub fn fmt_mean_std(s: &Summary) -> String {
    match (s.mean, s.std) {
        (Some(m), Some(sd)) => format!("{m:.2} ({sd:.2})"),
        _ => MISSING.into(),
    }
}

impl MetricsReport {
    pub fn new(conventions: Conventions, volumes: Vec<VolumeMetrics>) -> Self {
        let aggregate = METRIC_NAMES.iter().enumerate().map(|(k, name)| summarize(name, volumes.iter().map(|v| v.values()[k]))).collect();
        Self { conventions: conventions.describe(), volumes, aggregate }
    }

    pub fn summary(&self, metric: &str) -> Option<&Summary> {
        self.aggregate.iter().find(|s| s.metric == metric)
    }

    /// Writes `per_volume.csv`, `aggregate.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_err = |p: &Path, e: csv::Error| Error::format(p, e.to_string());

        let path = dir.join("per_volume.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        let mut header = vec!["volume_id", "spacing_z", "spacing_y", "spacing_x", "gl", "pl", "tp_gt", "tp_pred"];
        header.extend(METRIC_NAMES);
        w.write_record(&header).map_err(|e| csv_err(&path, e))?;
        for v in &self.volumes {
            let mut row = vec![v.volume_id.clone()];
            row.extend(v.spacing.iter().map(|s| s.to_string()));
            let c = v.counts;
            row.extend([c.gl, c.pl, c.tp_gt, c.tp_pred].iter().map(|n| n.to_string()));
            row.extend(v.values().iter().map(|&x| fmt_value(x)));
            w.write_record(&row).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("aggregate.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record(["metric", "mean", "std", "n", "mean_std"]).map_err(|e| csv_err(&path, e))?;
        for s in &self.aggregate {
            w.write_record([s.metric.clone(), fmt_value(s.mean), fmt_value(s.std), s.n.to_string(), fmt_mean_std(s)])
                .map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("report.json");
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format(&path, e.to_string()))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}
