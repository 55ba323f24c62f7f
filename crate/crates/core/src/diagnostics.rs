//! Per-position statistics of the final feature map and a scalar measure of
//! how much features near the border differ from those in the interior.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{batch_images, SliceSample};
use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::tensor::Tensor;

pub const SHIFT_EPS: f64 = 1e-8;
pub const DEFAULT_BAND: usize = 8;

/// Running count, mean and sum of squared deviations per position and channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAccumulator {
    height: usize,
    width: usize,
    channels: usize,
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl SpatialAccumulator {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        let n = height * width * channels;
        Self { height, width, channels, count: 0, mean: vec![0.0; n], m2: vec![0.0; n] }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Adds every sample of an NHWC batch.
    pub fn push_batch(&mut self, maps: &Tensor) -> Result<()> {
        if (maps.height(), maps.width(), maps.channels()) != (self.height, self.width, self.channels) {
            return Err(Error::Shape(format!(
                "feature map {}x{}x{} does not match {}x{}x{}",
                maps.height(),
                maps.width(),
                maps.channels(),
                self.height,
                self.width,
                self.channels
            )));
        }
        for b in 0..maps.batch() {
            self.count += 1;
            let k = self.count as f64;
            for (i, &x) in maps.sample(b).iter().enumerate() {
                let d = x - self.mean[i];
                self.mean[i] += d / k;
                self.m2[i] += d * (x - self.mean[i]);
            }
        }
        Ok(())
    }

    /// Combines two partial accumulators.
    pub fn merge(&mut self, other: &SpatialAccumulator) -> Result<()> {
        if (other.height, other.width, other.channels) != (self.height, self.width, self.channels) {
            return Err(Error::Shape("cannot merge accumulators of different shapes".into()));
        }
        if other.count == 0 {
            return Ok(());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * nb / n;
            self.m2[i] += other.m2[i] + d * d * na * nb / n;
        }
        self.count += other.count;
        Ok(())
    }

    pub fn finish(&self) -> Result<SpatialStats> {
        if self.count < 2 {
            return Err(Error::EmptyDataset(format!("need at least 2 samples, got {}", self.count)));
        }
        let n = self.count as f64;
        Ok(SpatialStats {
            height: self.height,
            width: self.width,
            channels: self.channels,
            counts: vec![self.count; self.height * self.width],
            mean_map: self.mean.clone(),
            std_map: self.m2.iter().map(|m| (m / n).max(0.0).sqrt()).collect(),
        })
    }
}

/// Per-position mean and population std, stored `H x W x C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialStats {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub counts: Vec<usize>,
    pub mean_map: Vec<f64>,
    pub std_map: Vec<f64>,
}

impl SpatialStats {
    pub fn mean(&self, i: usize, j: usize, c: usize) -> f64 {
        self.mean_map[(i * self.width + j) * self.channels + c]
    }

    pub fn std(&self, i: usize, j: usize, c: usize) -> f64 {
        self.std_map[(i * self.width + j) * self.channels + c]
    }

    pub fn channel_mean(&self, c: usize) -> Vec<f64> {
        self.mean_map.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn channel_std(&self, c: usize) -> Vec<f64> {
        self.std_map.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Statistics of `model`'s final feature map over `samples`, one batch at a
/// time, merged in sample order.
pub fn feature_stats(model: &SegModel, samples: &[SliceSample], batch_size: usize) -> Result<SpatialStats> {
    let first = samples.first().ok_or_else(|| Error::EmptyDataset("no samples".into()))?;
    let (h, w) = (first.image.height, first.image.width);
    if let Some(s) = samples.iter().find(|s| (s.image.height, s.image.width) != (h, w)) {
        return Err(Error::Shape(format!(
            "sample {}/{} is {}x{}, expected {h}x{w}",
            s.volume_id, s.slice_index, s.image.height, s.image.width
        )));
    }
    let mut total = SpatialAccumulator::new(h, w, model.backbone().feature_channels());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SliceSample> = chunk.iter().collect();
        let maps = model.features(&batch_images(&refs)?)?;
        let mut part = SpatialAccumulator::new(h, w, total.channels);
        part.push_batch(&maps)?;
        total.merge(&part)?;
    }
    total.finish()
}

fn edge_distance(height: usize, width: usize, i: usize, j: usize) -> usize {
    i.min(j).min(height - 1 - i).min(width - 1 - j)
}

fn check_band(stats: &SpatialStats, band: usize) -> Result<()> {
    if band == 0 || 2 * band >= stats.height.min(stats.width) {
        return Err(Error::InvalidArgument(format!("band {band} must be positive and below half of {}", stats.height.min(stats.width))));
    }
    Ok(())
}

/// Mean over channels of `|mean(a) - mean(b)| / (sqrt(mean variance) + eps)`,
/// with both means taken over the region masks and the variance over all
/// positions in either region.
fn region_score(stats: &SpatialStats, in_a: impl Fn(usize, usize) -> bool, in_b: impl Fn(usize, usize) -> bool) -> f64 {
    let mut score = 0.0;
    for c in 0..stats.channels {
        let (mut sa, mut na, mut sb, mut nb, mut var, mut nv) = (0.0, 0usize, 0.0, 0usize, 0.0, 0usize);
        for i in 0..stats.height {
            for j in 0..stats.width {
                let a = in_a(i, j);
                let b = in_b(i, j);
                if a {
                    sa += stats.mean(i, j, c);
                    na += 1;
                }
                if b {
                    sb += stats.mean(i, j, c);
                    nb += 1;
                }
                if a || b {
                    var += stats.std(i, j, c).powi(2);
                    nv += 1;
                }
            }
        }
        let diff = (sa / na as f64 - sb / nb as f64).abs();
        score += diff / ((var / nv as f64).sqrt() + SHIFT_EPS);
    }
    score / stats.channels as f64
}

/// Border band (pixels closer than `band` to an edge) against the interior.
pub fn shift_score(stats: &SpatialStats, band: usize) -> Result<f64> {
    check_band(stats, band)?;
    let (h, w) = (stats.height, stats.width);
    Ok(region_score(stats, |i, j| edge_distance(h, w, i, j) < band, |i, j| edge_distance(h, w, i, j) >= band))
}

/// Same score between the left and right halves of the interior, two regions
/// at matching distances from the border.
pub fn control_score(stats: &SpatialStats, band: usize) -> Result<f64> {
    check_band(stats, band)?;
    let (h, w) = (stats.height, stats.width);
    let inner = move |i, j| edge_distance(h, w, i, j) >= band;
    Ok(region_score(stats, move |i, j| inner(i, j) && 2 * j < w, move |i, j| inner(i, j) && 2 * j >= w))
}

const VIRIDIS: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

pub fn colormap(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let k = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - k as f64;
    let mut out = [0u8; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        let a = VIRIDIS[k][ch] as f64;
        let b = VIRIDIS[k + 1][ch] as f64;
        *o = (a + (b - a) * f).round() as u8;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapEntry {
    pub file: String,
    pub channel: usize,
    pub statistic: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapIndex {
    pub colormap: String,
    pub scaling: String,
    pub maps: Vec<HeatmapEntry>,
}

/// Min-max scaled RGB rendering; a constant map renders as the lowest colour.
pub fn render_map(values: &[f64], height: usize, width: usize) -> (image::RgbImage, f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let img = image::RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let v = values[y as usize * width + x as usize];
        let t = if range > 0.0 { (v - lo) / range } else { 0.0 };
        image::Rgb(colormap(t))
    });
    (img, lo, hi)
}

/// Writes `mean_cXXX.png` and `std_cXXX.png` per channel plus
/// `heatmaps.json` with the value range of every file.
pub fn export_heatmaps(stats: &SpatialStats, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let mut maps = Vec::new();
    for c in 0..stats.channels {
        for (statistic, values) in [("mean", stats.channel_mean(c)), ("std", stats.channel_std(c))] {
            let name = format!("{statistic}_c{c:03}.png");
            let path = dir.join(&name);
            let (img, min, max) = render_map(&values, stats.height, stats.width);
            img.save(&path).map_err(|e| Error::format(&path, e.to_string()))?;
            maps.push(HeatmapEntry { file: name, channel: c, statistic: statistic.into(), min, max });
            files.push(path);
        }
    }
    let index = HeatmapIndex { colormap: "viridis".into(), scaling: "per-file min-max".into(), maps };
    let path = dir.join("heatmaps.json");
    fs::write(&path, serde_json::to_string_pretty(&index).expect("plain json")).map_err(|e| Error::io(&path, e))?;
    Ok(files)
}
