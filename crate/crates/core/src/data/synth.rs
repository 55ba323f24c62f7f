//! Synthetic dataset where the label of otherwise identical blobs depends
//! only on how close the blob centre lies to the image border.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::store::{write_volume, DatasetManifest, Split, VolumeRecord};
use super::volume::{Image, SliceSample};
use crate::error::{Error, Result};
use crate::mask::Mask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionRule {
    /// Blobs whose centre lies within the band are foreground.
    #[default]
    Border,
    /// Blobs whose centre lies outside the band are foreground.
    Interior,
    /// One of the two, chosen by a fair coin seeded from the config seed.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub blobs_min: usize,
    pub blobs_max: usize,
    pub blob_radius: usize,
    /// Minimum free pixels between two blobs.
    pub blob_gap: usize,
    /// Width of the border band in pixels.
    pub band: usize,
    pub rule: PositionRule,
    pub background: f64,
    pub blob_intensity: f64,
    pub noise: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            blobs_min: 4,
            blobs_max: 8,
            blob_radius: 3,
            blob_gap: 2,
            band: 12,
            rule: PositionRule::Border,
            background: 0.2,
            blob_intensity: 0.8,
            noise: 0.2,
            train: 200,
            val: 40,
            test: 40,
            seed: 7,
            max_retries: 1000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        if 2 * self.band >= self.height.min(self.width) {
            return bad(format!("band {} must be below half the smaller image side ({})", self.band, self.height.min(self.width)));
        }
        if self.band <= self.blob_radius {
            return bad(format!("band {} must exceed the blob radius {}", self.band, self.blob_radius));
        }
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return bad("train, val and test counts must be at least 1".into());
        }
        if self.blobs_min < 2 || self.blobs_max < self.blobs_min {
            return bad(format!("need 2 <= blobs_min <= blobs_max, got {}..{}", self.blobs_min, self.blobs_max));
        }
        if 2 * self.blob_radius + 1 > self.height.min(self.width) {
            return bad("blob does not fit in the image".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a non-negative number".into());
        }
        Ok(())
    }

    /// The rule in force, with `Random` resolved.
    pub fn resolved_rule(&self) -> PositionRule {
        match self.rule {
            PositionRule::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_c0de);
                if rng.random_bool(0.5) {
                    PositionRule::Border
                } else {
                    PositionRule::Interior
                }
            }
            r => r,
        }
    }

    pub fn edge_distance(&self, cy: usize, cx: usize) -> usize {
        cy.min(cx).min(self.height - 1 - cy).min(self.width - 1 - cx)
    }

    pub fn in_band(&self, cy: usize, cx: usize) -> bool {
        self.edge_distance(cy, cx) < self.band
    }

    pub fn is_foreground(&self, rule: PositionRule, cy: usize, cx: usize) -> bool {
        match rule {
            PositionRule::Interior => !self.in_band(cy, cx),
            _ => self.in_band(cy, cx),
        }
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blob {
    pub cy: usize,
    pub cx: usize,
    pub foreground: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub split: Split,
    pub sample: SliceSample,
    pub blobs: Vec<Blob>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub rule: PositionRule,
    pub samples: Vec<SynthSample>,
}

fn in_disk(r: usize, cy: usize, cx: usize, y: usize, x: usize) -> bool {
    let dy = y as isize - cy as isize;
    let dx = x as isize - cx as isize;
    dy * dy + dx * dx <= (r * r) as isize
}

/// Ground truth implied by blob metadata.
pub fn label_from_blobs(config: &SynthConfig, blobs: &[Blob]) -> Mask {
    let r = config.blob_radius;
    Mask::from_fn([1, config.height, config.width], |_, y, x| blobs.iter().any(|b| b.foreground && in_disk(r, b.cy, b.cx, y, x)))
}

fn place(config: &SynthConfig, rng: &mut ChaCha8Rng, blobs: &[Blob], want: Option<bool>, rule: PositionRule) -> Option<(usize, usize)> {
    let r = config.blob_radius;
    let min_sep = (2 * r + 1 + config.blob_gap) as isize;
    for _ in 0..config.max_retries {
        let cy = rng.random_range(r..config.height - r);
        let cx = rng.random_range(r..config.width - r);
        if want.is_some_and(|w| config.is_foreground(rule, cy, cx) != w) {
            continue;
        }
        let clear = blobs.iter().all(|b| {
            let dy = b.cy as isize - cy as isize;
            let dx = b.cx as isize - cx as isize;
            dy * dy + dx * dx >= min_sep * min_sep
        });
        if clear {
            return Some((cy, cx));
        }
    }
    None
}

/// Sample `index` of the dataset; depends only on the config and `index`.
pub fn generate_sample(config: &SynthConfig, rule: PositionRule, index: usize) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(index as u64));
    let count = rng.random_range(config.blobs_min..=config.blobs_max);
    let mut blobs = Vec::with_capacity(count);
    for k in 0..count {
        let want = match k {
            0 => Some(true),
            1 => Some(false),
            _ => None,
        };
        let (cy, cx) = place(config, &mut rng, &blobs, want, rule).ok_or_else(|| {
            Error::Generation(format!("could not place blob {k} of sample {index} after {} attempts", config.max_retries))
        })?;
        blobs.push(Blob { cy, cx, foreground: config.is_foreground(rule, cy, cx) });
    }
    let (h, w) = (config.height, config.width);
    let noise = Normal::new(0.0, config.noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut values = vec![config.background; h * w];
    for b in &blobs {
        for y in b.cy - config.blob_radius..=b.cy + config.blob_radius {
            for x in b.cx - config.blob_radius..=b.cx + config.blob_radius {
                if in_disk(config.blob_radius, b.cy, b.cx, y, x) {
                    values[y * w + x] = config.blob_intensity;
                }
            }
        }
    }
    for v in values.iter_mut() {
        let n = if config.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        *v = (*v + n).clamp(0.0, 1.0);
    }
    let sample = SliceSample {
        image: Image { height: h, width: w, channels: 1, values },
        label: label_from_blobs(config, &blobs),
        volume_id: volume_id(index),
        slice_index: 0,
    };
    Ok(SynthSample { split: config.split_of(index), sample, blobs })
}

pub fn volume_id(index: usize) -> String {
    format!("synth_{index:05}")
}

pub fn generate_border_bias(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let rule = config.resolved_rule();
    let samples = (0..config.total()).into_par_iter().map(|i| generate_sample(config, rule, i)).collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset { config: config.clone(), rule, samples })
}

#[derive(Serialize, Deserialize)]
struct BlobRecord {
    volume_id: String,
    blobs: Vec<Blob>,
}

impl SynthDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SynthSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Writes every sample as a one-slice volume plus `synth.json` with the
    /// config, the resolved rule and all blob positions.
    pub fn write(&self, root: &Path) -> Result<DatasetManifest> {
        let records: Vec<VolumeRecord> = self
            .samples
            .iter()
            .map(|s| VolumeRecord {
                id: s.sample.volume_id.clone(),
                split: s.split,
                spacing: [1.0, 1.0, 1.0],
                slices: 1,
                height: self.config.height,
                width: self.config.width,
                channels: 1,
                modalities: vec!["synthetic".into()],
                source_hash: None,
            })
            .collect();
        records.par_iter().zip(self.samples.par_iter()).try_for_each(|(r, s)| write_volume(root, r, std::slice::from_ref(&s.sample)))?;
        let manifest = DatasetManifest {
            volumes: records,
            provenance: serde_json::json!({ "source": "synth", "config": self.config, "rule": self.rule }),
        };
        manifest.write(root)?;
        let blobs: Vec<BlobRecord> =
            self.samples.iter().map(|s| BlobRecord { volume_id: s.sample.volume_id.clone(), blobs: s.blobs.clone() }).collect();
        let meta = serde_json::json!({ "config": self.config, "rule": self.rule, "samples": blobs });
        let path = root.join("synth.json");
        fs::write(&path, serde_json::to_string_pretty(&meta).expect("plain json")).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}
