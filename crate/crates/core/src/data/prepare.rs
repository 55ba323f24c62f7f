//! Turns raw volumes listed in a TOML manifest into the slice layout.
//!
//! ```toml
//! crop = [160, 224]          # optional
//! normalization = "minmax"   # or "zscore"
//! scope = "volume"           # or "slice"
//! foreground_values = [1]    # label values counted as foreground; empty = any non-zero
//!
//! [[volume]]
//! id = "wmh_000"
//! split = "train"
//! label = "000/wmh.nii.gz"
//! modalities = [{ tag = "T1", path = "000/t1.nii.gz" }, { tag = "FLAIR", path = "000/flair.nii.gz" }]
//! ```
//!
//! Relative paths resolve against the manifest's directory. Every slice is
//! cropped first and then normalized, per modality.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::io::{read_label, read_volume};
use super::store::{read_volume_samples, write_volume, DatasetManifest, Split, VolumeRecord};
use super::volume::{center_crop, center_crop_mask, concat_modalities, normalize_values, NormMode, NormScope, Plane, SliceSample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityEntry {
    pub tag: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeEntry {
    pub id: String,
    pub split: Split,
    pub label: PathBuf,
    pub modalities: Vec<ModalityEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareManifest {
    #[serde(default)]
    pub crop: Option<[usize; 2]>,
    #[serde(default)]
    pub normalization: NormMode,
    #[serde(default)]
    pub scope: NormScope,
    #[serde(default)]
    pub foreground_values: Vec<i64>,
    #[serde(rename = "volume")]
    pub volumes: Vec<VolumeEntry>,
}

impl PrepareManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for v in &mut m.volumes {
            v.label = base.join(&v.label);
            for md in &mut v.modalities {
                md.path = base.join(&md.path);
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.volumes.is_empty() {
            return Err(Error::Config("manifest lists no volumes".into()));
        }
        if let Some(v) = self.volumes.iter().find(|v| v.modalities.is_empty()) {
            return Err(Error::Config(format!("volume `{}` lists no modalities", v.id)));
        }
        if let Some([h, w]) = self.crop {
            if h == 0 || w == 0 {
                return Err(Error::Config("crop size must be positive".into()));
            }
        }
        let mut ids: Vec<&str> = self.volumes.iter().map(|v| v.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("volume id `{}` appears more than once", w[0])));
        }
        Ok(())
    }

    /// Hash of the settings and every input file of one volume.
    fn volume_hash(&self, entry: &VolumeEntry) -> Result<String> {
        let mut h = Sha256::new();
        let settings = serde_json::json!({
            "crop": self.crop,
            "normalization": self.normalization,
            "scope": self.scope,
            "foreground_values": self.foreground_values,
            "split": entry.split,
            "tags": entry.modalities.iter().map(|m| &m.tag).collect::<Vec<_>>(),
        });
        h.update(settings.to_string().as_bytes());
        for path in entry.modalities.iter().map(|m| &m.path).chain(std::iter::once(&entry.label)) {
            h.update(fs::read(path).map_err(|e| Error::io(path, e))?);
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PrepareSummary {
    pub written: Vec<String>,
    pub skipped: Vec<String>,
}

fn process(manifest: &PrepareManifest, entry: &VolumeEntry, hash: String) -> Result<(VolumeRecord, Vec<SliceSample>)> {
    let (label, label_spacing) = read_label(&entry.label, &manifest.foreground_values)?;
    let mut channels: Vec<Vec<Plane>> = Vec::new();
    let mut spacing = label_spacing;
    for (k, m) in entry.modalities.iter().enumerate() {
        let vol = read_volume(&m.path, &m.tag)?;
        if vol.dims() != label.dims() {
            return Err(Error::format(
                &m.path,
                format!("modality {} has dims {:?} but the label has {:?}", m.tag, vol.dims(), label.dims()),
            ));
        }
        if k == 0 {
            spacing = vol.spacing();
        }
        let mut planes: Vec<Plane> = (0..vol.dims()[0])
            .map(|z| match manifest.crop {
                Some([h, w]) => center_crop(&vol.plane(z), h, w),
                None => Ok(vol.plane(z)),
            })
            .collect::<Result<_>>()
            .map_err(|e| Error::format(&m.path, e.to_string()))?;
        match manifest.scope {
            NormScope::Slice => planes.iter_mut().for_each(|p| normalize_values(&mut p.values, manifest.normalization)),
            NormScope::Volume => {
                let mut all: Vec<f64> = planes.iter().flat_map(|p| p.values.iter().copied()).collect();
                normalize_values(&mut all, manifest.normalization);
                let n = planes.first().map_or(0, |p| p.values.len());
                for (p, chunk) in planes.iter_mut().zip(all.chunks(n.max(1))) {
                    p.values.copy_from_slice(chunk);
                }
            }
        }
        channels.push(planes);
    }
    let label = match manifest.crop {
        Some([h, w]) => center_crop_mask(&label, h, w).map_err(|e| Error::format(&entry.label, e.to_string()))?,
        None => label,
    };
    let depth = label.dims()[0];
    let mut samples = Vec::with_capacity(depth);
    for z in 0..depth {
        let planes: Vec<Plane> = channels.iter().map(|c| c[z].clone()).collect();
        samples.push(SliceSample {
            image: concat_modalities(&planes)?,
            label: label.plane(z),
            volume_id: entry.id.clone(),
            slice_index: z,
        });
    }
    let [_, h, w] = label.dims();
    let record = VolumeRecord {
        id: entry.id.clone(),
        split: entry.split,
        spacing,
        slices: depth,
        height: h,
        width: w,
        channels: entry.modalities.len(),
        modalities: entry.modalities.iter().map(|m| m.tag.clone()).collect(),
        source_hash: Some(hash),
    };
    Ok((record, samples))
}

/// Volumes whose recorded source hash matches and whose slices load cleanly
/// are left untouched.
pub fn prepare_dataset(manifest: &PrepareManifest, out: &Path) -> Result<PrepareSummary> {
    manifest.validate()?;
    let existing = DatasetManifest::read(out).ok();
    let results: Vec<Result<(VolumeRecord, bool)>> = manifest
        .volumes
        .par_iter()
        .map(|entry| {
            let hash = manifest.volume_hash(entry)?;
            if let Some(old) = existing.as_ref().and_then(|m| m.find(&entry.id)) {
                if old.source_hash.as_deref() == Some(hash.as_str()) && read_volume_samples(out, old).is_ok() {
                    return Ok((old.clone(), false));
                }
            }
            let (record, samples) = process(manifest, entry, hash)?;
            write_volume(out, &record, &samples)?;
            Ok((record, true))
        })
        .collect();
    let mut summary = PrepareSummary::default();
    let mut volumes = Vec::with_capacity(results.len());
    for r in results {
        let (record, written) = r?;
        if written {
            summary.written.push(record.id.clone());
        } else {
            summary.skipped.push(record.id.clone());
        }
        volumes.push(record);
    }
    let provenance = serde_json::json!({
        "source": "prepare",
        "crop": manifest.crop,
        "normalization": manifest.normalization,
        "scope": manifest.scope,
    });
    let new_manifest = DatasetManifest { volumes, provenance };
    if existing.as_ref() != Some(&new_manifest) {
        new_manifest.write(out)?;
    }
    Ok(summary)
}
