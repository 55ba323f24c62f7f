//! On-disk dataset layout.
//!
//! ```text
//! root/manifest.json
//! root/<split>/<volume_id>/slice_0000.bin
//! ```
//!
//! A slice file is `"NRDSLICE"`, then `u32` version, height, width and
//! channels (little-endian), the image as `f32` in `H x W x C` order and the
//! label as `H x W` bytes of 0 or 1.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::volume::{Image, SliceSample};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::metrics::Spacing;
use crate::tensor::Tensor;

pub const SLICE_MAGIC: &[u8; 8] = b"NRDSLICE";
pub const SLICE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (expected train, val or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub id: String,
    pub split: Split,
    pub spacing: Spacing,
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub modalities: Vec<String>,
    /// Content hash of the inputs this volume was produced from.
    #[serde(default)]
    pub source_hash: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub volumes: Vec<VolumeRecord>,
    /// Free-form description of how the dataset was produced.
    #[serde(default)]
    pub provenance: serde_json::Value,
}

impl DatasetManifest {
    pub fn volumes_in(&self, split: Split) -> impl Iterator<Item = &VolumeRecord> {
        self.volumes.iter().filter(move |v| v.split == split)
    }

    pub fn find(&self, id: &str) -> Option<&VolumeRecord> {
        self.volumes.iter().find(|v| v.id == id)
    }

    /// Every volume id must be unique, which keeps splits disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<&str> = self.volumes.iter().map(|v| v.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("volume id `{}` appears more than once", w[0])));
        }
        Ok(())
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format(&path, e.to_string()))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

pub fn volume_dir(root: &Path, record: &VolumeRecord) -> PathBuf {
    root.join(record.split.as_str()).join(&record.id)
}

pub fn slice_path(root: &Path, record: &VolumeRecord, index: usize) -> PathBuf {
    volume_dir(root, record).join(format!("slice_{index:04}.bin"))
}

pub fn encode_sample(sample: &SliceSample) -> Result<Vec<u8>> {
    let img = &sample.image;
    if sample.label.dims() != [1, img.height, img.width] {
        return Err(Error::Shape(format!("label {:?} does not match image {}x{}", sample.label.dims(), img.height, img.width)));
    }
    let mut out = Vec::with_capacity(24 + img.values.len() * 4 + sample.label.len());
    out.extend_from_slice(SLICE_MAGIC);
    for v in [SLICE_VERSION, img.height as u32, img.width as u32, img.channels as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &img.values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.extend_from_slice(sample.label.data());
    Ok(out)
}

pub fn decode_sample(bytes: &[u8], path: &Path, volume_id: &str, slice_index: usize) -> Result<SliceSample> {
    let bad = |m: String| Error::format(path, m);
    if bytes.len() < 24 || &bytes[..8] != SLICE_MAGIC {
        return Err(bad("not a slice file (bad magic)".into()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().expect("4 bytes")) as usize;
    if word(0) != SLICE_VERSION as usize {
        return Err(bad(format!("unsupported slice version {}", word(0))));
    }
    let (h, w, c) = (word(1), word(2), word(3));
    let n = h * w * c;
    if bytes.len() != 24 + 4 * n + h * w {
        return Err(bad(format!("size {} does not match {h}x{w}x{c}", bytes.len())));
    }
    let values = bytes[24..24 + 4 * n].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
    let label = Mask::from_vec([1, h, w], bytes[24 + 4 * n..].to_vec()).map_err(|e| bad(e.to_string()))?;
    Ok(SliceSample { image: Image { height: h, width: w, channels: c, values }, label, volume_id: volume_id.to_string(), slice_index })
}

/// Writes the slices of one volume, replacing any previous files.
pub fn write_volume(root: &Path, record: &VolumeRecord, samples: &[SliceSample]) -> Result<()> {
    if samples.len() != record.slices {
        return Err(Error::Shape(format!("volume {} declares {} slices, got {}", record.id, record.slices, samples.len())));
    }
    let dir = volume_dir(root, record);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (k, s) in samples.iter().enumerate() {
        let path = slice_path(root, record, k);
        fs::write(&path, encode_sample(s)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_volume_samples(root: &Path, record: &VolumeRecord) -> Result<Vec<SliceSample>> {
    (0..record.slices)
        .map(|k| {
            let path = slice_path(root, record, k);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let s = decode_sample(&bytes, &path, &record.id, k)?;
            if (s.image.height, s.image.width, s.image.channels) != (record.height, record.width, record.channels) {
                return Err(Error::format(&path, "slice shape disagrees with the manifest"));
            }
            Ok(s)
        })
        .collect()
}

/// Prepared dataset rooted at a directory with a manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(Self { root: root.to_path_buf(), manifest: DatasetManifest::read(root)? })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    /// All slices of a split, volume by volume in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<SliceSample>> {
        let mut out = Vec::new();
        for record in self.manifest.volumes_in(split) {
            out.extend(read_volume_samples(&self.root, record)?);
        }
        Ok(out)
    }

    pub fn load_volume(&self, record: &VolumeRecord) -> Result<Vec<SliceSample>> {
        read_volume_samples(&self.root, record)
    }
}

/// Restacks per-slice labels into one `D x H x W` mask.
pub fn stack_labels(samples: &[SliceSample]) -> Result<Mask> {
    let planes: Vec<Mask> = samples.iter().map(|s| s.label.clone()).collect();
    Mask::stack(&planes)
}

/// Images of `samples` as one NHWC batch.
pub fn batch_images(samples: &[&SliceSample]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::EmptyDataset("empty batch".into()))?;
    let (h, w, c) = (first.image.height, first.image.width, first.image.channels);
    let mut data = Vec::with_capacity(samples.len() * h * w * c);
    for s in samples {
        if (s.image.height, s.image.width, s.image.channels) != (h, w, c) {
            return Err(Error::Shape(format!(
                "sample {}/{} is {}x{}x{}, expected {h}x{w}x{c}",
                s.volume_id, s.slice_index, s.image.height, s.image.width, s.image.channels
            )));
        }
        data.extend_from_slice(&s.image.values);
    }
    Tensor::from_vec([samples.len(), h, w, c], data)
}

pub fn batch_labels(samples: &[&SliceSample]) -> Vec<f64> {
    samples.iter().flat_map(|s| s.label.data().iter().map(|&v| v as f64)).collect()
}

/// SHA-256 over every file of the dataset in path order.
pub fn content_hash(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, k: usize) -> SliceSample {
        SliceSample {
            image: Image { height: 2, width: 3, channels: 2, values: (0..12).map(|v| v as f64 / 16.0).collect() },
            label: Mask::from_fn([1, 2, 3], |_, y, x| y == x),
            volume_id: id.into(),
            slice_index: k,
        }
    }

    fn record(id: &str, split: Split, slices: usize) -> VolumeRecord {
        VolumeRecord {
            id: id.into(),
            split,
            spacing: [3.0, 1.0, 1.0],
            slices,
            height: 2,
            width: 3,
            channels: 2,
            modalities: vec!["t1".into(), "flair".into()],
            source_hash: None,
        }
    }

    #[test]
    fn sample_round_trip() {
        let s = sample("v", 0);
        let bytes = encode_sample(&s).unwrap();
        assert_eq!(bytes.len(), 24 + 12 * 4 + 6);
        assert_eq!(decode_sample(&bytes, Path::new("x"), "v", 0).unwrap(), s);
        assert!(decode_sample(&bytes[..30], Path::new("x"), "v", 0).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = DatasetManifest {
            volumes: vec![record("a", Split::Train, 2), record("b", Split::Test, 1)],
            provenance: serde_json::Value::Null,
        };
        write_volume(dir.path(), &manifest.volumes[0], &[sample("a", 0), sample("a", 1)]).unwrap();
        write_volume(dir.path(), &manifest.volumes[1], &[sample("b", 0)]).unwrap();
        manifest.write(dir.path()).unwrap();
        assert!(dir.path().join("train/a/slice_0001.bin").exists());
        let ds = Dataset::open(dir.path()).unwrap();
        let train = ds.load_split(Split::Train).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(train[1].slice_index, 1);
        assert!(ds.load_split(Split::Val).unwrap().is_empty());
        let refs: Vec<&SliceSample> = train.iter().collect();
        assert_eq!(batch_images(&refs).unwrap().shape(), [2, 2, 3, 2]);
        assert_eq!(stack_labels(&train).unwrap().dims(), [2, 2, 3]);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let m = DatasetManifest {
            volumes: vec![record("a", Split::Train, 1), record("a", Split::Test, 1)],
            provenance: serde_json::Value::Null,
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn split_names() {
        assert_eq!("val".parse::<Split>().unwrap(), Split::Val);
        assert!("dev".parse::<Split>().is_err());
    }
}
