//! Experiment configuration file (TOML).
//!
//! ```toml
//! seeds = [0, 1, 2]
//! out = "runs/wmh_nerdc"          # optional, `--out` wins
//!
//! [dataset]
//! path = "data/wmh"               # prepared dataset, or:
//! # [dataset.synth]               # generate a synthetic one into <out>/dataset
//! # band = 12
//!
//! [model]
//! preset = "low"                  # or filters = [8, 16, 32, 64, 128]
//! head = "nerdc"
//! calibrator_hidden = [64, 64]
//!
//! [train]
//! epochs = 90
//!
//! [evaluation]
//! connectivity = 26
//! ldice_factor = 2
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Normalization, Preset};
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadKind, DEFAULT_CALIBRATOR_HIDDEN};
use crate::metrics::{Connectivity, Conventions};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub filters: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_channels: Option<usize>,
    pub normalization: Normalization,
    pub head: HeadKind,
    pub calibrator_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub constrain_scale: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: None,
            filters: None,
            feature_channels: None,
            normalization: Normalization::Instance,
            head: HeadKind::Baseline,
            calibrator_hidden: DEFAULT_CALIBRATOR_HIDDEN.to_vec(),
            classifier_hidden: Vec::new(),
            constrain_scale: false,
        }
    }
}

impl ModelSection {
    pub fn filters(&self) -> Result<Vec<usize>> {
        match (&self.preset, &self.filters) {
            (Some(_), Some(_)) => Err(Error::Config("model: give either `preset` or `filters`, not both".into())),
            (Some(p), None) => Ok(p.filters().to_vec()),
            (None, Some(f)) => Ok(f.clone()),
            (None, None) => Ok(Preset::Low.filters().to_vec()),
        }
    }

    pub fn model_config(&self, in_channels: usize) -> Result<ModelConfig> {
        let mut backbone = BackboneConfig::with_filters(self.filters()?, in_channels);
        if let Some(c) = self.feature_channels {
            backbone.feature_channels = c;
        }
        backbone.normalization = self.normalization;
        backbone.validate()?;
        let head = HeadConfig {
            kind: self.head,
            calibrator_hidden: self.calibrator_hidden.clone(),
            classifier_hidden: self.classifier_hidden.clone(),
            constrain_scale: self.constrain_scale,
        };
        head.validate()?;
        Ok(ModelConfig { backbone, head })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub connectivity: Connectivity,
    pub ldice_factor: u32,
    pub threshold: f64,
    /// Test slices rendered as overlay panels after training.
    pub overlay_slices: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let c = Conventions::default();
        Self { connectivity: c.connectivity, ldice_factor: c.ldice_factor, threshold: 0.5, overlay_slices: 2 }
    }
}

impl EvaluationSection {
    pub fn conventions(&self) -> Conventions {
        Conventions { connectivity: self.connectivity, ldice_factor: self.ldice_factor }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    /// Parses the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = &mut cfg.dataset.path {
            *p = base.join(&*p);
        }
        if let Some(o) = &mut cfg.out {
            *o = base.join(&*o);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config(format!("seeds must be distinct, got {:?}", self.seeds)));
        }
        match (&self.dataset.path, &self.dataset.synth) {
            (Some(_), Some(_)) => return Err(Error::Config("dataset: give either `path` or `synth`, not both".into())),
            (None, None) => return Err(Error::Config("dataset: one of `path` or `synth` is required".into())),
            (None, Some(s)) => s.validate()?,
            _ => {}
        }
        self.model.model_config(1)?;
        self.train.validate()?;
        self.evaluation.conventions().validate()?;
        if !(self.evaluation.threshold > 0.0 && self.evaluation.threshold < 1.0) {
            return Err(Error::Config("evaluation.threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Creates `dir` and checks that files can be written into it.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write_probe");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}
