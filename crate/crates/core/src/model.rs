//! Backbone plus head, trained end to end.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneTrace};
use crate::checkpoint::{Checkpoint, NamedArray};
use crate::error::{Error, Result};
use crate::heads::{Head, HeadCache, HeadConfig, HeadKind, LogitMap};
use crate::nn::{Param, Parameterized};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, kind: HeadKind) -> Self {
        Self { backbone, head: HeadConfig::new(kind) }
    }
}

#[derive(Clone, Debug)]
pub struct SegModel {
    config: ModelConfig,
    seed: u64,
    backbone: Backbone,
    head: Head,
}

pub struct ModelTrace {
    backbone: BackboneTrace,
    head: HeadCache,
}

impl SegModel {
    /// Backbone parameters are drawn first and the head continues the same
    /// random stream, so two models that differ only in head kind share
    /// their backbone initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::with_rng(config.backbone.clone(), seed, &mut rng)?;
        let head = Head::new(config.head.clone(), config.backbone.feature_channels, &mut rng)?;
        Ok(Self { config, seed, backbone, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Head {
        &mut self.head
    }

    pub fn forward(&self, images: &Tensor) -> Result<(LogitMap, ModelTrace)> {
        let (features, backbone) = self.backbone.extract_features(images)?;
        let (logits, head) = self.head.forward(features)?;
        Ok((logits, ModelTrace { backbone, head }))
    }

    pub fn predict(&self, images: &Tensor) -> Result<LogitMap> {
        Ok(self.forward(images)?.0)
    }

    /// Accumulates gradients of every parameter given `dL/dlogits`.
    pub fn backward(&mut self, trace: &ModelTrace, d_logits: &[f64]) {
        let d_features = self.head.backward(&trace.head, d_logits);
        self.backbone.backward(&trace.backbone, &d_features);
    }

    /// Final feature map, for diagnostics.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        self.backbone.features(images)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut arrays = Vec::new();
        self.visit_params(&mut |p| arrays.push(NamedArray { name: p.name.clone(), shape: p.shape.clone(), values: p.value.clone() }));
        Checkpoint {
            kind: "model".into(),
            model: self.config.clone(),
            seed: self.seed,
            epoch: None,
            arrays,
            extra: serde_json::Value::Null,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(ckpt.model.clone(), ckpt.seed)?;
        model.load_params(ckpt)?;
        Ok(model)
    }

    /// Overwrites parameters with the same-named arrays of `ckpt`.
    pub fn load_params(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut missing = None;
        self.visit_params_mut(&mut |p: &mut Param| match ckpt.array(&p.name) {
            Some(a) if a.shape == p.shape => p.value.copy_from_slice(&a.values),
            _ => {
                missing.get_or_insert_with(|| p.name.clone());
            }
        });
        match missing {
            Some(name) => Err(Error::Config(format!("checkpoint lacks a matching array for `{name}`"))),
            None => Ok(()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Parameterized for SegModel {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.backbone.visit_params(f);
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }
}
