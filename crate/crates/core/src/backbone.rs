//! Five-level 2D U-Net producing a per-pixel feature map of the same spatial
//! size as its input.
//!
//! Encoder level `l` is two `conv3x3 -> norm -> ReLU` units with `filters[l]`
//! channels, followed by 2x2 max pooling for the first four levels. Each
//! decoder level upsamples by nearest neighbour, applies one
//! `conv3x3 -> norm -> ReLU` unit to reduce to `filters[l]` channels,
//! concatenates the encoder skip (skip first) and applies two more units. A
//! final 1x1 convolution projects to `feature_channels`. All 3x3 convolutions
//! pad with zeros.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, max_pool2, max_pool2_backward, relu_backward, relu_inplace, split_channels, upsample2, upsample2_backward, Conv2d,
    InstanceNorm, NormCache, Param, Parameterized,
};
use crate::tensor::Tensor;

/// Output of the backbone: `B x H x W x C` features.
pub type FeatureMap = Tensor;

/// Number of resolution levels; the input must be divisible by `2^(LEVELS-1)`.
pub const LEVELS: usize = 5;
pub const SPATIAL_DIVISOR: usize = 1 << (LEVELS - 1);

pub const LOW_FILTERS: [usize; LEVELS] = [16, 32, 64, 128, 256];
pub const HIGH_FILTERS: [usize; LEVELS] = [32, 64, 128, 256, 512];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Instance,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Low,
    High,
}

impl Preset {
    pub fn filters(self) -> [usize; LEVELS] {
        match self {
            Preset::Low => LOW_FILTERS,
            Preset::High => HIGH_FILTERS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub filters: Vec<usize>,
    pub feature_channels: usize,
    #[serde(default = "default_padding")]
    pub padding_mode: PaddingMode,
    #[serde(default = "default_norm")]
    pub normalization: Normalization,
}

fn default_padding() -> PaddingMode {
    PaddingMode::Zeros
}

fn default_norm() -> Normalization {
    Normalization::Instance
}

impl BackboneConfig {
    /// Preset filters with `feature_channels` equal to the first filter width.
    pub fn preset(preset: Preset, in_channels: usize) -> Self {
        Self::with_filters(preset.filters().to_vec(), in_channels)
    }

    pub fn with_filters(filters: Vec<usize>, in_channels: usize) -> Self {
        Self {
            in_channels,
            feature_channels: filters.first().copied().unwrap_or(1),
            filters,
            padding_mode: PaddingMode::Zeros,
            normalization: Normalization::Instance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("backbone needs at least one input channel".into()));
        }
        if self.feature_channels == 0 {
            return Err(Error::Config("feature_channels must be at least 1".into()));
        }
        if self.filters.len() != LEVELS {
            return Err(Error::Config(format!("backbone needs exactly {LEVELS} filter widths, got {}", self.filters.len())));
        }
        if self.filters.iter().any(|&f| f == 0) {
            return Err(Error::Config("filter widths must be at least 1".into()));
        }
        if self.filters.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!("filter widths must be non-decreasing: {:?}", self.filters)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvUnit {
    conv: Conv2d,
    norm: Option<InstanceNorm>,
}

struct UnitCache {
    input: Tensor,
    norm: Option<NormCache>,
    output: Tensor,
}

impl ConvUnit {
    fn new(name: &str, cin: usize, cout: usize, norm: Normalization, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), cin, cout, 3, rng),
            norm: match norm {
                Normalization::Instance => Some(InstanceNorm::new(&format!("{name}.norm"), cout)),
                Normalization::None => None,
            },
        }
    }

    fn forward(&self, x: Tensor) -> (Tensor, UnitCache) {
        let h = self.conv.forward(&x);
        let (mut y, norm) = match &self.norm {
            Some(n) => {
                let (y, c) = n.forward(&h);
                (y, Some(c))
            }
            None => (h, None),
        };
        relu_inplace(&mut y);
        let cache = UnitCache { input: x, norm, output: y.clone() };
        (y, cache)
    }

    fn backward(&mut self, cache: &UnitCache, dy: Tensor) -> Tensor {
        let mut g = relu_backward(&cache.output, dy);
        if let (Some(n), Some(c)) = (&mut self.norm, &cache.norm) {
            g = n.backward(c, &g);
        }
        self.conv.backward(&cache.input, &g)
    }
}

impl Parameterized for ConvUnit {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.conv.visit_params(f);
        if let Some(n) = &self.norm {
            n.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_params_mut(f);
        if let Some(n) = &mut self.norm {
            n.visit_params_mut(f);
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    first: ConvUnit,
    second: ConvUnit,
}

type BlockCache = (UnitCache, UnitCache);

impl Block {
    fn new(name: &str, cin: usize, cout: usize, norm: Normalization, rng: &mut ChaCha8Rng) -> Self {
        Self {
            first: ConvUnit::new(&format!("{name}.0"), cin, cout, norm, rng),
            second: ConvUnit::new(&format!("{name}.1"), cout, cout, norm, rng),
        }
    }

    fn forward(&self, x: Tensor) -> (Tensor, BlockCache) {
        let (h, c1) = self.first.forward(x);
        let (y, c2) = self.second.forward(h);
        (y, (c1, c2))
    }

    fn backward(&mut self, cache: &BlockCache, dy: Tensor) -> Tensor {
        let g = self.second.backward(&cache.1, dy);
        self.first.backward(&cache.0, g)
    }
}

impl Parameterized for Block {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.first.visit_params(f);
        self.second.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.first.visit_params_mut(f);
        self.second.visit_params_mut(f);
    }
}

#[derive(Clone, Debug)]
struct UpStage {
    up: ConvUnit,
    block: Block,
}

impl Parameterized for UpStage {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.up.visit_params(f);
        self.block.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.up.visit_params_mut(f);
        self.block.visit_params_mut(f);
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    seed: u64,
    encoder: Vec<Block>,
    /// Indexed by the level the stage produces (0..LEVELS-1).
    decoder: Vec<UpStage>,
    projection: Conv2d,
}

/// Intermediate values kept by [`Backbone::extract_features`] for the
/// backward pass.
pub struct BackboneTrace {
    encoder: Vec<BlockCache>,
    pools: Vec<(Vec<usize>, [usize; 4])>,
    decoder: Vec<(UnitCache, BlockCache)>,
    projection_input: Tensor,
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(config, seed, &mut rng)
    }

    /// Builds with a caller-owned RNG so that further components can draw
    /// from the same stream.
    pub fn with_rng(config: BackboneConfig, seed: u64, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let f = &config.filters;
        let norm = config.normalization;
        let encoder = (0..LEVELS)
            .map(|l| {
                let cin = if l == 0 { config.in_channels } else { f[l - 1] };
                Block::new(&format!("backbone.enc{l}"), cin, f[l], norm, rng)
            })
            .collect();
        let decoder = (0..LEVELS - 1)
            .map(|l| UpStage {
                up: ConvUnit::new(&format!("backbone.dec{l}.up"), f[l + 1], f[l], norm, rng),
                block: Block::new(&format!("backbone.dec{l}.block"), 2 * f[l], f[l], norm, rng),
            })
            .collect();
        let projection = Conv2d::new("backbone.proj", f[0], config.feature_channels, 1, rng);
        Ok(Self { config, seed, encoder, decoder, projection })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn feature_channels(&self) -> usize {
        self.config.feature_channels
    }

    pub fn check_input(&self, images: &Tensor) -> Result<()> {
        let [_, h, w, c] = images.shape();
        for (axis, size) in [("height", h), ("width", w)] {
            if size == 0 || size % SPATIAL_DIVISOR != 0 {
                return Err(Error::Shape(format!("input {axis} {size} is not a positive multiple of {SPATIAL_DIVISOR}")));
            }
        }
        if c != self.config.in_channels {
            return Err(Error::Shape(format!("input has {c} channels, backbone expects {}", self.config.in_channels)));
        }
        if !images.all_finite() {
            return Err(Error::InvalidArgument("input images contain non-finite values".into()));
        }
        Ok(())
    }

    /// Runs the network and keeps what the backward pass needs.
    pub fn extract_features(&self, images: &Tensor) -> Result<(FeatureMap, BackboneTrace)> {
        self.check_input(images)?;
        let mut encoder = Vec::with_capacity(LEVELS);
        let mut pools = Vec::with_capacity(LEVELS - 1);
        let mut skips = Vec::with_capacity(LEVELS - 1);
        let mut x = images.clone();
        for (l, block) in self.encoder.iter().enumerate() {
            let (y, cache) = block.forward(x);
            encoder.push(cache);
            if l + 1 < LEVELS {
                let (p, arg) = max_pool2(&y);
                pools.push((arg, y.shape()));
                skips.push(y);
                x = p;
            } else {
                x = y;
            }
        }
        let mut decoder: Vec<Option<(UnitCache, BlockCache)>> = (0..LEVELS - 1).map(|_| None).collect();
        for l in (0..LEVELS - 1).rev() {
            let stage = &self.decoder[l];
            let (u, up_cache) = stage.up.forward(upsample2(&x));
            let cat = concat_channels(&skips[l], &u);
            let (y, block_cache) = stage.block.forward(cat);
            decoder[l] = Some((up_cache, block_cache));
            x = y;
        }
        let features = self.projection.forward(&x);
        let trace = BackboneTrace {
            encoder,
            pools,
            decoder: decoder.into_iter().map(|d| d.expect("every decoder level ran")).collect(),
            projection_input: x,
        };
        Ok((features, trace))
    }

    /// Features without keeping a trace.
    pub fn features(&self, images: &Tensor) -> Result<FeatureMap> {
        Ok(self.extract_features(images)?.0)
    }

    /// Accumulates parameter gradients from `d_features` and returns the
    /// gradient with respect to the input images.
    pub fn backward(&mut self, trace: &BackboneTrace, d_features: &Tensor) -> Tensor {
        let mut g = self.projection.backward(&trace.projection_input, d_features);
        let mut skip_grads: Vec<Option<Tensor>> = (0..LEVELS - 1).map(|_| None).collect();
        for l in 0..LEVELS - 1 {
            let stage = &mut self.decoder[l];
            let (up_cache, block_cache) = &trace.decoder[l];
            let d_cat = stage.block.backward(block_cache, g);
            let skip_c = self.config.filters[l];
            let (d_skip, d_up) = split_channels(&d_cat, skip_c);
            skip_grads[l] = Some(d_skip);
            let d_upsampled = stage.up.backward(up_cache, d_up);
            g = upsample2_backward(&d_upsampled);
        }
        for l in (0..LEVELS).rev() {
            if l + 1 < LEVELS {
                let (arg, shape) = &trace.pools[l];
                let mut d = max_pool2_backward(arg, &g, *shape);
                let skip = skip_grads[l].take().expect("skip gradient computed");
                crate::nn::add_into_tensor(&mut d, &skip);
                g = d;
            }
            g = self.encoder[l].backward(&trace.encoder[l], g);
        }
        g
    }
}

impl Parameterized for Backbone {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.encoder.visit_params(f);
        self.decoder.visit_params(f);
        self.projection.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_params_mut(f);
        self.decoder.visit_params_mut(f);
        self.projection.visit_params_mut(f);
    }
}

/// Builds a backbone from `config` with parameters drawn from `seed`.
pub fn build_backbone(config: BackboneConfig, seed: u64) -> Result<Backbone> {
    Backbone::new(config, seed)
}

/// Exact trainable scalar count of any parameterized part.
pub fn param_count(part: &(impl Parameterized + ?Sized)) -> usize {
    part.param_count()
}
