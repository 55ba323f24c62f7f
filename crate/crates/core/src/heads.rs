//! Classification heads on top of the backbone feature map.
//!
//! * `baseline`: one bias-free linear classifier `s_v = w . x_v` shared by all
//!   pixels.
//! * `nerdm`: a calibrator MLP maps each pixel's position vector to a
//!   per-channel scale (`1/sigma`) and shift (`-mu/sigma`); features are
//!   normalized with them before the shared classifier:
//!   `s_v = sum_c w_c (x_vc * inv_sigma_vc + neg_mu_over_sigma_vc)`.
//! * `nerdc`: the calibrator emits a full classifier weight vector per pixel,
//!   `s_v = x_v . w_v`.
//!
//! Calibrators start at the baseline: the final calibrator layer has zero
//! weights and a bias of `(1, .., 1, 0, .., 0)` (nerdm) or the initial shared
//! classifier `w` (nerdc).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::coords::{PositionField, POSITION_DIM};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::nn::{Mlp, MlpCache, Param, Parameterized};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Baseline,
    Nerdm,
    Nerdc,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Baseline => "baseline",
            HeadKind::Nerdm => "nerdm",
            HeadKind::Nerdc => "nerdc",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(HeadKind::Baseline),
            "nerdm" => Ok(HeadKind::Nerdm),
            "nerdc" => Ok(HeadKind::Nerdc),
            other => Err(Error::Config(format!("unknown head kind `{other}` (expected baseline, nerdm or nerdc)"))),
        }
    }
}

pub const DEFAULT_CALIBRATOR_HIDDEN: [usize; 2] = [64, 64];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    #[serde(default = "default_calibrator_hidden")]
    pub calibrator_hidden: Vec<usize>,
    /// Hidden widths of an optional per-pixel MLP in front of the final
    /// linear classifier. Empty means the classifier is a single projection.
    #[serde(default)]
    pub classifier_hidden: Vec<usize>,
    /// Pass the nerdm scale through a softplus so it stays positive.
    #[serde(default)]
    pub constrain_scale: bool,
}

fn default_calibrator_hidden() -> Vec<usize> {
    DEFAULT_CALIBRATOR_HIDDEN.to_vec()
}

impl HeadConfig {
    pub fn new(kind: HeadKind) -> Self {
        Self { kind, calibrator_hidden: default_calibrator_hidden(), classifier_hidden: Vec::new(), constrain_scale: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.calibrator_hidden.iter().chain(&self.classifier_hidden).any(|&w| w == 0) {
            return Err(Error::Config("hidden layer widths must be at least 1".into()));
        }
        Ok(())
    }
}

/// Coordinate MLP `f: R^4 -> R^k`.
#[derive(Clone, Debug)]
pub struct CalibratorMlp {
    mlp: Mlp,
}

impl CalibratorMlp {
    pub fn new(name: &str, hidden: &[usize], output_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut dims = vec![POSITION_DIM];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        Self { mlp: Mlp::new(name, &dims, false, rng) }
    }

    /// Wraps an existing MLP; its input width must be 4.
    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.input_dim() != POSITION_DIM {
            return Err(Error::Shape(format!("calibrator input must be {POSITION_DIM}-dimensional, got {}", mlp.input_dim())));
        }
        Ok(Self { mlp })
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    /// Zeroes the final weights and sets the final bias, making the MLP a
    /// constant function.
    pub fn set_constant_output(&mut self, bias: &[f64]) {
        let last = self.mlp.last_mut();
        assert_eq!(bias.len(), last.outputs(), "constant output width");
        last.weight.value.fill(0.0);
        last.bias.value.copy_from_slice(bias);
    }

    fn run(&self, field: &PositionField) -> Result<MlpCache> {
        if !field.is_normalized() {
            return Err(Error::ContractViolation("calibrators consume normalized position fields".into()));
        }
        Ok(self.mlp.forward(field.values(), field.num_pixels()))
    }
}

impl Parameterized for CalibratorMlp {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.mlp.visit_params(f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.mlp.visit_params_mut(f)
    }
}

/// Per-pixel normalization parameters, each `H x W x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibratorOutputM {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub inv_sigma: Vec<f64>,
    pub neg_mu_over_sigma: Vec<f64>,
}

impl CalibratorOutputM {
    /// `inv_sigma = 1`, `neg_mu_over_sigma = 0` everywhere.
    pub fn identity(height: usize, width: usize, channels: usize) -> Self {
        let n = height * width * channels;
        Self { height, width, channels, inv_sigma: vec![1.0; n], neg_mu_over_sigma: vec![0.0; n] }
    }
}

/// Per-pixel classifier weights, `H x W x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibratorOutputC {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub weight_field: Vec<f64>,
}

impl CalibratorOutputC {
    pub fn constant(height: usize, width: usize, w: &[f64]) -> Self {
        let weight_field = (0..height * width).flat_map(|_| w.iter().copied()).collect();
        Self { height, width, channels: w.len(), weight_field }
    }
}

/// Pre-sigmoid scores, `B x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMap {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl LogitMap {
    pub fn new(batch: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != batch * height * width {
            return Err(Error::Shape(format!("logit map {batch}x{height}x{width} got {} values", values.len())));
        }
        Ok(Self { batch, height, width, values })
    }

    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[b * n..(b + 1) * n]
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Overflow-safe logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Value `r` with `softplus(r) = 1`.
fn softplus_inverse_one() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

fn split_m(out: &[f64], pixels: usize, channels: usize, constrain_scale: bool) -> (Vec<f64>, Vec<f64>) {
    let mut inv = Vec::with_capacity(pixels * channels);
    let mut neg = Vec::with_capacity(pixels * channels);
    for row in out.chunks_exact(2 * channels) {
        if constrain_scale {
            inv.extend(row[..channels].iter().map(|&v| softplus(v)));
        } else {
            inv.extend_from_slice(&row[..channels]);
        }
        neg.extend_from_slice(&row[channels..]);
    }
    (inv, neg)
}

/// Evaluates a nerdm calibrator at every pixel: the first `C` outputs are
/// `1/sigma`, the last `C` are `-mu/sigma`.
pub fn calibrate_m(mlp: &CalibratorMlp, field: &PositionField) -> Result<CalibratorOutputM> {
    let out = mlp.output_dim();
    if out == 0 || out % 2 != 0 {
        return Err(Error::Shape(format!("nerdm calibrator needs an even output width 2C, got {out}")));
    }
    let channels = out / 2;
    let cache = mlp.run(field)?;
    let (inv_sigma, neg_mu_over_sigma) = split_m(cache.output(), field.num_pixels(), channels, false);
    Ok(CalibratorOutputM { height: field.height(), width: field.width(), channels, inv_sigma, neg_mu_over_sigma })
}

/// Evaluates a nerdc calibrator: one `C`-vector of classifier weights per pixel.
pub fn calibrate_c(mlp: &CalibratorMlp, field: &PositionField) -> Result<CalibratorOutputC> {
    let channels = mlp.output_dim();
    let cache = mlp.run(field)?;
    Ok(CalibratorOutputC { height: field.height(), width: field.width(), channels, weight_field: cache.output().to_vec() })
}

fn check_features(features: &FeatureMap, h: usize, w: usize, c: usize) -> Result<()> {
    let [_, fh, fw, fc] = features.shape();
    if (fh, fw, fc) != (h, w, c) {
        return Err(Error::Shape(format!("feature map {fh}x{fw}x{fc} does not match calibration {h}x{w}x{c}")));
    }
    Ok(())
}

pub fn baseline_logits(features: &FeatureMap, w: &[f64]) -> Result<LogitMap> {
    let [b, h, wd, c] = features.shape();
    if w.len() != c {
        return Err(Error::Shape(format!("classifier has {} weights for {c} channels", w.len())));
    }
    let values = features
        .data()
        .chunks_exact(c)
        .map(|x| {
            let mut s = 0.0;
            for k in 0..c {
                s += w[k] * x[k];
            }
            s
        })
        .collect();
    LogitMap::new(b, h, wd, values)
}

pub fn nerdm_logits(features: &FeatureMap, calib: &CalibratorOutputM, w: &[f64]) -> Result<LogitMap> {
    let [b, h, wd, c] = features.shape();
    check_features(features, calib.height, calib.width, calib.channels)?;
    if w.len() != c {
        return Err(Error::Shape(format!("classifier has {} weights for {c} channels", w.len())));
    }
    let pixels = h * wd;
    let mut values = Vec::with_capacity(b * pixels);
    for (p, x) in features.data().chunks_exact(c).enumerate() {
        let v = (p % pixels) * c;
        let inv = &calib.inv_sigma[v..v + c];
        let neg = &calib.neg_mu_over_sigma[v..v + c];
        let mut s = 0.0;
        for k in 0..c {
            s += w[k] * (x[k] * inv[k] + neg[k]);
        }
        values.push(s);
    }
    LogitMap::new(b, h, wd, values)
}

pub fn nerdc_logits(features: &FeatureMap, calib: &CalibratorOutputC) -> Result<LogitMap> {
    let [b, h, wd, c] = features.shape();
    check_features(features, calib.height, calib.width, calib.channels)?;
    let pixels = h * wd;
    let mut values = Vec::with_capacity(b * pixels);
    for (p, x) in features.data().chunks_exact(c).enumerate() {
        let v = (p % pixels) * c;
        let wv = &calib.weight_field[v..v + c];
        let mut s = 0.0;
        for k in 0..c {
            s += x[k] * wv[k];
        }
        values.push(s);
    }
    LogitMap::new(b, h, wd, values)
}

/// `sigmoid(s) >= threshold` per pixel; the batch axis becomes the mask depth.
pub fn segment(logits: &LogitMap, threshold: f64) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let data = logits.values.iter().map(|&s| (sigmoid(s) >= threshold) as u8).collect();
    Mask::from_vec([logits.batch, logits.height, logits.width], data)
}

/// Per-pixel MLP in front of the final linear classifier.
#[derive(Clone, Debug)]
struct PixelMlp {
    mlp: Mlp,
}

/// Trainable head attached to a backbone with `C` feature channels.
#[derive(Clone, Debug)]
pub struct Head {
    config: HeadConfig,
    in_channels: usize,
    pre: Option<PixelMlp>,
    /// Shared classifier for baseline and nerdm.
    classifier: Option<Param>,
    calibrator: Option<CalibratorMlp>,
}

pub struct HeadCache {
    features: FeatureMap,
    calibrator: Option<MlpCache>,
    /// nerdm scale before the optional softplus.
    raw_scale: Vec<f64>,
    inv_sigma: Vec<f64>,
    pre: Option<MlpCache>,
    /// Vector the final linear layer acts on, `B*H*W x C'`.
    last_hidden: Vec<f64>,
    weight_field: Vec<f64>,
}

impl Head {
    pub fn new(config: HeadConfig, in_channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if in_channels == 0 {
            return Err(Error::Config("head needs at least one feature channel".into()));
        }
        let pre = if config.classifier_hidden.is_empty() {
            None
        } else {
            let mut dims = vec![in_channels];
            dims.extend_from_slice(&config.classifier_hidden);
            Some(PixelMlp { mlp: Mlp::new("head.pre", &dims, true, rng) })
        };
        let cls_in = config.classifier_hidden.last().copied().unwrap_or(in_channels);
        let bound = 1.0 / (cls_in as f64).sqrt();
        let w: Vec<f64> = (0..cls_in).map(|_| rng.random_range(-bound..=bound)).collect();
        let (classifier, calibrator) = match config.kind {
            HeadKind::Baseline => {
                let mut p = Param::zeros("head.classifier", &[cls_in]);
                p.value = w;
                (Some(p), None)
            }
            HeadKind::Nerdm => {
                let mut p = Param::zeros("head.classifier", &[cls_in]);
                p.value = w;
                let mut cal = CalibratorMlp::new("head.calibrator", &config.calibrator_hidden, 2 * in_channels, rng);
                let one = if config.constrain_scale { softplus_inverse_one() } else { 1.0 };
                let mut bias = vec![one; in_channels];
                bias.extend(std::iter::repeat_n(0.0, in_channels));
                cal.set_constant_output(&bias);
                (Some(p), Some(cal))
            }
            HeadKind::Nerdc => {
                let mut cal = CalibratorMlp::new("head.calibrator", &config.calibrator_hidden, cls_in, rng);
                cal.set_constant_output(&w);
                (None, Some(cal))
            }
        };
        Ok(Self { config, in_channels, pre, classifier, calibrator })
    }

    pub fn kind(&self) -> HeadKind {
        self.config.kind
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn calibrator(&self) -> Option<&CalibratorMlp> {
        self.calibrator.as_ref()
    }

    pub fn calibrator_mut(&mut self) -> Option<&mut CalibratorMlp> {
        self.calibrator.as_mut()
    }

    pub fn classifier(&self) -> Option<&[f64]> {
        self.classifier.as_ref().map(|p| p.value.as_slice())
    }

    pub fn calibrator_param_count(&self) -> usize {
        self.calibrator.as_ref().map_or(0, |c| c.param_count())
    }

    pub fn forward(&self, features: FeatureMap) -> Result<(LogitMap, HeadCache)> {
        let [b, h, w, c] = features.shape();
        if c != self.in_channels {
            return Err(Error::Shape(format!("head expects {} channels, got {c}", self.in_channels)));
        }
        let pixels = h * w;
        let cal_cache = match &self.calibrator {
            Some(cal) => Some(cal.run(&*crate::coords::normalized_field(h, w)?)?),
            None => None,
        };

        let mut raw_scale = Vec::new();
        let mut inv_sigma = Vec::new();
        let pre_input: Vec<f64> = if self.config.kind == HeadKind::Nerdm {
            let out = cal_cache.as_ref().expect("nerdm has a calibrator").output();
            let (inv, n) = split_m(out, pixels, c, self.config.constrain_scale);
            raw_scale = out.chunks_exact(2 * c).flat_map(|r| r[..c].to_vec()).collect();
            let mut z = Vec::with_capacity(features.data().len());
            for (p, x) in features.data().chunks_exact(c).enumerate() {
                let v = (p % pixels) * c;
                for k in 0..c {
                    z.push(x[k] * inv[v + k] + n[v + k]);
                }
            }
            inv_sigma = inv;
            z
        } else {
            Vec::new()
        };

        let rows = b * pixels;
        let (pre_cache, last_hidden) = match &self.pre {
            Some(pre) => {
                let input: &[f64] = if self.config.kind == HeadKind::Nerdm { &pre_input } else { features.data() };
                let cache = pre.mlp.forward(input, rows);
                let out = cache.output().to_vec();
                (Some(cache), out)
            }
            None => {
                if self.config.kind == HeadKind::Nerdm {
                    (None, pre_input.clone())
                } else {
                    (None, Vec::new())
                }
            }
        };
        let hidden: &[f64] = if last_hidden.is_empty() { features.data() } else { &last_hidden };
        let cls_in = self.config.classifier_hidden.last().copied().unwrap_or(c);

        let mut weight_field = Vec::new();
        let values: Vec<f64> = match self.config.kind {
            HeadKind::Baseline | HeadKind::Nerdm => {
                let wv = &self.classifier.as_ref().expect("shared classifier").value;
                hidden
                    .chunks_exact(cls_in)
                    .map(|x| {
                        let mut s = 0.0;
                        for k in 0..cls_in {
                            s += wv[k] * x[k];
                        }
                        s
                    })
                    .collect()
            }
            HeadKind::Nerdc => {
                weight_field = cal_cache.as_ref().expect("nerdc has a calibrator").output().to_vec();
                hidden
                    .chunks_exact(cls_in)
                    .enumerate()
                    .map(|(p, x)| {
                        let v = (p % pixels) * cls_in;
                        let mut s = 0.0;
                        for k in 0..cls_in {
                            s += x[k] * weight_field[v + k];
                        }
                        s
                    })
                    .collect()
            }
        };
        let logits = LogitMap::new(b, h, w, values)?;
        let cache = HeadCache { features, calibrator: cal_cache, raw_scale, inv_sigma, pre: pre_cache, last_hidden, weight_field };
        Ok((logits, cache))
    }

    /// Accumulates head gradients and returns the feature-map gradient.
    pub fn backward(&mut self, cache: &HeadCache, d_logits: &[f64]) -> FeatureMap {
        let [b, h, w, c] = cache.features.shape();
        let pixels = h * w;
        let cls_in = self.config.classifier_hidden.last().copied().unwrap_or(c);
        let hidden: &[f64] = if cache.last_hidden.is_empty() { cache.features.data() } else { &cache.last_hidden };
        let rows = b * pixels;
        assert_eq!(d_logits.len(), rows, "logit gradient length");

        // Gradient w.r.t. the classifier input, rows x cls_in.
        let mut d_hidden = vec![0.0; rows * cls_in];
        match self.config.kind {
            HeadKind::Baseline | HeadKind::Nerdm => {
                let p = self.classifier.as_mut().expect("shared classifier");
                for (r, &g) in d_logits.iter().enumerate() {
                    let x = &hidden[r * cls_in..(r + 1) * cls_in];
                    for k in 0..cls_in {
                        p.grad[k] += g * x[k];
                        d_hidden[r * cls_in + k] = g * p.value[k];
                    }
                }
            }
            HeadKind::Nerdc => {
                let mut d_field = vec![0.0; pixels * cls_in];
                for (r, &g) in d_logits.iter().enumerate() {
                    let v = (r % pixels) * cls_in;
                    let x = &hidden[r * cls_in..(r + 1) * cls_in];
                    for k in 0..cls_in {
                        d_field[v + k] += g * x[k];
                        d_hidden[r * cls_in + k] = g * cache.weight_field[v + k];
                    }
                }
                let cal = self.calibrator.as_mut().expect("nerdc has a calibrator");
                cal.mlp.backward(cache.calibrator.as_ref().expect("calibrator cache"), &d_field, false);
            }
        }

        // Back through the optional per-pixel MLP.
        let d_pre_input = match (&mut self.pre, &cache.pre) {
            (Some(pre), Some(pc)) => pre.mlp.backward(pc, &d_hidden, true).expect("input gradient requested"),
            _ => d_hidden,
        };

        if self.config.kind != HeadKind::Nerdm {
            return FeatureMap::from_vec([b, h, w, c], d_pre_input).expect("feature gradient shape");
        }

        // nerdm: z = x * inv + neg.
        let x = cache.features.data();
        let mut d_x = vec![0.0; x.len()];
        let mut d_cal = vec![0.0; pixels * 2 * c];
        for r in 0..rows {
            let v = r % pixels;
            for k in 0..c {
                let gz = d_pre_input[r * c + k];
                let idx = v * c + k;
                d_x[r * c + k] = gz * cache.inv_sigma[idx];
                d_cal[v * 2 * c + k] += gz * x[r * c + k];
                d_cal[v * 2 * c + c + k] += gz;
            }
        }
        if self.config.constrain_scale {
            for v in 0..pixels {
                for k in 0..c {
                    d_cal[v * 2 * c + k] *= sigmoid(cache.raw_scale[v * c + k]);
                }
            }
        }
        let cal = self.calibrator.as_mut().expect("nerdm has a calibrator");
        cal.mlp.backward(cache.calibrator.as_ref().expect("calibrator cache"), &d_cal, false);
        FeatureMap::from_vec([b, h, w, c], d_x).expect("feature gradient shape")
    }
}

impl Parameterized for Head {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        if let Some(pre) = &self.pre {
            pre.mlp.visit_params(f);
        }
        if let Some(p) = &self.classifier {
            f(p);
        }
        if let Some(c) = &self.calibrator {
            c.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(pre) = &mut self.pre {
            pre.mlp.visit_params_mut(f);
        }
        if let Some(p) = &mut self.classifier {
            f(p);
        }
        if let Some(c) = &mut self.calibrator {
            c.visit_params_mut(f);
        }
    }
}
