use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::metrics::Spacing;

/// Scalar `D x H x W` volume of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    values: Vec<f64>,
    spacing: Spacing,
    modality: String,
}

impl Volume {
    pub fn new(dims: [usize; 3], values: Vec<f64>, spacing: Spacing, modality: impl Into<String>) -> Result<Self> {
        if values.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!("volume {dims:?} needs {} values, got {}", dims.iter().product::<usize>(), values.len())));
        }
        if dims[0] == 0 {
            return Err(Error::InvalidArgument("volume has no slices".into()));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("volume contains non-finite values".into()));
        }
        Ok(Self { dims, values, spacing, modality: modality.into() })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn plane(&self, z: usize) -> Plane {
        let [_, h, w] = self.dims;
        Plane { height: h, width: w, values: self.values[z * h * w..(z + 1) * h * w].to_vec() }
    }
}

/// Single-channel 2D image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!("plane {height}x{width} needs {} values, got {}", height * width, values.len())));
        }
        Ok(Self { height, width, values })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }
}

/// Multi-channel 2D image stored `H x W x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl Image {
    pub fn at(&self, i: usize, j: usize, c: usize) -> f64 {
        self.values[(i * self.width + j) * self.channels + c]
    }

    pub fn channel(&self, c: usize) -> Plane {
        let values = self.values.iter().skip(c).step_by(self.channels).copied().collect();
        Plane { height: self.height, width: self.width, values }
    }
}

/// One training or evaluation example with its origin.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub image: Image,
    /// `1 x H x W` binary label.
    pub label: Mask,
    pub volume_id: String,
    pub slice_index: usize,
}

/// A plane cut from a volume together with its position along the first axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub index: usize,
    pub plane: Plane,
}

pub fn slice_volume(volume: &Volume) -> Vec<Slice> {
    (0..volume.dims[0]).map(|z| Slice { index: z, plane: volume.plane(z) }).collect()
}

pub fn restack(planes: &[Plane], spacing: Spacing, modality: &str) -> Result<Volume> {
    let first = planes.first().ok_or_else(|| Error::InvalidArgument("nothing to stack".into()))?;
    let (h, w) = (first.height, first.width);
    let mut values = Vec::with_capacity(planes.len() * h * w);
    for p in planes {
        if (p.height, p.width) != (h, w) {
            return Err(Error::Shape(format!("plane {}x{} does not match {h}x{w}", p.height, p.width)));
        }
        values.extend_from_slice(&p.values);
    }
    Volume::new([planes.len(), h, w], values, spacing, modality)
}

/// Top-left corner of a centred crop. Odd remainders drop the extra row or
/// column from the bottom or right.
pub fn crop_offsets(height: usize, width: usize, target_h: usize, target_w: usize) -> Result<(usize, usize)> {
    if target_h > height || target_w > width {
        return Err(Error::InvalidArgument(format!("crop {target_h}x{target_w} exceeds source {height}x{width}")));
    }
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidArgument("crop size must be positive".into()));
    }
    Ok(((height - target_h) / 2, (width - target_w) / 2))
}

pub fn center_crop(plane: &Plane, target_h: usize, target_w: usize) -> Result<Plane> {
    let (oy, ox) = crop_offsets(plane.height, plane.width, target_h, target_w)?;
    let mut values = Vec::with_capacity(target_h * target_w);
    for i in oy..oy + target_h {
        values.extend_from_slice(&plane.values[i * plane.width + ox..i * plane.width + ox + target_w]);
    }
    Ok(Plane { height: target_h, width: target_w, values })
}

pub fn center_crop_mask(mask: &Mask, target_h: usize, target_w: usize) -> Result<Mask> {
    let [d, h, w] = mask.dims();
    let (oy, ox) = crop_offsets(h, w, target_h, target_w)?;
    Ok(Mask::from_fn([d, target_h, target_w], |z, y, x| mask.get(z, y + oy, x + ox)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    #[default]
    Minmax,
    Zscore,
}

/// Region over which normalization statistics are computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormScope {
    #[default]
    Volume,
    Slice,
}

/// In-place normalization. Constant inputs map to zeros in both modes.
pub fn normalize_values(values: &mut [f64], mode: NormMode) {
    if values.is_empty() {
        return;
    }
    match mode {
        NormMode::Minmax => {
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = hi - lo;
            for v in values.iter_mut() {
                *v = if range > 0.0 { ((*v - lo) / range).clamp(0.0, 1.0) } else { 0.0 };
            }
        }
        NormMode::Zscore => {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            for v in values.iter_mut() {
                *v = if std > 0.0 { (*v - mean) / std } else { 0.0 };
            }
        }
    }
}

pub fn normalize_intensity(plane: &Plane, mode: NormMode) -> Plane {
    let mut out = plane.clone();
    normalize_values(&mut out.values, mode);
    out
}

/// Stacks planes along the channel axis in the given order.
pub fn concat_modalities(planes: &[Plane]) -> Result<Image> {
    let first = planes.first().ok_or_else(|| Error::InvalidArgument("no modalities to concatenate".into()))?;
    let (h, w, c) = (first.height, first.width, planes.len());
    if let Some(p) = planes.iter().find(|p| (p.height, p.width) != (h, w)) {
        return Err(Error::Shape(format!("modality {}x{} does not match {h}x{w}", p.height, p.width)));
    }
    let mut values = vec![0.0; h * w * c];
    for (k, p) in planes.iter().enumerate() {
        for (px, v) in p.values.iter().enumerate() {
            values[px * c + k] = *v;
        }
    }
    Ok(Image { height: h, width: w, channels: c, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Plane {
        Plane::new(h, w, (0..h * w).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn slicing_axis() {
        let v = Volume::new([3, 4, 5], (0..60).map(f64::from).collect(), [3.0, 1.0, 1.0], "t1").unwrap();
        let s = slice_volume(&v);
        assert_eq!(s.len(), 3);
        assert_eq!((s[1].plane.height, s[1].plane.width), (4, 5));
        assert_eq!(s[1].plane.values[0], 20.0);
        let planes: Vec<Plane> = s.into_iter().map(|s| s.plane).collect();
        assert_eq!(restack(&planes, [3.0, 1.0, 1.0], "t1").unwrap(), v);
    }

    #[test]
    fn single_plane_volume() {
        let v = Volume::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], [1.0; 3], "x").unwrap();
        let s = slice_volume(&v);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].plane.values, v.values());
    }

    #[test]
    fn volume_invariants() {
        assert!(Volume::new([1, 1, 1], vec![1.0], [0.0, 1.0, 1.0], "x").is_err());
        assert!(Volume::new([1, 1, 1], vec![f64::NAN], [1.0; 3], "x").is_err());
        assert!(Volume::new([1, 1, 2], vec![1.0], [1.0; 3], "x").is_err());
    }

    #[test]
    fn crop_even_and_odd() {
        let p = ramp(6, 6);
        let c = center_crop(&p, 4, 4).unwrap();
        assert_eq!(c.values[0], p.at(1, 1));
        assert_eq!(c.values[15], p.at(4, 4));
        let p = ramp(5, 5);
        let c = center_crop(&p, 4, 4).unwrap();
        assert_eq!(c.values[0], p.at(0, 0));
        assert_eq!(c.values[15], p.at(3, 3));
        assert_eq!(center_crop(&p, 5, 5).unwrap(), p);
        assert!(matches!(center_crop(&p, 6, 4), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn crop_mask_matches_plane_crop() {
        let m = Mask::from_fn([2, 5, 7], |z, y, x| (z + y * x) % 3 == 0);
        let c = center_crop_mask(&m, 3, 4).unwrap();
        assert_eq!(c.dims(), [2, 3, 4]);
        assert_eq!(c.get(1, 0, 0), m.get(1, 1, 1));
    }

    #[test]
    fn normalization() {
        let p = Plane::new(1, 3, vec![0.0, 5.0, 10.0]).unwrap();
        assert_eq!(normalize_intensity(&p, NormMode::Minmax).values, vec![0.0, 0.5, 1.0]);
        let c = Plane::new(1, 3, vec![4.0; 3]).unwrap();
        assert_eq!(normalize_intensity(&c, NormMode::Minmax).values, vec![0.0; 3]);
        assert_eq!(normalize_intensity(&c, NormMode::Zscore).values, vec![0.0; 3]);
        let z = normalize_intensity(&Plane::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap(), NormMode::Zscore);
        let e = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((z.values[0] + e).abs() < 1e-12 && z.values[1].abs() < 1e-12 && (z.values[2] - e).abs() < 1e-12);
    }

    #[test]
    fn concat_order() {
        let a = ramp(2, 3);
        let b = Plane::new(2, 3, vec![9.0; 6]).unwrap();
        let img = concat_modalities(&[a.clone(), b]).unwrap();
        assert_eq!(img.channels, 2);
        assert_eq!(img.channel(0), a);
        assert_eq!(concat_modalities(&[a.clone()]).unwrap().channels, 1);
        assert!(concat_modalities(&[a, ramp(3, 2)]).is_err());
    }
}
