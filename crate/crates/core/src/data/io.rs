//! Volume readers: NIfTI-1 (`.nii`, `.nii.gz`) and raw little-endian f32
//! arrays (`.raw`) described by a JSON sidecar at `<path>.json` holding
//! `{"dims": [D, H, W], "spacing": [z, y, x]}`.
//!
//! NIfTI axes `(x, y, z)` map to `(W, H, D)`: slices run along the third
//! stored axis.

use std::fs;
use std::path::{Path, PathBuf};

use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use super::volume::Volume;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::metrics::Spacing;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub dims: [usize; 3],
    pub spacing: Spacing,
}

pub fn raw_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn is_nifti(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// Raw values in `D x H x W` order plus spacing.
pub fn read_array(path: &Path) -> Result<([usize; 3], Vec<f64>, Spacing)> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")));
    }
    if is_nifti(path) {
        read_nifti(path)
    } else if path.extension().is_some_and(|e| e == "raw") {
        read_raw(path)
    } else {
        Err(Error::format(path, "unsupported volume format (expected .nii, .nii.gz or .raw)"))
    }
}

fn read_nifti(path: &Path) -> Result<([usize; 3], Vec<f64>, Spacing)> {
    let obj = ReaderOptions::new().read_file(path).map_err(|e| Error::format(path, e.to_string()))?;
    let header = obj.header().clone();
    let arr = obj.into_volume().into_ndarray::<f64>().map_err(|e| Error::format(path, e.to_string()))?;
    let shape = arr.shape().to_vec();
    if shape.len() < 2 || shape.iter().skip(3).any(|&n| n != 1) {
        return Err(Error::format(path, format!("expected a 2D or 3D volume, got shape {shape:?}")));
    }
    let (nx, ny, nz) = (shape[0], shape[1], shape.get(2).copied().unwrap_or(1));
    let mut idx = vec![0usize; shape.len()];
    let mut values = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                idx[0] = x;
                idx[1] = y;
                if idx.len() > 2 {
                    idx[2] = z;
                }
                values.push(arr[idx.as_slice()]);
            }
        }
    }
    let pd = header.pixdim;
    let sp = |v: f32| if v.is_finite() && v > 0.0 { v as f64 } else { 1.0 };
    Ok(([nz, ny, nx], values, [sp(pd[3]), sp(pd[2]), sp(pd[1])]))
}

fn read_raw(path: &Path) -> Result<([usize; 3], Vec<f64>, Spacing)> {
    let side = raw_sidecar(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let header: RawHeader = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = header.dims.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::format(path, format!("expected {} bytes for {:?}, found {}", n * 4, header.dims, bytes.len())));
    }
    let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Ok((header.dims, values, header.spacing))
}

pub fn write_raw(path: &Path, dims: [usize; 3], values: &[f64], spacing: Spacing) -> Result<()> {
    if values.len() != dims.iter().product::<usize>() {
        return Err(Error::Shape(format!("raw array {dims:?} needs {} values, got {}", dims.iter().product::<usize>(), values.len())));
    }
    let bytes: Vec<u8> = values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = raw_sidecar(path);
    let json = serde_json::to_string(&RawHeader { dims, spacing }).expect("plain header");
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn read_volume(path: &Path, modality: &str) -> Result<Volume> {
    let (dims, values, spacing) = read_array(path)?;
    Volume::new(dims, values, spacing, modality).map_err(|e| Error::format(path, e.to_string()))
}

/// Binary mask of voxels whose value is one of `foreground`, or any non-zero
/// value when `foreground` is empty.
pub fn read_label(path: &Path, foreground: &[i64]) -> Result<(Mask, Spacing)> {
    let (dims, values, spacing) = read_array(path)?;
    let data = values
        .iter()
        .map(|&v| {
            let hit = if foreground.is_empty() { v != 0.0 } else { foreground.iter().any(|&f| v.round() as i64 == f) };
            hit as u8
        })
        .collect();
    Ok((Mask::from_vec(dims, data)?, spacing))
}
