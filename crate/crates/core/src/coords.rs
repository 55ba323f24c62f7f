//! Per-pixel position vectors fed to the calibrator MLPs.
//!
//! Every pixel `(i, j)` of an `H x W` image is described by its distances to
//! the four image borders, stored in the fixed channel order
//! `(d_top, d_right, d_bottom, d_left)`. Checkpoints rely on this order.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use crate::error::{Error, Result};

/// Number of entries in a position vector.
pub const POSITION_DIM: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct PositionField {
    height: usize,
    width: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl PositionField {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Row-major `H x W x 4` values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Position vector of pixel `(i, j)`.
    pub fn at(&self, i: usize, j: usize) -> [f64; POSITION_DIM] {
        let base = (i * self.width + j) * POSITION_DIM;
        let mut v = [0.0; POSITION_DIM];
        v.copy_from_slice(&self.values[base..base + POSITION_DIM]);
        v
    }
}

/// Raw (unnormalized) distances of every pixel to the top, right, bottom and
/// left borders.
pub fn position_field(height: usize, width: usize) -> Result<PositionField> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("position field needs positive dimensions, got {height}x{width}")));
    }
    let mut values = Vec::with_capacity(height * width * POSITION_DIM);
    for i in 0..height {
        for j in 0..width {
            values.extend_from_slice(&[i as f64, (width - 1 - j) as f64, (height - 1 - i) as f64, j as f64]);
        }
    }
    Ok(PositionField { height, width, values, normalized: false })
}

/// Scales vertical distances by `max(H - 1, 1)` and horizontal ones by
/// `max(W - 1, 1)`, so every entry lands in `[0, 1]`.
pub fn normalize_positions(field: PositionField) -> Result<PositionField> {
    if field.normalized {
        return Err(Error::ContractViolation("position field is already normalized".into()));
    }
    let rows = (field.height.saturating_sub(1)).max(1) as f64;
    let cols = (field.width.saturating_sub(1)).max(1) as f64;
    let mut values = field.values;
    for v in values.chunks_exact_mut(POSITION_DIM) {
        v[0] /= rows;
        v[1] /= cols;
        v[2] /= rows;
        v[3] /= cols;
    }
    Ok(PositionField { values, normalized: true, ..field })
}

/// Cache of normalized fields keyed by `(H, W)`.
#[derive(Default)]
pub struct PositionCache {
    fields: RwLock<HashMap<(usize, usize), Arc<PositionField>>>,
}

impl PositionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, height: usize, width: usize) -> Result<Arc<PositionField>> {
        if let Some(f) = self.fields.read().expect("position cache poisoned").get(&(height, width)) {
            return Ok(Arc::clone(f));
        }
        let field = Arc::new(normalize_positions(position_field(height, width)?)?);
        let mut guard = self.fields.write().expect("position cache poisoned");
        Ok(Arc::clone(guard.entry((height, width)).or_insert(field)))
    }

    pub fn len(&self) -> usize {
        self.fields.read().expect("position cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Process-wide normalized position field for `(H, W)`.
pub fn normalized_field(height: usize, width: usize) -> Result<Arc<PositionField>> {
    static CACHE: OnceLock<PositionCache> = OnceLock::new();
    CACHE.get_or_init(PositionCache::new).get(height, width)
}
