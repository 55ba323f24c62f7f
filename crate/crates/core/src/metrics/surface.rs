use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;

/// Physical voxel size `(z, y, x)` in millimetres.
pub type Spacing = [f64; 3];

/// Distances from every boundary voxel of one mask to the nearest boundary
/// voxel of the other.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub pred_to_gt: Vec<f64>,
    pub gt_to_pred: Vec<f64>,
}

/// Foreground voxels with at least one background face neighbour. Positions
/// outside the volume count as background, except along axes of extent 1,
/// so a single slice has an in-plane boundary. A non-empty mask without such
/// voxels (every axis of extent 1) is its own boundary.
pub fn boundary(mask: &Mask) -> Vec<usize> {
    let [d, h, w] = mask.dims();
    let data = mask.data();
    let extents = [d, h, w];
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if data[i] == 0 {
                    continue;
                }
                let pos = [z, y, x];
                let mut edge = false;
                'axes: for axis in 0..3 {
                    if extents[axis] == 1 {
                        continue;
                    }
                    for step in [-1isize, 1] {
                        let n = pos[axis] as isize + step;
                        if n < 0 || n >= extents[axis] as isize {
                            edge = true;
                            break 'axes;
                        }
                        let mut q = pos;
                        q[axis] = n as usize;
                        if data[(q[0] * h + q[1]) * w + q[2]] == 0 {
                            edge = true;
                            break 'axes;
                        }
                    }
                }
                if edge {
                    out.push(i);
                }
            }
        }
    }
    if out.is_empty() {
        out = (0..data.len()).filter(|&i| data[i] != 0).collect();
    }
    out
}

/// Squared distance along one line to the nearest seed, by the lower
/// envelope of parabolas. `f` holds squared distances from previous axes
/// (`INFINITY` where unreachable) and is overwritten.
fn edt_line(f: &mut [f64], step: f64, v: &mut [usize], z: &mut [f64], out: &mut [f64]) {
    let n = f.len();
    let pos = |q: usize| q as f64 * step;
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(start) = first else {
        return;
    };
    v[0] = start;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in start + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: the new parabola dominates everywhere.
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut j = 0;
    for q in 0..n {
        while z[j + 1] < pos(q) {
            j += 1;
        }
        let d = pos(q) - pos(v[j]);
        out[q] = d * d + f[v[j]];
    }
    f.copy_from_slice(&out[..n]);
}

/// Exact squared Euclidean distance from every voxel to the nearest seed,
/// honouring anisotropic spacing. Without seeds every entry is `INFINITY`.
pub fn squared_distance_transform(dims: [usize; 3], seeds: &[usize], spacing: Spacing) -> Vec<f64> {
    let [d, h, w] = dims;
    let total = d * h * w;
    let mut g = vec![f64::INFINITY; total];
    for &s in seeds {
        g[s] = 0.0;
    }
    let longest = d.max(h).max(w);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut zb = vec![0.0; longest + 1];
    let strides = [h * w, w, 1];
    for axis in [2usize, 1, 0] {
        let n = dims[axis];
        let stride = strides[axis];
        let step = spacing[axis];
        for base in 0..total {
            let coord = (base / stride) % n;
            if coord != 0 {
                continue;
            }
            for q in 0..n {
                line[q] = g[base + q * stride];
            }
            edt_line(&mut line[..n], step, &mut v, &mut zb, &mut out);
            for q in 0..n {
                g[base + q * stride] = line[q];
            }
        }
    }
    g
}

pub fn surface_distances(pred: &Mask, gt: &Mask, spacing: Spacing) -> Result<SurfaceDistances> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
    }
    if !pred.has_foreground() || !gt.has_foreground() {
        let which = if pred.has_foreground() { "ground truth" } else { "prediction" };
        return Err(Error::UndefinedBoundary(format!("{which} mask is empty")));
    }
    let pb = boundary(pred);
    let gb = boundary(gt);
    let to_gt = squared_distance_transform(gt.dims(), &gb, spacing);
    let to_pred = squared_distance_transform(pred.dims(), &pb, spacing);
    Ok(SurfaceDistances {
        pred_to_gt: pb.iter().map(|&i| to_gt[i].sqrt()).collect(),
        gt_to_pred: gb.iter().map(|&i| to_pred[i].sqrt()).collect(),
    })
}

/// Nearest-rank percentile: the smallest value with at least `p` percent of
/// the sample at or below it.
pub fn nearest_rank(values: &[f64], p: u32) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((p as usize * n).div_ceil(100)).clamp(1, n);
    Some(sorted[rank - 1])
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

impl SurfaceDistances {
    pub fn hd(&self) -> f64 {
        max_of(&self.pred_to_gt).max(max_of(&self.gt_to_pred))
    }

    /// Larger of the two directed 95th percentiles.
    pub fn hd95(&self) -> f64 {
        let a = nearest_rank(&self.pred_to_gt, 95).unwrap_or(0.0);
        let b = nearest_rank(&self.gt_to_pred, 95).unwrap_or(0.0);
        a.max(b)
    }

    /// Mean over both directed distance sets together.
    pub fn asd(&self) -> f64 {
        let n = self.pred_to_gt.len() + self.gt_to_pred.len();
        let sum: f64 = self.pred_to_gt.iter().chain(&self.gt_to_pred).sum();
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(dims: [usize; 3], seeds: &[usize], sp: Spacing) -> Vec<f64> {
        let [_, h, w] = dims;
        let co = |i: usize| [i / (h * w), (i / w) % h, i % w];
        (0..dims.iter().product())
            .map(|i| {
                let a = co(i);
                seeds
                    .iter()
                    .map(|&s| {
                        let b = co(s);
                        (0..3).map(|k| ((a[k] as f64 - b[k] as f64) * sp[k]).powi(2)).sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn edt_matches_brute_force() {
        let dims = [3, 7, 9];
        let seeds = [0, 17, 40, 100, 188];
        let sp = [2.5, 0.7, 1.3];
        let fast = squared_distance_transform(dims, &seeds, sp);
        let slow = brute(dims, &seeds, sp);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn edt_without_seeds() {
        assert!(squared_distance_transform([1, 2, 2], &[], [1.0; 3]).iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn single_voxel_shift() {
        let mut a = Mask::zeros([1, 5, 5]);
        let mut b = Mask::zeros([1, 5, 5]);
        a.set(0, 2, 1, true);
        b.set(0, 2, 3, true);
        let s = surface_distances(&a, &b, [1.0, 1.0, 0.5]).unwrap();
        assert_eq!(s.hd(), 1.0);
        assert_eq!(s.hd95(), 1.0);
        assert_eq!(s.asd(), 1.0);
    }

    #[test]
    fn identical_masks_are_zero() {
        let m = Mask::from_fn([2, 6, 6], |_, y, x| (1..4).contains(&y) && (2..5).contains(&x));
        let s = surface_distances(&m, &m, [1.0; 3]).unwrap();
        assert_eq!((s.hd(), s.hd95(), s.asd()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_mask_is_undefined() {
        let m = Mask::from_fn([1, 3, 3], |_, y, x| y == 1 && x == 1);
        assert!(matches!(surface_distances(&Mask::zeros([1, 3, 3]), &m, [1.0; 3]), Err(Error::UndefinedBoundary(_))));
    }

    #[test]
    fn boundary_of_square() {
        let m = Mask::from_fn([1, 5, 5], |_, y, x| (1..4).contains(&y) && (1..4).contains(&x));
        let b = boundary(&m);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&12));
    }

    #[test]
    fn boundary_touches_volume_edge() {
        let full = Mask::from_fn([1, 3, 3], |_, _, _| true);
        assert_eq!(boundary(&full), vec![0, 1, 2, 3, 5, 6, 7, 8]);
    }

    #[test]
    fn nearest_rank_percentile() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 95), Some(19.0));
        assert_eq!(nearest_rank(&[3.0], 95), Some(3.0));
        assert_eq!(nearest_rank(&[], 95), None);
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 95), Some(10.0));
    }
}
