use serde::{Deserialize, Serialize};

use super::components::LesionSet;
use crate::error::{Error, Result};

/// Overlap counts between predicted and ground-truth lesions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionCounts {
    /// Ground-truth lesions sharing at least one voxel with the prediction.
    pub tp_gt: usize,
    /// Predicted lesions sharing at least one voxel with the ground truth.
    pub tp_pred: usize,
    pub gl: usize,
    pub pl: usize,
}

/// Lesion-wise scores as fractions; `None` marks an undefined ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionMetrics {
    pub ldice: Option<f64>,
    pub ltpr: Option<f64>,
    pub lppv: Option<f64>,
    pub lfpr: Option<f64>,
}

fn overlapping(own: &LesionSet, other: &LesionSet) -> usize {
    own.components.iter().filter(|c| c.iter().any(|&i| other.labels[i] != 0)).count()
}

pub fn lesion_counts(pred: &LesionSet, gt: &LesionSet) -> Result<LesionCounts> {
    if pred.dims != gt.dims {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dims, gt.dims)));
    }
    Ok(LesionCounts { tp_gt: overlapping(gt, pred), tp_pred: overlapping(pred, gt), gl: gt.len(), pl: pred.len() })
}

/// `ldice = factor * tp_gt / (gl + pl)` (1 when both sets are empty),
/// `ltpr = tp_gt / gl`, `lppv = tp_pred / pl`, `lfpr = 1 - lppv`.
pub fn lesion_metrics(counts: LesionCounts, ldice_factor: u32) -> LesionMetrics {
    let LesionCounts { tp_gt, tp_pred, gl, pl } = counts;
    let ldice = if gl + pl == 0 { 1.0 } else { ldice_factor as f64 * tp_gt as f64 / (gl + pl) as f64 };
    let ltpr = (gl > 0).then(|| tp_gt as f64 / gl as f64);
    let lppv = (pl > 0).then(|| tp_pred as f64 / pl as f64);
    LesionMetrics { ldice: Some(ldice), ltpr, lppv, lfpr: lppv.map(|p| 1.0 - p) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Mask;
    use crate::metrics::components::{connected_components, Connectivity};

    fn parse(rows: &[&str]) -> Mask {
        Mask::from_fn([1, rows.len(), rows[0].len()], |_, y, x| rows[y].as_bytes()[x] == b'1')
    }

    #[test]
    fn one_blob_covers_three_lesions() {
        let gt = parse(&["1.1.1", ".....", "....."]);
        let pred = parse(&["11111", ".....", "....."]);
        let c = Connectivity::Eight;
        let counts = lesion_counts(&connected_components(&pred, c), &connected_components(&gt, c)).unwrap();
        assert_eq!(counts, LesionCounts { tp_gt: 3, tp_pred: 1, gl: 3, pl: 1 });
    }

    #[test]
    fn identical_masks() {
        let m = parse(&["1..1", "....", "1..1"]);
        let s = connected_components(&m, Connectivity::Four);
        let counts = lesion_counts(&s, &s).unwrap();
        assert_eq!(counts, LesionCounts { tp_gt: 4, tp_pred: 4, gl: 4, pl: 4 });
        let m = lesion_metrics(counts, 2);
        assert_eq!((m.ldice, m.ltpr, m.lppv, m.lfpr), (Some(1.0), Some(1.0), Some(1.0), Some(0.0)));
    }

    #[test]
    fn empty_prediction() {
        let gt = parse(&["1..1"]);
        let pred = parse(&["...."]);
        let c = Connectivity::Four;
        let counts = lesion_counts(&connected_components(&pred, c), &connected_components(&gt, c)).unwrap();
        assert_eq!(counts, LesionCounts { tp_gt: 0, tp_pred: 0, gl: 2, pl: 0 });
        let m = lesion_metrics(counts, 2);
        assert_eq!(m.ltpr, Some(0.0));
        assert_eq!(m.ldice, Some(0.0));
        assert_eq!(m.lppv, None);
        assert_eq!(m.lfpr, None);
    }

    #[test]
    fn substitution_example() {
        let m = lesion_metrics(LesionCounts { tp_gt: 2, tp_pred: 2, gl: 2, pl: 3 }, 2);
        assert!((m.ldice.unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(m.ltpr, Some(1.0));
        assert!((m.lppv.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.lfpr.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let literal = lesion_metrics(LesionCounts { tp_gt: 2, tp_pred: 2, gl: 2, pl: 3 }, 1);
        assert!((literal.ldice.unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn both_empty() {
        let m = lesion_metrics(LesionCounts { tp_gt: 0, tp_pred: 0, gl: 0, pl: 0 }, 2);
        assert_eq!(m.ldice, Some(1.0));
        assert_eq!(m.ltpr, None);
        assert_eq!(m.lppv, None);
    }

    #[test]
    fn dims_must_agree() {
        let a = connected_components(&Mask::zeros([1, 2, 2]), Connectivity::Four);
        let b = connected_components(&Mask::zeros([1, 2, 3]), Connectivity::Four);
        assert!(lesion_counts(&a, &b).is_err());
    }
}
