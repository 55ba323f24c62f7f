//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use nerd::metrics::Connectivity;
use nerd::Mask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_mask(rng: &mut impl Rng, dims: [usize; 3], density: f64) -> Mask {
    Mask::from_fn(dims, |_, _, _| rng.random_bool(density))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn adjacent(conn: Connectivity, d: [isize; 3]) -> bool {
    let n = d.iter().filter(|&&v| v != 0).count();
    let within = d.iter().all(|v| v.abs() <= 1);
    within
        && match conn {
            Connectivity::Four => d[0] == 0 && n == 1,
            Connectivity::Eight => d[0] == 0 && n >= 1,
            Connectivity::Six => n == 1,
            Connectivity::TwentySix => n >= 1,
        }
}

/// Components by repeated minimum-label propagation over all voxel pairs,
/// each sorted ascending, ordered by smallest voxel index.
pub fn components(mask: &Mask, conn: Connectivity) -> Vec<Vec<usize>> {
    let [d, h, w] = mask.dims();
    let n = d * h * w;
    let coord = |i: usize| [(i / (h * w)) as isize, ((i / w) % h) as isize, (i % w) as isize];
    let fg: Vec<usize> = (0..n).filter(|&i| mask.data()[i] != 0).collect();
    let mut label: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for &a in &fg {
            for &b in &fg {
                let (ca, cb) = (coord(a), coord(b));
                if adjacent(conn, [cb[0] - ca[0], cb[1] - ca[1], cb[2] - ca[2]]) && label[b] < label[a] {
                    label[a] = label[b];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut roots: Vec<usize> = fg.iter().map(|&i| label[i]).collect();
    roots.sort_unstable();
    roots.dedup();
    roots.iter().map(|&r| fg.iter().copied().filter(|&i| label[i] == r).collect()).collect()
}

#[derive(Debug)]
pub struct LesionOracle {
    pub gl: usize,
    pub pl: usize,
    pub tp_gt: usize,
    pub tp_pred: usize,
}

pub fn lesion_oracle(pred: &Mask, gt: &Mask, conn: Connectivity) -> LesionOracle {
    let pc = components(pred, conn);
    let gc = components(gt, conn);
    let hits = |cs: &[Vec<usize>], other: &Mask| cs.iter().filter(|c| c.iter().any(|&i| other.data()[i] != 0)).count();
    LesionOracle { gl: gc.len(), pl: pc.len(), tp_gt: hits(&gc, pred), tp_pred: hits(&pc, gt) }
}

/// Foreground voxels with a background face neighbour. Outside the volume
/// is background along axes longer than one voxel. A mask without such
/// voxels uses all its foreground.
pub fn boundary(mask: &Mask) -> Vec<[usize; 3]> {
    let [d, h, w] = mask.dims();
    let dims = [d, h, w];
    let mut fg = Vec::new();
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask.get(z, y, x) {
                    continue;
                }
                fg.push([z, y, x]);
                let p = [z as isize, y as isize, x as isize];
                let mut edge = false;
                for axis in 0..3 {
                    for step in [-1isize, 1] {
                        let mut q = p;
                        q[axis] += step;
                        if q[axis] < 0 || q[axis] >= dims[axis] as isize {
                            if dims[axis] > 1 {
                                edge = true;
                            }
                        } else if !mask.get(q[0] as usize, q[1] as usize, q[2] as usize) {
                            edge = true;
                        }
                    }
                }
                if edge {
                    out.push([z, y, x]);
                }
            }
        }
    }
    if out.is_empty() {
        fg
    } else {
        out
    }
}

fn distance(a: [usize; 3], b: [usize; 3], spacing: [f64; 3]) -> f64 {
    (0..3).map(|k| ((a[k] as f64 - b[k] as f64) * spacing[k]).powi(2)).sum::<f64>().sqrt()
}

/// For every boundary voxel of `from`, the distance to the closest boundary voxel of `to`.
pub fn directed(from: &Mask, to: &Mask, spacing: [f64; 3]) -> Vec<f64> {
    let target = boundary(to);
    boundary(from).iter().map(|&a| target.iter().map(|&b| distance(a, b, spacing)).fold(f64::INFINITY, f64::min)).collect()
}

pub fn percentile95(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = (95 * v.len()).div_ceil(100).max(1);
    v[rank - 1]
}

pub struct SurfaceOracle {
    pub hd: f64,
    pub hd95: f64,
    pub asd: f64,
}

pub fn surface_oracle(pred: &Mask, gt: &Mask, spacing: [f64; 3]) -> Option<SurfaceOracle> {
    if pred.count() == 0 || gt.count() == 0 {
        return None;
    }
    let a = directed(pred, gt, spacing);
    let b = directed(gt, pred, spacing);
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let all: Vec<f64> = a.iter().chain(&b).copied().collect();
    Some(SurfaceOracle {
        hd: max(&a).max(max(&b)),
        hd95: percentile95(&a).max(percentile95(&b)),
        asd: all.iter().sum::<f64>() / all.len() as f64,
    })
}

pub fn dice_oracle(pred: &Mask, gt: &Mask) -> f64 {
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        p += (a != 0) as usize;
        g += (b != 0) as usize;
        inter += (a != 0 && b != 0) as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

pub fn noise(shape: [usize; 4], seed: u64) -> nerd::Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    nerd::Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

/// Central-difference gradient of `objective` with respect to every
/// parameter of `model`, in visiting order.
pub fn numeric_gradient<M: nerd::nn::Parameterized>(model: &mut M, eps: f64, objective: impl Fn(&M) -> f64) -> Vec<f64> {
    let total = model.param_count();
    let shift = |model: &mut M, idx: usize, d: f64| {
        let mut k = 0;
        model.visit_params_mut(&mut |p| {
            for v in p.value.iter_mut() {
                if k == idx {
                    *v += d;
                }
                k += 1;
            }
        });
    };
    (0..total)
        .map(|idx| {
            shift(model, idx, eps);
            let up = objective(model);
            shift(model, idx, -2.0 * eps);
            let down = objective(model);
            shift(model, idx, eps);
            (up - down) / (2.0 * eps)
        })
        .collect()
}

fn jitter(model: &mut impl nerd::nn::Parameterized, seed: u64, scale: f64) {
    let mut r = rng(seed ^ 0x5eed);
    model.visit_params_mut(&mut |p| p.value.iter_mut().for_each(|v| *v += r.random_range(-scale..scale)));
}

/// Normwise relative error, backprop vs central differences, for the tiny
/// backbone on one `size x size` input at a jittered parameter point.
pub fn backbone_gradient_error(size: usize, seed: u64) -> f64 {
    use nerd::backbone::{build_backbone, BackboneConfig};
    use nerd::nn::Parameterized;

    let mut net = build_backbone(BackboneConfig::with_filters(vec![2, 2, 2, 2, 2], 1), seed).unwrap();
    jitter(&mut net, seed, 0.1);
    let x = noise([1, size, size, 1], seed + 1);
    let (f, trace) = net.extract_features(&x).unwrap();
    let probe = noise(f.shape(), seed + 2);
    net.zero_grad();
    net.backward(&trace, &probe);
    let mut analytic = Vec::new();
    net.visit_params(&mut |p| analytic.extend_from_slice(&p.grad));
    let numeric =
        numeric_gradient(&mut net, 1e-6, |net| net.features(&x).unwrap().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum());
    relative_error(&analytic, &numeric)
}

/// Same check for a head (calibrator included) on `2 x h x w x c` features:
/// the larger of the parameter and feature gradient errors.
pub fn head_gradient_error(config: nerd::heads::HeadConfig, h: usize, w: usize, c: usize, seed: u64) -> f64 {
    use nerd::heads::Head;
    use nerd::nn::Parameterized;

    let mut head = Head::new(config, c, &mut rng(seed)).unwrap();
    jitter(&mut head, seed, 0.3);
    let x = noise([2, h, w, c], seed + 1);
    let mut r = rng(seed + 2);
    let probe: Vec<f64> = (0..2 * h * w).map(|_| r.random_range(-1.0..1.0)).collect();
    let score =
        |head: &Head, x: &nerd::Tensor| -> f64 { head.forward(x.clone()).unwrap().0.values.iter().zip(&probe).map(|(a, b)| a * b).sum() };
    head.zero_grad();
    let (_, cache) = head.forward(x.clone()).unwrap();
    let dx = head.backward(&cache, &probe);
    let mut analytic = Vec::new();
    head.visit_params(&mut |p| analytic.extend_from_slice(&p.grad));
    let eps = 1e-6;
    let numeric = numeric_gradient(&mut head, eps, |head| score(head, &x));
    let numeric_x: Vec<f64> = (0..x.data().len())
        .map(|k| {
            let mut xp = x.clone();
            xp.data_mut()[k] += eps;
            let up = score(&head, &xp);
            xp.data_mut()[k] -= 2.0 * eps;
            (up - score(&head, &xp)) / (2.0 * eps)
        })
        .collect();
    relative_error(&analytic, &numeric).max(relative_error(dx.data(), &numeric_x))
}
