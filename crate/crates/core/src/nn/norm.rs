use rayon::prelude::*;

use super::{add_into, Param, Parameterized};
use crate::tensor::Tensor;

const EPS: f64 = 1e-5;

/// Per-sample, per-channel normalization over the spatial axes with a
/// learned affine transform.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    channels: usize,
    pub gamma: Param,
    pub beta: Param,
}

pub struct NormCache {
    xhat: Tensor,
    /// `1 / sqrt(var + eps)` per `(sample, channel)`.
    inv_std: Vec<f64>,
}

impl InstanceNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::filled(format!("{name}.gamma"), &[channels], 1.0),
            beta: Param::zeros(format!("{name}.beta"), &[channels]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, NormCache) {
        let [b, h, w, c] = x.shape();
        assert_eq!(c, self.channels, "norm channels");
        let n = (h * w) as f64;
        let mut xhat = x.clone();
        let mut inv_std = vec![0.0; b * c];
        xhat.data_mut().par_chunks_mut(h * w * c).zip(inv_std.par_chunks_mut(c)).for_each(|(xs, inv)| {
            let mut mean = vec![0.0; c];
            for px in xs.chunks_exact(c) {
                add_into(&mut mean, px);
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![0.0; c];
            for px in xs.chunks_exact(c) {
                for ch in 0..c {
                    let d = px[ch] - mean[ch];
                    var[ch] += d * d;
                }
            }
            for ch in 0..c {
                inv[ch] = 1.0 / (var[ch] / n + EPS).sqrt();
            }
            for px in xs.chunks_exact_mut(c) {
                for ch in 0..c {
                    px[ch] = (px[ch] - mean[ch]) * inv[ch];
                }
            }
        });
        let mut y = xhat.clone();
        for px in y.data_mut().chunks_exact_mut(c) {
            for ch in 0..c {
                px[ch] = px[ch] * self.gamma.value[ch] + self.beta.value[ch];
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &NormCache, dy: &Tensor) -> Tensor {
        let [b, h, w, c] = dy.shape();
        let n = (h * w) as f64;
        let gamma = &self.gamma.value;
        let mut dx = Tensor::zeros(dy.shape());
        let partials: Vec<(Vec<f64>, Vec<f64>)> = dx
            .data_mut()
            .par_chunks_mut(h * w * c)
            .enumerate()
            .map(|(s, dxs)| {
                let dys = dy.sample(s);
                let xh = cache.xhat.sample(s);
                let inv = &cache.inv_std[s * c..(s + 1) * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for (g, xp) in dys.chunks_exact(c).zip(xh.chunks_exact(c)) {
                    for ch in 0..c {
                        dgamma[ch] += g[ch] * xp[ch];
                        dbeta[ch] += g[ch];
                        let dxhat = g[ch] * gamma[ch];
                        sum_dxhat[ch] += dxhat;
                        sum_dxhat_xhat[ch] += dxhat * xp[ch];
                    }
                }
                for ((out, g), xp) in dxs.chunks_exact_mut(c).zip(dys.chunks_exact(c)).zip(xh.chunks_exact(c)) {
                    for ch in 0..c {
                        let dxhat = g[ch] * gamma[ch];
                        out[ch] = inv[ch] / n * (n * dxhat - sum_dxhat[ch] - xp[ch] * sum_dxhat_xhat[ch]);
                    }
                }
                (dgamma, dbeta)
            })
            .collect();
        debug_assert_eq!(partials.len(), b);
        for (dg, db) in &partials {
            add_into(&mut self.gamma.grad, dg);
            add_into(&mut self.beta.grad, db);
        }
        dx
    }
}

impl Parameterized for InstanceNorm {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..2 * 3 * 3 * 2).map(|_| rng.random_range(-5.0..5.0)).collect();
        let x = Tensor::from_vec([2, 3, 3, 2], data).unwrap();
        let (y, _) = InstanceNorm::new("n", 2).forward(&x);
        for s in 0..2 {
            for ch in 0..2 {
                let vals: Vec<f64> = y.sample(s).iter().skip(ch).step_by(2).copied().collect();
                let mean = vals.iter().sum::<f64>() / 9.0;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 9.0;
                assert!(mean.abs() < 1e-12);
                assert!((var - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut norm = InstanceNorm::new("n", 2);
        norm.gamma.value = vec![1.3, -0.7];
        norm.beta.value = vec![0.2, 0.1];
        let x = Tensor::from_vec([2, 3, 2, 2], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let up: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |n: &InstanceNorm, x: &Tensor| n.forward(x).0.data().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
        let (_, cache) = norm.forward(&x);
        let dx = norm.backward(&cache, &Tensor::from_vec([2, 3, 2, 2], up.clone()).unwrap());
        let eps = 1e-6;
        for k in 0..24 {
            let mut xp = x.clone();
            xp.data_mut()[k] += eps;
            let mut xm = x.clone();
            xm.data_mut()[k] -= eps;
            let num = (loss(&norm, &xp) - loss(&norm, &xm)) / (2.0 * eps);
            assert!((num - dx.data()[k]).abs() < 1e-6, "{num} vs {}", dx.data()[k]);
        }
        for k in 0..2 {
            let mut n2 = norm.clone();
            n2.gamma.value[k] += eps;
            let up_l = loss(&n2, &x);
            n2.gamma.value[k] -= 2.0 * eps;
            let down_l = loss(&n2, &x);
            assert!(((up_l - down_l) / (2.0 * eps) - norm.gamma.grad[k]).abs() < 1e-6);
        }
    }
}
