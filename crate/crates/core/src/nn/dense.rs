use rand_chacha::ChaCha8Rng;

use super::{add_into, gemm, he_bound, Param, Parameterized};

/// Fully connected layer over row-major `rows x inputs` matrices.
/// Weight layout is `[inputs, outputs]`.
#[derive(Clone, Debug)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::uniform(format!("{name}.weight"), &[inputs, outputs], he_bound(inputs), rng),
            bias: Param::zeros(format!("{name}.bias"), &[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        assert_eq!(x.len(), rows * self.inputs, "dense input size");
        let mut y = vec![0.0; rows * self.outputs];
        gemm(rows, self.inputs, self.outputs, x, self.inputs, 1, &self.weight.value, self.outputs, 1, 0.0, &mut y, self.outputs, 1);
        for r in y.chunks_exact_mut(self.outputs) {
            add_into(r, &self.bias.value);
        }
        y
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, x: &[f64], dy: &[f64], rows: usize, input_grad: bool) -> Option<Vec<f64>> {
        let (i, o) = (self.inputs, self.outputs);
        gemm(i, rows, o, x, 1, i, dy, o, 1, 1.0, &mut self.weight.grad, o, 1);
        for r in dy.chunks_exact(o) {
            add_into(&mut self.bias.grad, r);
        }
        input_grad.then(|| {
            let mut dx = vec![0.0; rows * i];
            gemm(rows, o, i, dy, o, 1, &self.weight.value, 1, o, 0.0, &mut dx, i, 1);
            dx
        })
    }
}

impl Parameterized for Dense {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Stack of dense layers with ReLU between them. The last layer is linear
/// unless `activate_last` is set.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    activate_last: bool,
}

pub struct MlpCache {
    rows: usize,
    /// Input of every layer followed by the final output.
    acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("mlp cache has an output")
    }
}

impl Mlp {
    /// `dims` lists every width from input to output, so it has at least two
    /// entries.
    pub fn new(name: &str, dims: &[usize], activate_last: bool, rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims.windows(2).enumerate().map(|(k, d)| Dense::new(&format!("{name}.{k}"), d[0], d[1], rng)).collect();
        Self { layers, activate_last }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty mlp").outputs
    }

    pub fn last_mut(&mut self) -> &mut Dense {
        self.layers.last_mut().expect("non-empty mlp")
    }

    fn activated(&self, k: usize) -> bool {
        k + 1 < self.layers.len() || self.activate_last
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> MlpCache {
        let mut acts = vec![x.to_vec()];
        for (k, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(acts.last().expect("input"), rows);
            if self.activated(k) {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(y);
        }
        MlpCache { rows, acts }
    }

    pub fn backward(&mut self, cache: &MlpCache, dout: &[f64], input_grad: bool) -> Option<Vec<f64>> {
        let mut grad = dout.to_vec();
        let n = self.layers.len();
        for k in (0..n).rev() {
            if self.activated(k) {
                for (g, &y) in grad.iter_mut().zip(&cache.acts[k + 1]) {
                    if y <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let need = k > 0 || input_grad;
            match self.layers[k].backward(&cache.acts[k], &grad, cache.rows, need) {
                Some(g) => grad = g,
                None => return None,
            }
        }
        Some(grad)
    }
}

impl Parameterized for Mlp {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.layers.visit_params(f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layers.visit_params_mut(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mlp = Mlp::new("m", &[4, 6, 3], false, &mut rng);
        for l in &mut mlp.layers {
            for b in &mut l.bias.value {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        let rows = 5;
        let x: Vec<f64> = (0..rows * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..rows * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |m: &Mlp, x: &[f64]| m.forward(x, rows).output().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
        let cache = mlp.forward(&x, rows);
        let dx = mlp.backward(&cache, &up, true).unwrap();
        let eps = 1e-6;
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp[k] += eps;
            let mut xm = x.clone();
            xm[k] -= eps;
            assert!(((loss(&mlp, &xp) - loss(&mlp, &xm)) / (2.0 * eps) - dx[k]).abs() < 1e-7);
        }
        let w0 = mlp.layers[0].weight.grad.clone();
        for k in 0..w0.len() {
            let mut m2 = mlp.clone();
            m2.layers[0].weight.value[k] += eps;
            let a = loss(&m2, &x);
            m2.layers[0].weight.value[k] -= 2.0 * eps;
            let b = loss(&m2, &x);
            assert!(((a - b) / (2.0 * eps) - w0[k]).abs() < 1e-7);
        }
    }
}
