//! Minimal layer library with hand-written backward passes.
//!
//! Layers keep their own parameter gradients. A forward pass returns a cache
//! that the matching backward pass consumes; backward accumulates into the
//! parameter gradients and returns the gradient with respect to the input.
//! Batch items are processed independently and partial parameter gradients
//! are summed in batch order, so results do not depend on thread scheduling.

mod conv;
mod dense;
mod norm;
mod ops;

pub use conv::Conv2d;
pub use dense::{Dense, Mlp, MlpCache};
pub use norm::{InstanceNorm, NormCache};
pub use ops::{concat_channels, max_pool2, max_pool2_backward, relu_backward, relu_inplace, split_channels, upsample2, upsample2_backward};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A named trainable array with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { name: name.into(), shape: shape.to_vec(), value: vec![0.0; n], grad: vec![0.0; n] }
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: f64) -> Self {
        let mut p = Self::zeros(name, shape);
        p.value.fill(v);
        p
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(name, shape);
        for v in &mut p.value {
            *v = rng.random_range(-bound..=bound);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything owning trainable parameters.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    /// Exact number of trainable scalars.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }
}

impl<T: Parameterized> Parameterized for [T] {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for item in self {
            item.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for item in self {
            item.visit_params_mut(f);
        }
    }
}

impl<T: Parameterized> Parameterized for Vec<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.as_slice().visit_params(f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.as_mut_slice().visit_params_mut(f)
    }
}

/// He-uniform bound for a layer followed by a ReLU.
pub(crate) fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

/// `C = A * B + beta * C` over strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa, "gemm: A out of bounds");
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb, "gemm: B out of bounds");
    }
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc, "gemm: C out of bounds");
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Adds `src` into `dst` elementwise.
pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn add_into_tensor(dst: &mut crate::tensor::Tensor, src: &crate::tensor::Tensor) {
    assert_eq!(dst.shape(), src.shape(), "tensor add shape mismatch");
    add_into(dst.data_mut(), src.data());
}
