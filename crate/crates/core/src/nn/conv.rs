use std::cell::RefCell;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{add_into, gemm, he_bound, Param, Parameterized};
use crate::tensor::Tensor;

/// Square convolution with stride 1 and zero padding `kernel / 2`
/// (1x1 or 3x3). Weight layout is `[kernel * kernel * cin, cout]` with the
/// row index `(ky * kernel + kx) * cin + ci`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    cin: usize,
    cout: usize,
    kernel: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    pub fn new(name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels are supported");
        let rows = kernel * kernel * cin;
        Self {
            cin,
            cout,
            kernel,
            weight: Param::uniform(format!("{name}.weight"), &[rows, cout], he_bound(rows), rng),
            bias: Param::zeros(format!("{name}.bias"), &[cout]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    fn rows(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let [b, h, w, c] = x.shape();
        assert_eq!(c, self.cin, "conv input channels");
        let mut out = Tensor::zeros([b, h, w, self.cout]);
        let pixels = h * w;
        let rows = self.rows();
        let cout = self.cout;
        out.data_mut().par_chunks_mut(pixels * cout).enumerate().for_each(|(s, y)| {
            let xs = x.sample(s);
            with_cols(self.kernel, xs, h, w, c, |cols| {
                gemm(pixels, rows, cout, cols, rows, 1, &self.weight.value, cout, 1, 0.0, y, cout, 1);
            });
            for px in y.chunks_exact_mut(cout) {
                add_into(px, &self.bias.value);
            }
        });
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let [b, h, w, c] = x.shape();
        assert_eq!(dy.shape(), [b, h, w, self.cout], "conv output gradient shape");
        let pixels = h * w;
        let rows = self.rows();
        let cout = self.cout;
        let weight = &self.weight.value;
        let kernel = self.kernel;
        let mut dx = Tensor::zeros(x.shape());
        let partials: Vec<(Vec<f64>, Vec<f64>)> = dx
            .data_mut()
            .par_chunks_mut(pixels * c)
            .enumerate()
            .map(|(s, dxs)| {
                let xs = x.sample(s);
                let dys = dy.sample(s);
                let mut dw = vec![0.0; rows * cout];
                // dW = cols^T * dY
                with_cols(kernel, xs, h, w, c, |cols| {
                    gemm(rows, pixels, cout, cols, 1, rows, dys, cout, 1, 0.0, &mut dw, cout, 1);
                });
                let mut db = vec![0.0; cout];
                for px in dys.chunks_exact(cout) {
                    add_into(&mut db, px);
                }
                // dcols = dY * W^T
                if kernel == 1 {
                    gemm(pixels, cout, rows, dys, cout, 1, weight, 1, cout, 0.0, dxs, rows, 1);
                } else {
                    DCOLS.with_borrow_mut(|dcols| {
                        let dcols = scratch(dcols, pixels * rows);
                        gemm(pixels, cout, rows, dys, cout, 1, weight, 1, cout, 0.0, dcols, rows, 1);
                        col2im3(dcols, h, w, c, dxs);
                    });
                }
                (dw, db)
            })
            .collect();
        for (dw, db) in &partials {
            add_into(&mut self.weight.grad, dw);
            add_into(&mut self.bias.grad, db);
        }
        dx
    }
}

impl Parameterized for Conv2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

thread_local! {
    static COLS: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
    static DCOLS: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Reusable per-thread buffer of length `len`; contents are unspecified.
fn scratch(buf: &mut Vec<f64>, len: usize) -> &mut [f64] {
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
    &mut buf[..len]
}

/// Runs `f` on the im2col matrix of one sample (the input itself for 1x1).
fn with_cols<R>(kernel: usize, x: &[f64], h: usize, w: usize, c: usize, f: impl FnOnce(&[f64]) -> R) -> R {
    if kernel == 1 {
        return f(x);
    }
    COLS.with_borrow_mut(|buf| {
        let cols = scratch(buf, h * w * 9 * c);
        im2col3(x, h, w, c, cols);
        f(cols)
    })
}

fn im2col3(x: &[f64], h: usize, w: usize, c: usize, cols: &mut [f64]) {
    let rows = 9 * c;
    for i in 0..h {
        for j in 0..w {
            let row = &mut cols[(i * w + j) * rows..(i * w + j + 1) * rows];
            if i == 0 || j == 0 || i + 1 == h || j + 1 == w {
                row.fill(0.0);
            }
            for ky in 0..3 {
                let si = i + ky;
                if si == 0 || si > h {
                    continue;
                }
                let si = si - 1;
                for kx in 0..3 {
                    let sj = j + kx;
                    if sj == 0 || sj > w {
                        continue;
                    }
                    let sj = sj - 1;
                    let src = &x[(si * w + sj) * c..(si * w + sj + 1) * c];
                    row[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c].copy_from_slice(src);
                }
            }
        }
    }
}

fn col2im3(cols: &[f64], h: usize, w: usize, c: usize, dx: &mut [f64]) {
    let rows = 9 * c;
    for i in 0..h {
        for j in 0..w {
            let row = &cols[(i * w + j) * rows..(i * w + j + 1) * rows];
            for ky in 0..3 {
                let si = i + ky;
                if si == 0 || si > h {
                    continue;
                }
                let si = si - 1;
                for kx in 0..3 {
                    let sj = j + kx;
                    if sj == 0 || sj > w {
                        continue;
                    }
                    let sj = sj - 1;
                    add_into(&mut dx[(si * w + sj) * c..(si * w + sj + 1) * c], &row[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c]);
                }
            }
        }
    }
}
