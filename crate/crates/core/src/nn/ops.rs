use crate::tensor::Tensor;

pub fn relu_inplace(x: &mut Tensor) {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient of a ReLU given its output `y`.
pub fn relu_backward(y: &Tensor, mut dy: Tensor) -> Tensor {
    for (g, &v) in dy.data_mut().iter_mut().zip(y.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    dy
}

/// 2x2 max pooling with stride 2. Also returns, for each output value, the
/// flat index of the winning input value (first maximum wins ties).
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let [b, h, w, c] = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros([b, oh, ow, c]);
    let mut arg = vec![0usize; b * oh * ow * c];
    let xd = x.data();
    let yd = y.data_mut();
    for s in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = ((s * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                        if best == usize::MAX || xd[idx] > best_v {
                            best = idx;
                            best_v = xd[idx];
                        }
                    }
                    let o = ((s * oh + i) * ow + j) * c + ch;
                    yd[o] = best_v;
                    arg[o] = best;
                }
            }
        }
    }
    (y, arg)
}

pub fn max_pool2_backward(arg: &[usize], dy: &Tensor, input_shape: [usize; 4]) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in arg.iter().zip(dy.data()) {
        d[idx] += g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let [b, h, w, c] = x.shape();
    let mut y = Tensor::zeros([b, 2 * h, 2 * w, c]);
    let (oh, ow) = (2 * h, 2 * w);
    let xd = x.data();
    let yd = y.data_mut();
    for s in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                let src = ((s * h + i / 2) * w + j / 2) * c;
                let dst = ((s * oh + i) * ow + j) * c;
                yd[dst..dst + c].copy_from_slice(&xd[src..src + c]);
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let [b, oh, ow, c] = dy.shape();
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Tensor::zeros([b, h, w, c]);
    let gd = dy.data();
    let xd = dx.data_mut();
    for s in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                let src = ((s * oh + i) * ow + j) * c;
                let dst = ((s * h + i / 2) * w + j / 2) * c;
                for ch in 0..c {
                    xd[dst + ch] += gd[src + ch];
                }
            }
        }
    }
    dx
}

/// Concatenates along the channel axis, `a` first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let [n, h, w, ca] = a.shape();
    let cb = b.channels();
    assert_eq!(b.shape()[..3], [n, h, w], "concat spatial mismatch");
    let c = ca + cb;
    let mut out = Vec::with_capacity(n * h * w * c);
    for (pa, pb) in a.data().chunks_exact(ca).zip(b.data().chunks_exact(cb)) {
        out.extend_from_slice(pa);
        out.extend_from_slice(pb);
    }
    Tensor::from_vec([n, h, w, c], out).expect("concat shape")
}

/// Inverse of [`concat_channels`]: splits off the first `ca` channels.
pub fn split_channels(x: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let [n, h, w, c] = x.shape();
    let cb = c - ca;
    let mut a = Vec::with_capacity(n * h * w * ca);
    let mut b = Vec::with_capacity(n * h * w * cb);
    for px in x.data().chunks_exact(c) {
        a.extend_from_slice(&px[..ca]);
        b.extend_from_slice(&px[ca..]);
    }
    (Tensor::from_vec([n, h, w, ca], a).expect("split shape"), Tensor::from_vec([n, h, w, cb], b).expect("split shape"))
}
