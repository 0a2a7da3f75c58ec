//! Convolution and dense layers with explicit backward passes.
//!
//! Feature maps are `[C, H, W]` tensors. Convolutions lower to a single GEMM
//! through im2col; the column buffer is kept for the weight gradient.

use super::params::Tensor;

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: every caller passes buffers whose extents match (m, k, n)
    // under the given strides; `c` is contiguous row-major m x n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, dilation: usize) -> Self {
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: dilation * (kernel / 2),
            dilation,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kernel, self.kernel]
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        (
            (h + 2 * self.pad - span) / self.stride + 1,
            (w + 2 * self.pad - span) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &Tensor) -> Vec<f64> {
        let (c, h, w) = x.chw();
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel;
        let mut cols = vec![0.0; c * k * k * ho * wo];
        for ci in 0..c {
            let plane = &x.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix =
                                (ox * self.stride + kx * self.dilation) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], c: usize, h: usize, w: usize) -> Tensor {
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel;
        let mut dx = Tensor::zeros(&[c, h, w]);
        for ci in 0..c {
            let plane = &mut dx.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = iy as usize * w;
                        for ox in 0..wo {
                            let ix =
                                (ox * self.stride + kx * self.dilation) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[base + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the output map and the column buffer needed by `backward`.
    pub fn forward(&self, weight: &Tensor, bias: &Tensor, x: &Tensor) -> (Tensor, Vec<f64>) {
        let (c, h, w) = x.chw();
        debug_assert_eq!(c, self.in_ch);
        let (ho, wo) = self.out_size(h, w);
        let cols = if self.is_pointwise() {
            x.data.clone()
        } else {
            self.im2col(x)
        };
        let n = ho * wo;
        let kk = self.fan_in();
        let mut out = Tensor::zeros(&[self.out_ch, ho, wo]);
        for (o, chunk) in out.data.chunks_mut(n).enumerate() {
            chunk.fill(bias.data[o]);
        }
        gemm(
            self.out_ch,
            kk,
            n,
            1.0,
            &weight.data,
            kk as isize,
            1,
            &cols,
            n as isize,
            1,
            1.0,
            &mut out.data,
        );
        (out, cols)
    }

    /// Accumulates weight/bias gradients; returns the input gradient when
    /// `need_input_grad` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        weight: &Tensor,
        input_shape: (usize, usize, usize),
        cols: &[f64],
        dout: &Tensor,
        dweight: &mut Tensor,
        dbias: &mut Tensor,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let (_, ho, wo) = dout.chw();
        let n = ho * wo;
        let kk = self.fan_in();
        for (o, chunk) in dout.data.chunks(n).enumerate() {
            dbias.data[o] += chunk.iter().sum::<f64>();
        }
        gemm(
            self.out_ch,
            n,
            kk,
            1.0,
            &dout.data,
            n as isize,
            1,
            cols,
            1,
            n as isize,
            1.0,
            &mut dweight.data,
        );
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![0.0; kk * n];
        gemm(
            kk,
            self.out_ch,
            n,
            1.0,
            &weight.data,
            1,
            kk as isize,
            &dout.data,
            n as isize,
            1,
            0.0,
            &mut dcols,
        );
        let (c, h, w) = input_shape;
        if self.is_pointwise() {
            Some(Tensor {
                shape: vec![c, h, w],
                data: dcols,
            })
        } else {
            Some(self.col2im(&dcols, c, h, w))
        }
    }
}

pub fn relu_inplace(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zero the gradient wherever the (post-ReLU) activation is not positive.
pub fn relu_backward_inplace(grad: &mut Tensor, activation: &Tensor) {
    for (g, a) in grad.data.iter_mut().zip(&activation.data) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Row-batched dense layer: `y(n x out) = x(n x in) W^T + b` with `W` stored
/// `[out, in]`.
pub fn linear_forward(x: &[f64], rows: usize, weight: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (out_dim, in_dim) = (weight.shape[0], weight.shape[1]);
    let mut y = vec![0.0; rows * out_dim];
    for chunk in y.chunks_mut(out_dim) {
        chunk.copy_from_slice(&bias.data);
    }
    gemm(
        rows,
        in_dim,
        out_dim,
        1.0,
        x,
        in_dim as isize,
        1,
        &weight.data,
        1,
        in_dim as isize,
        1.0,
        &mut y,
    );
    y
}

/// Accumulates `dW`, `db`; returns `dx (n x in)`.
pub fn linear_backward(
    x: &[f64],
    rows: usize,
    weight: &Tensor,
    dy: &[f64],
    dweight: &mut Tensor,
    dbias: &mut Tensor,
) -> Vec<f64> {
    let (out_dim, in_dim) = (weight.shape[0], weight.shape[1]);
    for row in dy.chunks(out_dim) {
        for (b, g) in dbias.data.iter_mut().zip(row) {
            *b += g;
        }
    }
    gemm(
        out_dim,
        rows,
        in_dim,
        1.0,
        dy,
        1,
        out_dim as isize,
        x,
        in_dim as isize,
        1,
        1.0,
        &mut dweight.data,
    );
    let mut dx = vec![0.0; rows * in_dim];
    gemm(
        rows,
        out_dim,
        in_dim,
        1.0,
        dy,
        out_dim as isize,
        1,
        &weight.data,
        in_dim as isize,
        1,
        0.0,
        &mut dx,
    );
    dx
}

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit; returns `(loss, dloss/dlogit)`.
pub fn bce_with_logit(z: f64, target: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
    (loss, sigmoid(z) - target)
}

/// Smooth-L1 (Huber) with transition `beta`; returns `(loss, dloss/dx)`.
pub fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    let a = x.abs();
    if a < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (a - 0.5 * beta, x.signum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_conv(conv: &Conv2d, w: &Tensor, b: &Tensor, x: &Tensor) -> Tensor {
        let (c, h, wd) = x.chw();
        let (ho, wo) = conv.out_size(h, wd);
        let mut out = Tensor::zeros(&[conv.out_ch, ho, wo]);
        for o in 0..conv.out_ch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data[o];
                    for ci in 0..c {
                        for ky in 0..conv.kernel {
                            for kx in 0..conv.kernel {
                                let iy = (oy * conv.stride + ky * conv.dilation) as isize
                                    - conv.pad as isize;
                                let ix = (ox * conv.stride + kx * conv.dilation) as isize
                                    - conv.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.data[((o * c + ci) * conv.kernel + ky) * conv.kernel
                                        + kx]
                                        * x.data[(ci * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out.data[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for conv in [
            Conv2d::new(3, 4, 3, 2, 1),
            Conv2d::new(2, 3, 3, 1, 2),
            Conv2d::new(3, 2, 1, 1, 1),
        ] {
            let x = rand_tensor(&mut rng, &[conv.in_ch, 9, 7]);
            let w = rand_tensor(&mut rng, &conv.weight_shape());
            let b = rand_tensor(&mut rng, &[conv.out_ch]);
            let (y, _) = conv.forward(&w, &b, &x);
            let expect = naive_conv(&conv, &w, &b, &x);
            assert_eq!(y.shape, expect.shape);
            for (a, e) in y.data.iter().zip(&expect.data) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new(2, 3, 3, 2, 1);
        let x = rand_tensor(&mut rng, &[2, 6, 5]);
        let w = rand_tensor(&mut rng, &conv.weight_shape());
        let b = rand_tensor(&mut rng, &[3]);
        let (y, cols) = conv.forward(&w, &b, &x);
        let g = rand_tensor(&mut rng, &y.shape);
        let loss = |w: &Tensor, x: &Tensor| -> f64 {
            let (y, _) = conv.forward(w, &b, x);
            y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
        };
        let mut dw = Tensor::zeros(&w.shape);
        let mut db = Tensor::zeros(&b.shape);
        let dx = conv
            .backward(&w, x.chw(), &cols, &g, &mut dw, &mut db, true)
            .unwrap();
        let eps = 1e-6;
        for i in [0, 5, 17, 40] {
            let mut wp = w.clone();
            wp.data[i] += eps;
            let mut wm = w.clone();
            wm.data[i] -= eps;
            let num = (loss(&wp, &x) - loss(&wm, &x)) / (2.0 * eps);
            assert!((num - dw.data[i]).abs() < 1e-6);
        }
        for i in [0, 7, 31, 59] {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let num = (loss(&w, &xp) - loss(&w, &xm)) / (2.0 * eps);
            assert!((num - dx.data[i]).abs() < 1e-6);
        }
        let total: f64 = g.data.iter().take(y.shape[1] * y.shape[2]).sum();
        assert!((db.data[0] - total).abs() < 1e-12);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3]);
        let x = rand_tensor(&mut rng, &[2, 4]);
        let g = rand_tensor(&mut rng, &[2, 3]);
        let loss = |w: &Tensor, x: &[f64]| -> f64 {
            linear_forward(x, 2, w, &b)
                .iter()
                .zip(&g.data)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut dw = Tensor::zeros(&[3, 4]);
        let mut db = Tensor::zeros(&[3]);
        let dx = linear_backward(&x.data, 2, &w, &g.data, &mut dw, &mut db);
        let eps = 1e-6;
        for i in 0..12 {
            let mut wp = w.clone();
            wp.data[i] += eps;
            let mut wm = w.clone();
            wm.data[i] -= eps;
            let num = (loss(&wp, &x.data) - loss(&wm, &x.data)) / (2.0 * eps);
            assert!((num - dw.data[i]).abs() < 1e-7);
        }
        for i in 0..8 {
            let mut xp = x.data.clone();
            xp[i] += eps;
            let mut xm = x.data.clone();
            xm[i] -= eps;
            let num = (loss(&w, &xp) - loss(&w, &xm)) / (2.0 * eps);
            assert!((num - dx[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn scalar_losses() {
        let (l, g) = bce_with_logit(0.0, 1.0);
        assert!((l - 2f64.ln()).abs() < 1e-12 && (g + 0.5).abs() < 1e-12);
        let (l, _) = bce_with_logit(-800.0, 0.0);
        assert!(l.is_finite() && l < 1e-300);
        assert_eq!(smooth_l1(0.5, 1.0), (0.125, 0.5));
        assert_eq!(smooth_l1(-2.0, 1.0), (1.5, -1.0));
        let p = softmax(&[1000.0, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
    }
}
