//! Minimal convolutional building blocks with handwritten backward passes.
//!
//! Everything runs in f64 on channel-first `(C, H, W)` tensors, one image at
//! a time. Convolutions lower to an im2col matrix so the heavy lifting is a
//! single matrix product in both directions; the other layers (ReLU,
//! bilinear resize) are cheap elementwise or scatter/gather passes. There is
//! no autodiff: each layer exposes `forward` and a matching `backward` that
//! consumes the upstream cotangent, and the finite-difference tests below
//! hold every analytic gradient to account.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 2D convolution with square kernels, symmetric zero padding, and optional
/// dilation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// Kernel tensor, shape `(C_out, C_in, K, K)`.
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

/// Gradient (or momentum) buffers shaped like one convolution's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvGrad {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
}

impl Conv2d {
    /// He-style Gaussian init: `std = sqrt(2 / fan_in)`, zero bias.
    pub fn new_random(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let std = (2.0 / (c_in * kernel * kernel) as f64).sqrt();
        let w = Array4::from_shape_fn((c_out, c_in, kernel, kernel), |_| {
            let u: f64 = rng.sample(rand_distr::StandardNormal);
            u * std
        });
        Self {
            w,
            b: Array1::zeros(c_out),
            stride,
            padding,
            dilation,
        }
    }

    pub fn kernel(&self) -> usize {
        self.w.dim().2
    }

    pub fn c_in(&self) -> usize {
        self.w.dim().1
    }

    pub fn c_out(&self) -> usize {
        self.w.dim().0
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Spatial output extent for an input of the given extent.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = self.dilation * (self.kernel() - 1) + 1;
        let fit = |n: usize| -> Result<usize> {
            let padded = n + 2 * self.padding;
            if padded < span {
                return Err(Error::Validation(format!(
                    "input extent {n} too small for kernel span {span}"
                )));
            }
            Ok((padded - span) / self.stride + 1)
        };
        Ok((fit(h)?, fit(w)?))
    }

    /// Lower the input to a `(C_in·K·K, H_out·W_out)` patch matrix.
    fn im2col(&self, x: &Array3<f64>, out: (usize, usize)) -> Array2<f64> {
        let (c_in, h, w) = x.dim();
        let k = self.kernel();
        let (ho, wo) = out;
        let mut cols = Array2::<f64>::zeros((c_in * k * k, ho * wo));
        for c in 0..c_in {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki * self.dilation) as isize
                            - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kj * self.dilation) as isize
                                - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[(row, oy * wo + ox)] = x[(c, iy as usize, ix as usize)];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Conv2d::im2col`]: scatter-add patch-matrix cotangents
    /// back onto an input-shaped tensor.
    fn col2im(&self, dcols: &Array2<f64>, input_dim: (usize, usize, usize)) -> Array3<f64> {
        let (c_in, h, w) = input_dim;
        let k = self.kernel();
        let n_pos = dcols.dim().1;
        let wo = if n_pos == 0 { 0 } else { self.count_wo(w) };
        let mut dx = Array3::<f64>::zeros((c_in, h, w));
        for c in 0..c_in {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for pos in 0..n_pos {
                        let (oy, ox) = (pos / wo, pos % wo);
                        let iy = (oy * self.stride + ki * self.dilation) as isize
                            - self.padding as isize;
                        let ix = (ox * self.stride + kj * self.dilation) as isize
                            - self.padding as isize;
                        if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(c, iy as usize, ix as usize)] += dcols[(row, pos)];
                    }
                }
            }
        }
        dx
    }

    fn count_wo(&self, w: usize) -> usize {
        let span = self.dilation * (self.kernel() - 1) + 1;
        (w + 2 * self.padding - span) / self.stride + 1
    }

    pub fn forward(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        let (c_in, h, w) = x.dim();
        if c_in != self.c_in() {
            return Err(Error::Validation(format!(
                "conv expects {} input channels, got {c_in}",
                self.c_in()
            )));
        }
        let (ho, wo) = self.output_size(h, w)?;
        let cols = self.im2col(x, (ho, wo));
        let k = self.kernel();
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((self.c_out(), self.c_in() * k * k))
            .expect("kernel tensor is contiguous");
        let mut y_mat = w_mat.dot(&cols);
        for (o, mut row) in y_mat.rows_mut().into_iter().enumerate() {
            row += self.b[o];
        }
        Ok(y_mat
            .into_shape_with_order((self.c_out(), ho, wo))
            .expect("fresh output is contiguous"))
    }

    /// Given the forward input and the output cotangent, produce the input
    /// cotangent and the parameter gradients.
    pub fn backward(&self, x: &Array3<f64>, dy: &Array3<f64>) -> Result<(Array3<f64>, ConvGrad)> {
        let (c_out, ho, wo) = dy.dim();
        if c_out != self.c_out() {
            return Err(Error::Validation(format!(
                "conv backward got {c_out} cotangent channels, expected {}",
                self.c_out()
            )));
        }
        let cols = self.im2col(x, (ho, wo));
        let dy_mat = dy
            .view()
            .into_shape_with_order((c_out, ho * wo))
            .expect("cotangent is contiguous");
        let db = dy_mat.sum_axis(Axis(1));
        let dw_mat = dy_mat.dot(&cols.t());
        let k = self.kernel();
        let dw = dw_mat
            .into_shape_with_order((c_out, self.c_in(), k, k))
            .expect("fresh gradient is contiguous");
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((c_out, self.c_in() * k * k))
            .expect("kernel tensor is contiguous");
        let dcols = w_mat.t().dot(&dy_mat);
        let dx = self.col2im(&dcols, x.dim());
        Ok((dx, ConvGrad { w: dw, b: db }))
    }

    pub fn zero_grad(&self) -> ConvGrad {
        ConvGrad {
            w: Array4::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    /// One SGD step on this layer's parameters (see [`sgd_step`]).
    pub fn sgd(&mut self, grad: &ConvGrad, velocity: &mut ConvGrad, opt: &SgdConfig, lr: f64) {
        sgd_step(
            self.w.as_slice_mut().unwrap(),
            grad.w.as_slice().unwrap(),
            velocity.w.as_slice_mut().unwrap(),
            opt,
            lr,
        );
        sgd_step(
            self.b.as_slice_mut().unwrap(),
            grad.b.as_slice().unwrap(),
            velocity.b.as_slice_mut().unwrap(),
            opt,
            lr,
        );
    }
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

/// ReLU cotangent: passes gradient only where the forward input was
/// strictly positive.
pub fn relu_backward(x: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
    dx
}

/// Sampling geometry for one output row/column of a bilinear resize with
/// half-pixel alignment: the two source indices and the blend weight of the
/// second one.
fn bilinear_taps(out: usize, src: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|i| {
            let s = ((i as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, src as f64 - 1.0);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Bilinear resize with half-pixel (align_corners = false) sampling.
pub fn bilinear_resize(x: &Array3<f64>, target: (usize, usize)) -> Result<Array3<f64>> {
    let (c, h, w) = x.dim();
    let (th, tw) = target;
    if th == 0 || tw == 0 || h == 0 || w == 0 {
        return Err(Error::Validation("resize extents must be nonzero".into()));
    }
    let rows = bilinear_taps(th, h);
    let cols = bilinear_taps(tw, w);
    let mut y = Array3::<f64>::zeros((c, th, tw));
    for ch in 0..c {
        for (i, &(y0, y1, wy)) in rows.iter().enumerate() {
            for (j, &(x0, x1, wx)) in cols.iter().enumerate() {
                y[(ch, i, j)] = (1.0 - wy) * (1.0 - wx) * x[(ch, y0, x0)]
                    + (1.0 - wy) * wx * x[(ch, y0, x1)]
                    + wy * (1.0 - wx) * x[(ch, y1, x0)]
                    + wy * wx * x[(ch, y1, x1)];
            }
        }
    }
    Ok(y)
}

/// Adjoint of [`bilinear_resize`]: scatter the output cotangent back onto a
/// source-shaped tensor with the same sampling weights.
pub fn bilinear_resize_backward(dy: &Array3<f64>, source: (usize, usize)) -> Result<Array3<f64>> {
    let (c, th, tw) = dy.dim();
    let (h, w) = source;
    if th == 0 || tw == 0 || h == 0 || w == 0 {
        return Err(Error::Validation("resize extents must be nonzero".into()));
    }
    let rows = bilinear_taps(th, h);
    let cols = bilinear_taps(tw, w);
    let mut dx = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for (i, &(y0, y1, wy)) in rows.iter().enumerate() {
            for (j, &(x0, x1, wx)) in cols.iter().enumerate() {
                let g = dy[(ch, i, j)];
                dx[(ch, y0, x0)] += (1.0 - wy) * (1.0 - wx) * g;
                dx[(ch, y0, x1)] += (1.0 - wy) * wx * g;
                dx[(ch, y1, x0)] += wy * (1.0 - wx) * g;
                dx[(ch, y1, x1)] += wy * wx * g;
            }
        }
    }
    Ok(dx)
}

/// Optimizer hyperparameters shared by every parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with momentum and decoupled-from-nothing weight decay (the decay is
/// folded into the gradient before the momentum update):
///
/// ```text
/// g' = g + wd·w
/// v  = momentum·v + g'
/// w -= lr·v
/// ```
pub fn sgd_step(param: &mut [f64], grad: &[f64], velocity: &mut [f64], opt: &SgdConfig, lr: f64) {
    debug_assert_eq!(param.len(), grad.len());
    debug_assert_eq!(param.len(), velocity.len());
    for ((w, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + opt.weight_decay * *w;
        *v = opt.momentum * *v + g;
        *w -= lr * *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use ndarray::array;
    use rand::Rng;

    /// Direct sliding-window convolution, written independently of im2col.
    fn conv_oracle(conv: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (c_in, h, w) = x.dim();
        let (ho, wo) = conv.output_size(h, w).unwrap();
        let k = conv.kernel();
        let mut y = Array3::<f64>::zeros((conv.c_out(), ho, wo));
        for o in 0..conv.c_out() {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = conv.b[o];
                    for c in 0..c_in {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * conv.stride + ki * conv.dilation) as isize
                                    - conv.padding as isize;
                                let ix = (ox * conv.stride + kj * conv.dilation) as isize
                                    - conv.padding as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += conv.w[(o, c, ki, kj)] * x[(c, iy as usize, ix as usize)];
                            }
                        }
                    }
                    y[(o, oy, ox)] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_forward_matches_direct_convolution() {
        let mut rng = derive_rng(80, "conv-forward", 0);
        for (k, stride, padding, dilation) in [(3, 1, 1, 1), (3, 2, 1, 1), (3, 1, 2, 2), (1, 1, 0, 1)]
        {
            let mut conv = Conv2d::new_random(2, 3, k, stride, padding, dilation, &mut rng);
            conv.b = Array1::from_shape_fn(3, |_| rng.gen_range(-0.5..0.5));
            let x = Array3::from_shape_fn((2, 7, 6), |_| rng.gen_range(-1.0..1.0));
            let got = conv.forward(&x).unwrap();
            let want = conv_oracle(&conv, &x);
            assert_eq!(got.dim(), want.dim());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b} at k={k} s={stride}");
            }
        }
    }

    #[test]
    fn conv_rejects_undersized_inputs_and_wrong_channels() {
        let mut rng = derive_rng(81, "conv-errors", 0);
        let conv = Conv2d::new_random(2, 3, 3, 1, 0, 1, &mut rng);
        assert!(conv.forward(&Array3::zeros((2, 2, 5))).is_err());
        assert!(conv.forward(&Array3::zeros((1, 5, 5))).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = derive_rng(82, "conv-grad", 0);
        for (k, stride, padding, dilation) in [(3, 2, 1, 1), (3, 1, 2, 2)] {
            let conv = Conv2d::new_random(2, 2, k, stride, padding, dilation, &mut rng);
            let x = Array3::from_shape_fn((2, 6, 5), |_| rng.gen_range(-1.0..1.0));
            let y = conv.forward(&x).unwrap();
            let dy = Array3::from_shape_fn(y.raw_dim(), |_| rng.gen_range(-1.0..1.0));
            let (dx, grads) = conv.backward(&x, &dy).unwrap();
            let score = |c: &Conv2d, x: &Array3<f64>| c.forward(x).unwrap().dot_sum(&dy);

            let eps = 1e-6;
            for &(c, y_, x_) in &[(0usize, 0usize, 0usize), (1, 3, 2), (0, 5, 4)] {
                let mut plus = x.clone();
                plus[(c, y_, x_)] += eps;
                let mut minus = x.clone();
                minus[(c, y_, x_)] -= eps;
                let fd = (score(&conv, &plus) - score(&conv, &minus)) / (2.0 * eps);
                assert!((fd - dx[(c, y_, x_)]).abs() < 1e-6, "dx fd {fd}");
            }
            for &(o, c, ki, kj) in &[(0usize, 0usize, 0usize, 0usize), (1, 1, k - 1, 1)] {
                let mut plus = conv.clone();
                plus.w[(o, c, ki, kj)] += eps;
                let mut minus = conv.clone();
                minus.w[(o, c, ki, kj)] -= eps;
                let fd = (score(&plus, &x) - score(&minus, &x)) / (2.0 * eps);
                assert!((fd - grads.w[(o, c, ki, kj)]).abs() < 1e-6, "dw fd {fd}");
            }
            for o in 0..2 {
                let mut plus = conv.clone();
                plus.b[o] += eps;
                let mut minus = conv.clone();
                minus.b[o] -= eps;
                let fd = (score(&plus, &x) - score(&minus, &x)) / (2.0 * eps);
                assert!((fd - grads.b[o]).abs() < 1e-6, "db fd {fd}");
            }
        }
    }

    /// Inner product of two same-shaped tensors, used as a scalar test loss.
    trait DotSum {
        fn dot_sum(&self, other: &Array3<f64>) -> f64;
    }
    impl DotSum for Array3<f64> {
        fn dot_sum(&self, other: &Array3<f64>) -> f64 {
            self.iter().zip(other.iter()).map(|(a, b)| a * b).sum()
        }
    }

    #[test]
    fn relu_clamps_forward_and_gates_backward() {
        let x = array![[[-1.0, 2.0], [0.0, -0.5]]];
        let y = relu(&x);
        assert_eq!(y, array![[[0.0, 2.0], [0.0, 0.0]]]);
        let dy = array![[[1.0, 1.0], [1.0, 1.0]]];
        let dx = relu_backward(&x, &dy);
        assert_eq!(dx, array![[[0.0, 1.0], [0.0, 0.0]]]);
    }

    #[test]
    fn bilinear_reference_geometry() {
        // Same-size resize is the identity.
        let x = Array3::from_shape_fn((1, 3, 3), |(_, y, x)| (3 * y + x) as f64);
        assert_eq!(bilinear_resize(&x, (3, 3)).unwrap(), x);

        // Constant images stay constant under any resize.
        let c = Array3::from_elem((2, 2, 2), 3.5);
        let up = bilinear_resize(&c, (5, 7)).unwrap();
        assert!(up.iter().all(|&v| (v - 3.5).abs() < 1e-12));

        // 2→4 with half-pixel centers: outer samples clamp, inner samples
        // blend 75/25.
        let x = array![[[0.0, 1.0]]];
        let up = bilinear_resize(&x, (1, 4)).unwrap();
        for (got, want) in up.iter().zip([0.0, 0.25, 0.75, 1.0]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn bilinear_backward_is_the_adjoint() {
        let mut rng = derive_rng(83, "bilinear-adjoint", 0);
        for (src, dst) in [((3usize, 4usize), (7usize, 9usize)), ((5, 5), (2, 3))] {
            let x = Array3::from_shape_fn((2, src.0, src.1), |_| rng.gen_range(-1.0..1.0));
            let dy = Array3::from_shape_fn((2, dst.0, dst.1), |_| rng.gen_range(-1.0..1.0));
            let y = bilinear_resize(&x, dst).unwrap();
            let dx = bilinear_resize_backward(&dy, src).unwrap();
            // ⟨dy, f(x)⟩ == ⟨fᵀ(dy), x⟩ for a linear map.
            let lhs = y.dot_sum(&dy);
            let rhs = dx.dot_sum(&x);
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn sgd_follows_the_reference_update_rule() {
        let opt = SgdConfig { momentum: 0.9, weight_decay: 0.1 };
        let mut w = [1.0f64];
        let mut v = [0.0f64];
        sgd_step(&mut w, &[0.5], &mut v, &opt, 0.2);
        // g' = 0.5 + 0.1·1.0 = 0.6; v = 0.6; w = 1 − 0.2·0.6 = 0.88.
        assert!((w[0] - 0.88).abs() < 1e-12);
        sgd_step(&mut w, &[0.2], &mut v, &opt, 0.2);
        // g' = 0.2 + 0.088 = 0.288; v = 0.9·0.6 + 0.288 = 0.828;
        // w = 0.88 − 0.2·0.828 = 0.7144.
        assert!((w[0] - 0.7144).abs() < 1e-12);
    }
}
