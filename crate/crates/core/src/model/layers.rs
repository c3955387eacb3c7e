//! Network building blocks with hand-derived backward passes: valid
//! temporal convolution, affine layers, batch normalization, and
//! statistics pooling.

use crate::error::{Error, Result};
use crate::numkit::Matrix;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;
/// Variance floor applied before the square root in statistics pooling.
pub const POOL_VAR_FLOOR: f64 = 1e-10;

/// Valid (no padding, no dilation) temporal convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `out_dim x (kernel * in_dim)`, kernel-major per output row.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub kernel: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl ConvLayer {
    /// `input` is `T x in_dim`; output is `(T - kernel + 1) x out_dim`.
    pub fn forward(&self, input: &Matrix) -> Matrix {
        let t_out = input.rows() + 1 - self.kernel;
        let mut out = Matrix::zeros(t_out, self.out_dim);
        for t in 0..t_out {
            for o in 0..self.out_dim {
                let wrow = self.weight.row(o);
                let mut acc = self.bias[o];
                for dt in 0..self.kernel {
                    let x = input.row(t + dt);
                    let w = &wrow[dt * self.in_dim..(dt + 1) * self.in_dim];
                    for (xv, wv) in x.iter().zip(w) {
                        acc += xv * wv;
                    }
                }
                out.set(t, o, acc);
            }
        }
        out
    }

    /// Returns (grad_input, grad_weight, grad_bias).
    pub fn backward(&self, input: &Matrix, grad_out: &Matrix) -> (Matrix, Matrix, Vec<f64>) {
        let t_out = grad_out.rows();
        let mut grad_in = Matrix::zeros(input.rows(), self.in_dim);
        let mut grad_w = Matrix::zeros(self.out_dim, self.kernel * self.in_dim);
        let mut grad_b = vec![0.0; self.out_dim];
        for t in 0..t_out {
            for o in 0..self.out_dim {
                let g = grad_out.get(t, o);
                if g == 0.0 {
                    continue;
                }
                grad_b[o] += g;
                let wrow = self.weight.row(o);
                for dt in 0..self.kernel {
                    let x = input.row(t + dt);
                    let gi = grad_in.row_mut(t + dt);
                    let gw = grad_w.row_mut(o);
                    for c in 0..self.in_dim {
                        gw[dt * self.in_dim + c] += g * x[c];
                        gi[c] += g * wrow[dt * self.in_dim + c];
                    }
                }
            }
        }
        (grad_in, grad_w, grad_b)
    }
}

/// Fully-connected layer: `y = x W^T + b` on row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out_dim x in_dim`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn forward(&self, input: &Matrix) -> Matrix {
        let (n, out_dim) = (input.rows(), self.weight.rows());
        let mut out = Matrix::zeros(n, out_dim);
        for i in 0..n {
            let x = input.row(i);
            for o in 0..out_dim {
                let w = self.weight.row(o);
                let mut acc = self.bias[o];
                for (xv, wv) in x.iter().zip(w) {
                    acc += xv * wv;
                }
                out.set(i, o, acc);
            }
        }
        out
    }

    pub fn backward(&self, input: &Matrix, grad_out: &Matrix) -> (Matrix, Matrix, Vec<f64>) {
        let (n, out_dim, in_dim) = (input.rows(), self.weight.rows(), self.weight.cols());
        let mut grad_in = Matrix::zeros(n, in_dim);
        let mut grad_w = Matrix::zeros(out_dim, in_dim);
        let mut grad_b = vec![0.0; out_dim];
        for i in 0..n {
            let x = input.row(i);
            for o in 0..out_dim {
                let g = grad_out.get(i, o);
                grad_b[o] += g;
                let w = self.weight.row(o);
                let gi = grad_in.row_mut(i);
                for c in 0..in_dim {
                    gi[c] += g * w[c];
                }
                let gw = grad_w.row_mut(o);
                for c in 0..in_dim {
                    gw[c] += g * x[c];
                }
            }
        }
        (grad_in, grad_w, grad_b)
    }
}

/// Per-channel batch normalization with running statistics for eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

/// Cache from a train-mode batchnorm pass. `xhat` rows are stored per
/// input matrix in input order.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Vec<Matrix>,
    pub inv_std: Vec<f64>,
    pub count: usize,
}

/// Train-mode forward over a set of matrices that share channels
/// (columns); statistics pool every row of every matrix. Inputs are
/// replaced by the normalized outputs and running stats are updated.
pub fn bn_forward_train(bn: &mut BatchNorm, xs: &mut [Matrix]) -> BnCache {
    let dim = bn.dim();
    let count: usize = xs.iter().map(Matrix::rows).sum();
    let m = count as f64;
    let mut mean = vec![0.0; dim];
    for x in xs.iter() {
        for t in 0..x.rows() {
            for (c, &v) in x.row(t).iter().enumerate() {
                mean[c] += v;
            }
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    let mut var = vec![0.0; dim];
    for x in xs.iter() {
        for t in 0..x.rows() {
            for (c, &v) in x.row(t).iter().enumerate() {
                let d = v - mean[c];
                var[c] += d * d;
            }
        }
    }
    for v in &mut var {
        *v /= m;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();

    let mut xhat_all = Vec::with_capacity(xs.len());
    for x in xs.iter_mut() {
        let mut xhat = Matrix::zeros(x.rows(), dim);
        for t in 0..x.rows() {
            for c in 0..dim {
                let h = (x.get(t, c) - mean[c]) * inv_std[c];
                xhat.set(t, c, h);
                x.set(t, c, bn.gamma[c] * h + bn.beta[c]);
            }
        }
        xhat_all.push(xhat);
    }
    for c in 0..dim {
        bn.running_mean[c] = BN_MOMENTUM * bn.running_mean[c] + (1.0 - BN_MOMENTUM) * mean[c];
        bn.running_var[c] = BN_MOMENTUM * bn.running_var[c] + (1.0 - BN_MOMENTUM) * var[c];
    }
    BnCache { xhat: xhat_all, inv_std, count }
}

/// Eval-mode forward using frozen running statistics.
pub fn bn_forward_eval(bn: &BatchNorm, xs: &mut [Matrix]) {
    let dim = bn.dim();
    let inv_std: Vec<f64> = bn.running_var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    for x in xs.iter_mut() {
        for t in 0..x.rows() {
            for c in 0..dim {
                let h = (x.get(t, c) - bn.running_mean[c]) * inv_std[c];
                x.set(t, c, bn.gamma[c] * h + bn.beta[c]);
            }
        }
    }
}

/// Backward through train-mode batchnorm. `grads` (upstream, same layout
/// as the forward inputs) are replaced by input gradients; returns
/// (grad_gamma, grad_beta).
pub fn bn_backward(bn: &BatchNorm, cache: &BnCache, grads: &mut [Matrix]) -> (Vec<f64>, Vec<f64>) {
    let dim = bn.dim();
    let m = cache.count as f64;
    let mut sum_g = vec![0.0; dim];
    let mut sum_gx = vec![0.0; dim];
    for (g, xhat) in grads.iter().zip(&cache.xhat) {
        for t in 0..g.rows() {
            for c in 0..dim {
                sum_g[c] += g.get(t, c);
                sum_gx[c] += g.get(t, c) * xhat.get(t, c);
            }
        }
    }
    let grad_beta = sum_g.clone();
    let grad_gamma = sum_gx.clone();
    for (g, xhat) in grads.iter_mut().zip(&cache.xhat) {
        for t in 0..g.rows() {
            for c in 0..dim {
                let gv = g.get(t, c);
                let dx = bn.gamma[c]
                    * cache.inv_std[c]
                    * (gv - sum_g[c] / m - xhat.get(t, c) * sum_gx[c] / m);
                g.set(t, c, dx);
            }
        }
    }
    (grad_gamma, grad_beta)
}

/// In-place ReLU; returns the mask needed by the backward pass.
pub fn relu_forward(x: &mut Matrix) -> Vec<bool> {
    let mut mask = Vec::with_capacity(x.rows() * x.cols());
    for v in x.data_mut() {
        let keep = *v > 0.0;
        mask.push(keep);
        if !keep {
            *v = 0.0;
        }
    }
    mask
}

pub fn relu_backward(grad: &mut Matrix, mask: &[bool]) {
    for (g, &keep) in grad.data_mut().iter_mut().zip(mask) {
        if !keep {
            *g = 0.0;
        }
    }
}

/// Statistics pooling cache: what the backward pass needs per segment.
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Whether the raw variance exceeded the floor (gradient flows only then).
    pub live: Vec<bool>,
}

/// Concatenated per-dimension mean and population standard deviation over
/// frames, with the variance floored before the square root.
pub fn stats_pool(frames: &Matrix) -> Result<(Vec<f64>, PoolCache)> {
    let t = frames.rows();
    if t < 2 {
        return Err(Error::Shape(format!(
            "statistics pooling needs at least 2 frames, got {t}"
        )));
    }
    let h = frames.cols();
    let mut mean = vec![0.0; h];
    for r in 0..t {
        for (c, &v) in frames.row(r).iter().enumerate() {
            mean[c] += v;
        }
    }
    for v in &mut mean {
        *v /= t as f64;
    }
    let mut var = vec![0.0; h];
    for r in 0..t {
        for (c, &v) in frames.row(r).iter().enumerate() {
            let d = v - mean[c];
            var[c] += d * d;
        }
    }
    let mut std = vec![0.0; h];
    let mut live = vec![false; h];
    for c in 0..h {
        var[c] /= t as f64;
        live[c] = var[c] > POOL_VAR_FLOOR;
        std[c] = var[c].max(POOL_VAR_FLOOR).sqrt();
    }
    let mut out = mean.clone();
    out.extend_from_slice(&std);
    Ok((out, PoolCache { mean, std, live }))
}

/// Backward of [`stats_pool`]: `grad_out` has length 2H.
pub fn stats_pool_backward(frames: &Matrix, cache: &PoolCache, grad_out: &[f64]) -> Matrix {
    let t = frames.rows();
    let h = frames.cols();
    debug_assert_eq!(grad_out.len(), 2 * h);
    let mut grad = Matrix::zeros(t, h);
    let tf = t as f64;
    for r in 0..t {
        for c in 0..h {
            let mut g = grad_out[c] / tf;
            if cache.live[c] {
                g += grad_out[h + c] * (frames.get(r, c) - cache.mean[c]) / (tf * cache.std[c]);
            }
            grad.set(r, c, g);
        }
    }
    grad
}
