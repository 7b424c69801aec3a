//! Building blocks with hand-written backward passes: affine maps, GELU and
//! per-row layer normalization.

use serde::{Deserialize, Serialize};

use crate::numerics::{Matrix, RngStream};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn gelu_matrix(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
    out
}

/// `grad ⊙ gelu'(pre)`
pub fn gelu_backward(pre: &Matrix, grad: &Matrix) -> Matrix {
    let mut out = grad.clone();
    for (g, x) in out.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        *g *= gelu_grad(*x);
    }
    out
}

/// `y = x · Wᵀ + b` with `W` stored as `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { weight: Matrix::zeros(out_dim, in_dim), bias: vec![0.0; out_dim] }
    }

    /// Scaled-normal initialization with std `1/sqrt(in_dim)`, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut RngStream) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self { weight: Matrix::random_normal(out_dim, in_dim, std, rng), bias: vec![0.0; out_dim] }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul_nt(&self.weight);
        y.add_row_vector(&self.bias);
        y
    }

    /// Returns the input gradient and accumulates parameter gradients into `grads`.
    pub fn backward(&self, x: &Matrix, grad: &Matrix, grads: &mut Linear) -> Matrix {
        grads.weight.add_assign(&grad.matmul_tn(x));
        for (gb, s) in grads.bias.iter_mut().zip(grad.column_sums()) {
            *gb += s;
        }
        grad.matmul(&self.weight)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&format!("{prefix}.weight"), self.weight.as_slice());
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.weight"), self.weight.as_mut_slice());
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Per-row normalization over features with learned scale and shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

pub struct LayerNormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-6;

    pub fn new(dim: usize) -> Self {
        Self { gamma: vec![1.0; dim], beta: vec![0.0; dim], eps: Self::DEFAULT_EPS }
    }

    pub fn zeros_like(&self) -> Self {
        Self { gamma: vec![0.0; self.gamma.len()], beta: vec![0.0; self.beta.len()], eps: self.eps }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, LayerNormCache) {
        let d = x.cols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        let mut y = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + self.eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
            let out = y.row_mut(r);
            for c in 0..out.len() {
                out[c] = self.gamma[c] * row[c] + self.beta[c];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, grad: &Matrix, grads: &mut LayerNorm) -> Matrix {
        let d = grad.cols();
        let mut gx = Matrix::zeros(grad.rows(), d);
        let mut gxhat = vec![0.0; d];
        for r in 0..grad.rows() {
            let g = grad.row(r);
            let xh = cache.xhat.row(r);
            for c in 0..d {
                grads.gamma[c] += g[c] * xh[c];
                grads.beta[c] += g[c];
                gxhat[c] = g[c] * self.gamma[c];
            }
            let mean_g = gxhat.iter().sum::<f64>() / d as f64;
            let mean_gx = gxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let is = cache.inv_std[r];
            let out = gx.row_mut(r);
            for c in 0..d {
                out[c] = is * (gxhat[c] - mean_g - xh[c] * mean_gx);
            }
        }
        gx
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}
