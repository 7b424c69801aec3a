//! Adaptive-moment optimizer with decoupled weight decay, and the
//! warmup→cosine learning-rate curve.

use serde::{Deserialize, Serialize};

use crate::params::Parameters;

/// Per-tensor step settings. `None` from the hyper callback skips a tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TensorHyper {
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, first: Vec::new(), second: Vec::new() }
    }

    /// One update of every tensor in `params`.
    ///
    /// `p ← p·(1 − lr·wd) − lr · m̂ / (√v̂ + eps)` with bias-corrected moments.
    pub fn step<P, F>(&mut self, params: &mut P, grads: &P, mut hyper: F)
    where
        P: Parameters + ?Sized,
        F: FnMut(&str) -> Option<TensorHyper>,
    {
        let mut grad_tensors: Vec<Vec<f64>> = Vec::new();
        grads.visit(&mut |_, s| grad_tensors.push(s.to_vec()));
        if self.first.is_empty() {
            self.first = grad_tensors.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        assert_eq!(self.first.len(), grad_tensors.len(), "optimizer state does not match parameters");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut t = 0;
        let first = &mut self.first;
        let second = &mut self.second;
        params.visit_mut(&mut |name, p| {
            let idx = t;
            t += 1;
            let Some(h) = hyper(name) else { return };
            let g = &grad_tensors[idx];
            let m = &mut first[idx];
            let v = &mut second[idx];
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] *= 1.0 - h.lr * h.weight_decay;
                p[i] -= h.lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }

    /// Moment buffers, for checkpoints.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    pub fn set_moments(&mut self, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) {
        self.first = first;
        self.second = second;
    }
}

/// Biases, normalization parameters and embedding tables take no weight decay.
pub fn exempt_from_decay(name: &str) -> bool {
    name.ends_with(".bias")
        || name.ends_with(".gamma")
        || name.ends_with(".beta")
        || matches!(name, "cls_token" | "pos_embed" | "mask_token")
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then half-cosine down
/// to `end` at `total`.
pub fn warmup_cosine(step: usize, total: usize, warmup: usize, peak: f64, end: f64) -> f64 {
    let step = step.min(total);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    end + (peak - end) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Vec1(Vec<f64>);

    impl Parameters for Vec1 {
        fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
            f("w", &self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
            f("w", &mut self.0)
        }
    }

    #[test]
    fn zero_gradient_decays_exactly() {
        let mut p = Vec1(vec![2.0, -3.0]);
        let g = Vec1(vec![0.0, 0.0]);
        let mut opt = AdamW::new(0.9, 0.95, 1e-8);
        let (lr, wd) = (0.1, 0.05);
        let mut expected = vec![2.0, -3.0];
        for _ in 0..5 {
            opt.step(&mut p, &g, |_| Some(TensorHyper { lr, weight_decay: wd }));
            expected.iter_mut().for_each(|v| *v *= 1.0 - lr * wd);
            assert_eq!(p.0, expected);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Vec1(vec![1.0]);
        let mut opt = AdamW::new(0.9, 0.95, 0.0);
        opt.step(&mut p, &Vec1(vec![0.3]), |_| Some(TensorHyper { lr: 0.01, weight_decay: 0.0 }));
        assert!((p.0[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn skipped_tensors_are_untouched() {
        let mut p = Vec1(vec![1.0]);
        let mut opt = AdamW::new(0.9, 0.95, 1e-8);
        opt.step(&mut p, &Vec1(vec![5.0]), |_| None);
        assert_eq!(p.0, vec![1.0]);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(warmup_cosine(0, 100, 10, 4e-4, 1e-6), 0.0);
        assert_eq!(warmup_cosine(10, 100, 10, 4e-4, 1e-6), 4e-4);
        assert_eq!(warmup_cosine(100, 100, 10, 4e-4, 1e-6), 1e-6);
        assert!((warmup_cosine(5, 100, 10, 4e-4, 1e-6) - 2e-4).abs() < 1e-18);
    }
}
