//! Instance-discrimination heads: a projector MLP feeding a predictor MLP,
//! with batch normalization after every linear layer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::{gelu_backward, gelu_matrix, Linear};
use crate::numerics::{l2_normalize_rows_clamped, Matrix, RngStream};
use crate::params::Parameters;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeadError {
    #[error("batch of {0} rows is too small for batch statistics")]
    BatchTooSmall(usize),
    #[error("input has {got} features, head expects {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("cache does not match gradient shapes")]
    StaleCache,
    #[error("invalid head config: {0}")]
    BadConfig(String),
    #[error("progress {0} outside [0, 1]")]
    BadProgress(f64),
    #[error("head index {index} out of range for {count} heads")]
    BadHeadIndex { index: usize, count: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub input_dim: usize,
    /// `[input_dim, hidden, hidden, bottleneck]`
    pub projector_dims: Vec<usize>,
    /// `[bottleneck, hidden, bottleneck]`
    pub predictor_dims: Vec<usize>,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl HeadConfig {
    pub fn full_scale(input_dim: usize) -> Self {
        Self::with_dims(input_dim, 2048, 256, 4096)
    }

    pub fn desk_scale(input_dim: usize) -> Self {
        Self::with_dims(input_dim, 256, 64, 512)
    }

    pub fn with_dims(input_dim: usize, projector_hidden: usize, bottleneck: usize, predictor_hidden: usize) -> Self {
        Self {
            input_dim,
            projector_dims: vec![input_dim, projector_hidden, projector_hidden, bottleneck],
            predictor_dims: vec![bottleneck, predictor_hidden, bottleneck],
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn bottleneck(&self) -> usize {
        *self.projector_dims.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        if self.projector_dims.len() != 4 {
            return Err(HeadError::BadConfig("projector needs exactly 3 linear layers".into()));
        }
        if self.predictor_dims.len() != 3 {
            return Err(HeadError::BadConfig("predictor needs exactly 2 linear layers".into()));
        }
        if self.projector_dims.iter().chain(&self.predictor_dims).any(|&d| d == 0) {
            return Err(HeadError::BadConfig("all dims must be >= 1".into()));
        }
        if self.projector_dims[0] != self.input_dim {
            return Err(HeadError::BadConfig("projector input must equal input_dim".into()));
        }
        if self.predictor_dims[0] != self.bottleneck() || self.predictor_dims[2] != self.bottleneck() {
            return Err(HeadError::BadConfig("predictor must map bottleneck to bottleneck".into()));
        }
        if !(self.bn_epsilon > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(HeadError::BadConfig("bn_epsilon must be > 0 and bn_momentum in [0,1]".into()));
        }
        Ok(())
    }
}

/// Feature-wise batch normalization with running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

struct BnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            eps,
            momentum,
        }
    }

    fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<(Matrix, BnCache), HeadError> {
        let (n, d) = x.shape();
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(HeadError::BatchTooSmall(n));
                }
                let mean: Vec<f64> = x.column_sums().iter().map(|s| s / n as f64).collect();
                let mut var = vec![0.0; d];
                for row in x.iter_rows() {
                    for c in 0..d {
                        let dv = row[c] - mean[c];
                        var[c] += dv * dv;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                let unbias = n as f64 / (n as f64 - 1.0);
                for c in 0..d {
                    self.running_mean[c] = (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
                    self.running_var[c] =
                        (1.0 - self.momentum) * self.running_var[c] + self.momentum * var[c] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = x.clone();
        let mut y = Matrix::zeros(n, d);
        for r in 0..n {
            let xr = xhat.row_mut(r);
            for c in 0..d {
                xr[c] = (xr[c] - mean[c]) * inv_std[c];
            }
            let yr = y.row_mut(r);
            for c in 0..d {
                yr[c] = self.gamma[c] * xr[c] + self.beta[c];
            }
        }
        Ok((y, BnCache { xhat, inv_std }))
    }

    /// Backward through the batch-statistics path (train mode).
    fn backward(&self, cache: &BnCache, grad: &Matrix, grads: &mut BatchNorm) -> Matrix {
        let (n, d) = grad.shape();
        let nf = n as f64;
        let mut sum_g = vec![0.0; d];
        let mut sum_gx = vec![0.0; d];
        for r in 0..n {
            let g = grad.row(r);
            let xh = cache.xhat.row(r);
            for c in 0..d {
                sum_g[c] += g[c];
                sum_gx[c] += g[c] * xh[c];
            }
        }
        for c in 0..d {
            grads.gamma[c] += sum_gx[c];
            grads.beta[c] += sum_g[c];
        }
        let mut gx = Matrix::zeros(n, d);
        for r in 0..n {
            let g = grad.row(r);
            let xh = cache.xhat.row(r);
            let out = gx.row_mut(r);
            for c in 0..d {
                let k = self.gamma[c] * cache.inv_std[c] / nf;
                out[c] = k * (nf * g[c] - sum_g[c] - xh[c] * sum_gx[c]);
            }
        }
        gx
    }

    /// Backward when normalization used fixed (running) statistics.
    fn backward_eval(&self, cache: &BnCache, grad: &Matrix, grads: &mut BatchNorm) -> Matrix {
        let (n, d) = grad.shape();
        let mut gx = grad.clone();
        for r in 0..n {
            let xh = cache.xhat.row(r);
            let g = grad.row(r);
            for c in 0..d {
                grads.gamma[c] += g[c] * xh[c];
                grads.beta[c] += g[c];
            }
            let out = gx.row_mut(r);
            for c in 0..d {
                out[c] *= self.gamma[c] * cache.inv_std[c];
            }
        }
        gx
    }
}

/// One linear layer with optional GELU and batch normalization after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub linear: Linear,
    pub gelu: bool,
    pub bn: Option<BatchNorm>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub gelu: bool,
    pub batch_norm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

struct LayerCache {
    input: Matrix,
    pre: Matrix,
    bn: Option<BnCache>,
}

pub struct MlpCache {
    layers: Vec<LayerCache>,
    mode: Mode,
}

impl Mlp {
    pub fn new(specs: &[LayerSpec], bn_eps: f64, bn_momentum: f64, rng: &mut RngStream) -> Self {
        let layers = specs
            .iter()
            .map(|s| DenseLayer {
                linear: Linear::init(s.in_dim, s.out_dim, rng),
                gelu: s.gelu,
                bn: s.batch_norm.then(|| BatchNorm::new(s.out_dim, bn_eps, bn_momentum)),
            })
            .collect();
        Self { layers }
    }

    /// Linear→GELU→BN for hidden layers, Linear→BN for the last one.
    pub fn head_specs(dims: &[usize]) -> Vec<LayerSpec> {
        let last = dims.len() - 2;
        (0..dims.len() - 1)
            .map(|i| LayerSpec { in_dim: dims[i], out_dim: dims[i + 1], gelu: i != last, batch_norm: true })
            .collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.linear.in_dim())
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<(Matrix, MlpCache), HeadError> {
        if x.cols() != self.in_dim() {
            return Err(HeadError::ShapeMismatch { expected: self.in_dim(), got: x.cols() });
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &mut self.layers {
            let pre = layer.linear.forward(&h);
            let act = if layer.gelu { gelu_matrix(&pre) } else { pre.clone() };
            let (out, bn) = match &mut layer.bn {
                Some(bn) => {
                    let (y, c) = bn.forward(&act, mode)?;
                    (y, Some(c))
                }
                None => (act, None),
            };
            caches.push(LayerCache { input: h, pre, bn });
            h = out;
        }
        Ok((h, MlpCache { layers: caches, mode }))
    }

    /// Accumulates parameter gradients into `grads`, returns the input gradient.
    pub fn backward(&self, cache: &MlpCache, grad: &Matrix, grads: &mut Mlp) -> Result<Matrix, HeadError> {
        if cache.layers.len() != self.layers.len() {
            return Err(HeadError::StaleCache);
        }
        let mut g = grad.clone();
        for ((layer, lc), lg) in self.layers.iter().zip(&cache.layers).zip(&mut grads.layers).rev() {
            if g.shape() != (lc.pre.rows(), layer.linear.out_dim()) {
                return Err(HeadError::StaleCache);
            }
            if let (Some(bn), Some(bc), Some(bg)) = (&layer.bn, &lc.bn, &mut lg.bn) {
                g = match cache.mode {
                    Mode::Train => bn.backward(bc, &g, bg),
                    Mode::Eval => bn.backward_eval(bc, &g, bg),
                };
            }
            if layer.gelu {
                g = gelu_backward(&lc.pre, &g);
            }
            g = layer.linear.backward(&lc.input, &g, &mut lg.linear);
        }
        Ok(g)
    }

    fn visit_prefixed(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.linear.visit(&format!("{prefix}.{i}"), f);
            if let Some(bn) = &l.bn {
                f(&format!("{prefix}.{i}.bn.gamma"), &bn.gamma);
                f(&format!("{prefix}.{i}.bn.beta"), &bn.beta);
            }
        }
    }

    fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.linear.visit_mut(&format!("{prefix}.{i}"), f);
            if let Some(bn) = &mut l.bn {
                f(&format!("{prefix}.{i}.bn.gamma"), &mut bn.gamma);
                f(&format!("{prefix}.{i}.bn.beta"), &mut bn.beta);
            }
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(bn) = &l.bn {
                f(&format!("{prefix}.{i}.bn.running_mean"), &bn.running_mean);
                f(&format!("{prefix}.{i}.bn.running_var"), &bn.running_var);
            }
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Some(bn) = &mut l.bn {
                f(&format!("{prefix}.{i}.bn.running_mean"), &mut bn.running_mean);
                f(&format!("{prefix}.{i}.bn.running_var"), &mut bn.running_var);
            }
        }
    }
}

impl Parameters for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.visit_prefixed("mlp", f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.visit_prefixed_mut("mlp", f)
    }
}

/// Projector followed by predictor. The predictor consumes the raw projector
/// output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdHead {
    pub config: HeadConfig,
    pub projector: Mlp,
    pub predictor: Mlp,
}

pub struct HeadOutput {
    pub proj_raw: Matrix,
    pub pred_raw: Matrix,
    pub proj: Matrix,
    pub pred: Matrix,
    pub proj_norms: Vec<f64>,
    pub pred_norms: Vec<f64>,
    pub cache: HeadCache,
}

pub struct HeadCache {
    projector: MlpCache,
    predictor: MlpCache,
    rows: usize,
}

impl IdHead {
    pub fn new(config: HeadConfig, rng: &mut RngStream) -> Result<Self, HeadError> {
        config.validate()?;
        let projector = Mlp::new(&Mlp::head_specs(&config.projector_dims), config.bn_epsilon, config.bn_momentum, rng);
        let predictor = Mlp::new(&Mlp::head_specs(&config.predictor_dims), config.bn_epsilon, config.bn_momentum, rng);
        Ok(Self { config, projector, predictor })
    }

    /// Same layout, all parameters and buffers zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        crate::params::zero(&mut z);
        z.visit_buffers_mut(&mut |_, s| s.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<HeadOutput, HeadError> {
        if x.cols() != self.config.input_dim {
            return Err(HeadError::ShapeMismatch { expected: self.config.input_dim, got: x.cols() });
        }
        if mode == Mode::Train && x.rows() < 2 {
            return Err(HeadError::BatchTooSmall(x.rows()));
        }
        let (proj_raw, projector) = self.projector.forward(x, mode)?;
        let (pred_raw, predictor) = self.predictor.forward(&proj_raw, mode)?;
        let (proj, proj_norms) = l2_normalize_rows_clamped(&proj_raw);
        let (pred, pred_norms) = l2_normalize_rows_clamped(&pred_raw);
        Ok(HeadOutput {
            proj_raw,
            pred_raw,
            proj,
            pred,
            proj_norms,
            pred_norms,
            cache: HeadCache { projector, predictor, rows: x.rows() },
        })
    }

    /// Gradients with respect to the raw outputs flow back to parameters and
    /// to the head input.
    pub fn backward(&self, cache: &HeadCache, grad_pred: &Matrix, grad_proj: &Matrix) -> Result<(IdHead, Matrix), HeadError> {
        if grad_pred.rows() != cache.rows || grad_proj.rows() != cache.rows {
            return Err(HeadError::StaleCache);
        }
        let mut grads = self.zeros_like();
        let mut g_proj = self.predictor.backward(&cache.predictor, grad_pred, &mut grads.predictor)?;
        if g_proj.shape() != grad_proj.shape() {
            return Err(HeadError::StaleCache);
        }
        g_proj.add_assign(grad_proj);
        let g_in = self.projector.backward(&cache.projector, &g_proj, &mut grads.projector)?;
        Ok((grads, g_in))
    }

    /// Batch-norm running statistics (not trained, but checkpointed).
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.projector.visit_buffers("projector", f);
        self.predictor.visit_buffers("predictor", f);
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.projector.visit_buffers_mut("projector", f);
        self.predictor.visit_buffers_mut("predictor", f);
    }
}

impl Parameters for IdHead {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.projector.visit_prefixed("projector", f);
        self.predictor.visit_prefixed("predictor", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.projector.visit_prefixed_mut("projector", f);
        self.predictor.visit_prefixed_mut("predictor", f);
    }
}

/// Which encoder blocks carry a head (1-based, sorted).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub attach_indices: Vec<usize>,
    pub heads: Vec<HeadConfig>,
}

impl EnsembleConfig {
    /// One head after every block in the last third of the encoder.
    pub fn last_third(depth: usize, head: HeadConfig) -> Self {
        let count = depth.div_ceil(3).max(1);
        Self::at_blocks((depth + 1 - count..=depth).collect(), head)
    }

    pub fn at_blocks(attach_indices: Vec<usize>, head: HeadConfig) -> Self {
        let heads = vec![head; attach_indices.len()];
        Self { attach_indices, heads }
    }

    pub fn validate(&self, depth: usize) -> Result<(), HeadError> {
        if self.attach_indices.is_empty() {
            return Err(HeadError::BadConfig("at least one head is required".into()));
        }
        if self.attach_indices.len() != self.heads.len() {
            return Err(HeadError::BadConfig("one head config per attach index".into()));
        }
        if self.attach_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HeadError::BadConfig("attach indices must be strictly increasing".into()));
        }
        if self.attach_indices.iter().any(|&b| b == 0 || b > depth) {
            return Err(HeadError::BadConfig(format!("attach indices must lie in 1..={depth}")));
        }
        for h in &self.heads {
            h.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    UniformDecay,
    StaggeredDecay,
    StaggeredStep,
    OneHot,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 5] = [
        ScheduleKind::Constant,
        ScheduleKind::UniformDecay,
        ScheduleKind::StaggeredDecay,
        ScheduleKind::StaggeredStep,
        ScheduleKind::OneHot,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub head_count: usize,
}

/// Loss weight of head `head_index` (0 = earliest block) at training
/// progress `progress ∈ [0, 1]`.
pub fn schedule_weight(spec: &ScheduleSpec, head_index: usize, progress: f64) -> Result<f64, HeadError> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(HeadError::BadProgress(progress));
    }
    let count = spec.head_count;
    if head_index >= count {
        return Err(HeadError::BadHeadIndex { index: head_index, count });
    }
    let last = count - 1;
    if spec.kind == ScheduleKind::OneHot {
        let active = ((progress * count as f64).floor() as usize).min(last);
        return Ok(if head_index == active { 1.0 } else { 0.0 });
    }
    if head_index == last {
        return Ok(1.0);
    }
    let h = head_index as f64;
    let w = match spec.kind {
        ScheduleKind::Constant => 1.0,
        ScheduleKind::UniformDecay => 1.0 - progress,
        ScheduleKind::StaggeredDecay => {
            let span = last as f64;
            let start = 0.5 * h / span;
            let end = 0.5 * (h + 1.0) / span + 0.5 * h / span;
            ((end - progress) / (end - start)).clamp(0.0, 1.0)
        }
        ScheduleKind::StaggeredStep => {
            if progress < (h + 1.0) / count as f64 {
                1.0
            } else {
                0.0
            }
        }
        ScheduleKind::OneHot => unreachable!(),
    };
    Ok(w)
}
