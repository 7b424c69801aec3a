//! Nearest-neighbor alignment loss: each anchor is pulled toward a
//! nearest neighbor retrieved from the support queue and pushed away from
//! stop-gradient negatives of the current batch.

use thiserror::Error;

use crate::numerics::{dot, log_sum_exp, Matrix, RngStream};
use crate::queue::{QueueError, SupportQueue};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnaError {
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("exclusion mask diagonal entry {0} is not set")]
    MaskDiagonal(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Queue(#[from] QueueError),
}

/// Anchors, their constant positives, constant negatives and the exclusion
/// mask (`true` drops the negative term).
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    anchors: Matrix,
    positives: Matrix,
    negatives: Matrix,
    temperature: f64,
    exclude: Vec<bool>,
}

impl ContrastiveBatch {
    pub fn new(
        anchors: Matrix,
        positives: Matrix,
        negatives: Matrix,
        temperature: f64,
        exclude: Vec<bool>,
    ) -> Result<Self, NnaError> {
        if !(temperature > 0.0) {
            return Err(NnaError::BadTemperature(temperature));
        }
        let n = anchors.rows();
        if positives.shape() != anchors.shape() || negatives.shape() != anchors.shape() {
            return Err(NnaError::Shape(format!(
                "anchors {:?}, positives {:?}, negatives {:?}",
                anchors.shape(),
                positives.shape(),
                negatives.shape()
            )));
        }
        if exclude.len() != n * n {
            return Err(NnaError::Shape(format!("mask has {} entries for {n} anchors", exclude.len())));
        }
        if let Some(i) = (0..n).find(|&i| !exclude[i * n + i]) {
            return Err(NnaError::MaskDiagonal(i));
        }
        Ok(Self { anchors, positives, negatives, temperature, exclude })
    }

    /// Mask that excludes only the diagonal.
    pub fn diagonal_mask(n: usize) -> Vec<bool> {
        (0..n * n).map(|i| i / n == i % n).collect()
    }

    /// Mask that excludes every pair of rows from the same source sample.
    pub fn group_mask(groups: &[usize]) -> Vec<bool> {
        let n = groups.len();
        (0..n * n).map(|i| groups[i / n] == groups[i % n]).collect()
    }

    pub fn len(&self) -> usize {
        self.anchors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.rows() == 0
    }

    pub fn anchors(&self) -> &Matrix {
        &self.anchors
    }

    pub fn positives(&self) -> &Matrix {
        &self.positives
    }

    pub fn negatives(&self) -> &Matrix {
        &self.negatives
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn exclude(&self) -> &[bool] {
        &self.exclude
    }

    pub fn with_anchors(&self, anchors: Matrix) -> Result<Self, NnaError> {
        Self::new(anchors, self.positives.clone(), self.negatives.clone(), self.temperature, self.exclude.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    /// Mean over anchors.
    pub loss: f64,
    pub per_anchor: Vec<f64>,
    /// Gradient of the mean loss with respect to the anchors only.
    pub grad_anchors: Matrix,
}

/// Loss and analytic anchor gradient.
pub fn nna_loss(batch: &ContrastiveBatch) -> Result<LossOutput, NnaError> {
    let n = batch.len();
    let d = batch.anchors.cols();
    let tau = batch.temperature;
    let neg_sims = batch.anchors.matmul_nt(&batch.negatives);
    let mut per_anchor = Vec::with_capacity(n);
    let mut grad = Matrix::zeros(n, d);
    let mut logits = Vec::with_capacity(n + 1);
    let mut kept = Vec::with_capacity(n);
    for i in 0..n {
        let z = batch.anchors.row(i);
        let pos = batch.positives.row(i);
        logits.clear();
        kept.clear();
        logits.push(dot(pos, z) / tau);
        for j in 0..n {
            if !batch.exclude[i * n + j] {
                logits.push(neg_sims.get(i, j) / tau);
                kept.push(j);
            }
        }
        let lse = log_sum_exp(&logits).map_err(|e| NnaError::Shape(e.to_string()))?;
        per_anchor.push(lse - logits[0]);
        // d loss_i / d z_i = (1/τ) [ (softmax_0 − 1) pos + Σ_j softmax_j neg_j ]
        let scale = 1.0 / (tau * n as f64);
        let g = grad.row_mut(i);
        let w0 = (logits[0] - lse).exp() - 1.0;
        for (gv, p) in g.iter_mut().zip(pos) {
            *gv += scale * w0 * p;
        }
        for (t, &j) in kept.iter().enumerate() {
            let w = (logits[t + 1] - lse).exp();
            for (gv, v) in g.iter_mut().zip(batch.negatives.row(j)) {
                *gv += scale * w * v;
            }
        }
    }
    let loss = if n == 0 { 0.0 } else { per_anchor.iter().sum::<f64>() / n as f64 };
    Ok(LossOutput { loss, per_anchor, grad_anchors: grad })
}

/// Builds the batch from given positives: negatives are the stop-gradient
/// projections, or the positives themselves when `swap_negatives` is set.
pub fn assemble_batch(
    pred: &Matrix,
    proj: &Matrix,
    positives: Matrix,
    temperature: f64,
    swap_negatives: bool,
    same_sample_groups: &[usize],
) -> Result<ContrastiveBatch, NnaError> {
    if pred.shape() != proj.shape() {
        return Err(NnaError::Shape(format!("pred {:?} vs proj {:?}", pred.shape(), proj.shape())));
    }
    if same_sample_groups.len() != pred.rows() {
        return Err(NnaError::Shape(format!(
            "{} group ids for {} rows",
            same_sample_groups.len(),
            pred.rows()
        )));
    }
    let negatives = if swap_negatives { positives.clone() } else { proj.clone() };
    ContrastiveBatch::new(
        pred.clone(),
        positives,
        negatives,
        temperature,
        ContrastiveBatch::group_mask(same_sample_groups),
    )
}

/// Retrieves each projection's queue neighbor as the positive and assembles
/// the batch.
#[allow(clippy::too_many_arguments)]
pub fn build_batch_nna(
    pred: &Matrix,
    proj: &Matrix,
    queue: &SupportQueue,
    temperature: f64,
    k: usize,
    swap_negatives: bool,
    same_sample_groups: &[usize],
    rng: &mut RngStream,
) -> Result<ContrastiveBatch, NnaError> {
    let (positives, _) = queue.retrieve_nn(proj, k, rng)?;
    assemble_batch(pred, proj, positives, temperature, swap_negatives, same_sample_groups)
}
