//! Frozen-feature evaluation: weighted k-NN, logistic-regression probe,
//! low-shot splits and per-block sweeps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::encoder::{encode_dataset, Collect, EncoderError, EncoderParams};
use crate::numerics::{l2_normalize_rows_clamped, Matrix, RngStream};
use crate::queue::top_k_of_row;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error("k = {k} but only {train} training rows")]
    TooFewNeighbors { train: usize, k: usize },
    #[error("class {0} has no training example")]
    MissingClass(u32),
    #[error("class {class} has {available} examples, {requested} requested")]
    ClassTooSmall { class: u32, available: usize, requested: usize },
    #[error("split leaves no test rows")]
    EmptyTest,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid probe config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    pub train_x: Matrix,
    pub train_y: Vec<u32>,
    pub test_x: Matrix,
    pub test_y: Vec<u32>,
}

impl ProbeDataset {
    pub fn new(train_x: Matrix, train_y: Vec<u32>, test_x: Matrix, test_y: Vec<u32>) -> Result<Self, ProbeError> {
        if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() {
            return Err(ProbeError::Shape("feature rows and labels disagree".into()));
        }
        if train_x.cols() != test_x.cols() {
            return Err(ProbeError::Shape(format!("train dim {} vs test dim {}", train_x.cols(), test_x.cols())));
        }
        Ok(Self { train_x, train_y, test_x, test_y })
    }

    pub fn n_classes(&self) -> usize {
        self.train_y.iter().chain(&self.test_y).map(|&c| c as usize + 1).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnConfig {
    pub k: usize,
    pub temperature: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self { k: 10, temperature: 0.07 }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.k == 0 || !(self.temperature > 0.0) {
            return Err(ProbeError::BadConfig("k must be >= 1 and temperature > 0".into()));
        }
        Ok(())
    }
}

fn argmax_lowest(scores: &[f64]) -> u32 {
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = c;
        }
    }
    best as u32
}

fn accuracy(pred: &[u32], truth: &[u32]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Cosine-similarity k-NN votes weighted by `exp(sim / temperature)`.
pub fn knn_predict(ds: &ProbeDataset, cfg: &KnnConfig) -> Result<Vec<u32>, ProbeError> {
    cfg.validate()?;
    if ds.train_x.rows() < cfg.k {
        return Err(ProbeError::TooFewNeighbors { train: ds.train_x.rows(), k: cfg.k });
    }
    let n_classes = ds.n_classes();
    let (train, _) = l2_normalize_rows_clamped(&ds.train_x);
    let (test, _) = l2_normalize_rows_clamped(&ds.test_x);
    let mut out = Vec::with_capacity(test.rows());
    for start in (0..test.rows()).step_by(256) {
        let end = (start + 256).min(test.rows());
        let sims = test.slice_rows(start, end).matmul_nt(&train);
        for r in 0..sims.rows() {
            let row = sims.row(r);
            let mut scores = vec![0.0; n_classes];
            let top = top_k_of_row(row, cfg.k);
            // shift by the best similarity so the exponentials stay finite
            let shift = row[top[0]];
            for &j in &top {
                scores[ds.train_y[j] as usize] += ((row[j] - shift) / cfg.temperature).exp();
            }
            out.push(argmax_lowest(&scores));
        }
    }
    Ok(out)
}

pub fn knn_probe(ds: &ProbeDataset, cfg: &KnnConfig) -> Result<f64, ProbeError> {
    Ok(accuracy(&knn_predict(ds, cfg)?, &ds.test_y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        Self { epochs: 300, lr: 1.0, weight_decay: 1e-4 }
    }
}

/// Multinomial logistic regression; `weight` is classes × features.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticRegression {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LogisticRegression {
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        Self { weight: Matrix::zeros(n_classes, dim), bias: vec![0.0; n_classes] }
    }

    pub fn logits(&self, x: &Matrix) -> Matrix {
        let mut z = x.matmul_nt(&self.weight);
        z.add_row_vector(&self.bias);
        z
    }

    /// Mean cross-entropy plus `wd/2 · ‖W‖²`, with its gradient.
    pub fn loss_and_grad(&self, x: &Matrix, y: &[u32], wd: f64) -> (f64, LogisticRegression) {
        let mut p = self.logits(x);
        let n = x.rows() as f64;
        let mut loss = 0.0;
        for (r, &label) in y.iter().enumerate() {
            let row = p.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss += max + sum.ln() - row[label as usize];
            for v in row.iter_mut() {
                *v = (*v - max).exp() / sum / n;
            }
            row[label as usize] -= 1.0 / n;
        }
        let mut gw = p.matmul_tn(x);
        gw.add_assign(&self.weight.scaled(wd));
        let reg: f64 = self.weight.as_slice().iter().map(|w| w * w).sum();
        let grad = LogisticRegression { weight: gw, bias: p.column_sums() };
        (loss / n + 0.5 * wd * reg, grad)
    }

    pub fn predict(&self, x: &Matrix) -> Vec<u32> {
        let z = self.logits(x);
        z.iter_rows().map(argmax_lowest).collect()
    }
}

/// Full-batch gradient descent from zero initialization.
pub fn train_logistic(ds: &ProbeDataset, cfg: &LinearProbeConfig) -> Result<(LogisticRegression, Vec<f64>), ProbeError> {
    let n_classes = ds.n_classes();
    if let Some(c) = (0..n_classes as u32).find(|c| !ds.train_y.contains(c)) {
        return Err(ProbeError::MissingClass(c));
    }
    let mut model = LogisticRegression::zeros(n_classes, ds.train_x.cols());
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let (loss, grad) = model.loss_and_grad(&ds.train_x, &ds.train_y, cfg.weight_decay);
        losses.push(loss);
        model.weight.add_assign(&grad.weight.scaled(-cfg.lr));
        for (b, g) in model.bias.iter_mut().zip(&grad.bias) {
            *b -= cfg.lr * g;
        }
    }
    Ok((model, losses))
}

pub fn linear_probe(ds: &ProbeDataset, cfg: &LinearProbeConfig) -> Result<f64, ProbeError> {
    let (model, _) = train_logistic(ds, cfg)?;
    Ok(accuracy(&model.predict(&ds.test_x), &ds.test_y))
}

/// `n_per_class` training rows per class drawn without replacement; the
/// rest is test.
pub fn low_shot_split(features: &Matrix, labels: &[u32], n_per_class: usize, seed: u64) -> Result<ProbeDataset, ProbeError> {
    if features.rows() != labels.len() {
        return Err(ProbeError::Shape("feature rows and labels disagree".into()));
    }
    let n_classes = labels.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
    let mut rng = RngStream::new(seed);
    let mut train = Vec::new();
    for c in 0..n_classes as u32 {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < n_per_class {
            return Err(ProbeError::ClassTooSmall { class: c, available: idx.len(), requested: n_per_class });
        }
        rng.shuffle(&mut idx);
        train.extend_from_slice(&idx[..n_per_class]);
    }
    train.sort_unstable();
    let test: Vec<usize> = (0..labels.len()).filter(|i| train.binary_search(i).is_err()).collect();
    if test.is_empty() {
        return Err(ProbeError::EmptyTest);
    }
    ProbeDataset::new(
        features.select_rows(&train),
        train.iter().map(|&i| labels[i]).collect(),
        features.select_rows(&test),
        test.iter().map(|&i| labels[i]).collect(),
    )
}

/// k-NN accuracy of the class-summary features after every block.
pub fn per_block_knn(encoder: &EncoderParams, train: &Dataset, test: &Dataset, cfg: &KnnConfig) -> Result<Vec<f64>, ProbeError> {
    let tr = encode_dataset(encoder, train, Collect::PerBlock, 256)?;
    let te = encode_dataset(encoder, test, Collect::PerBlock, 256)?;
    tr.into_iter()
        .zip(te)
        .map(|(a, b)| knn_probe(&ProbeDataset::new(a, train.labels.clone(), b, test.labels.clone())?, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, gradient_mismatch};
    use proptest::prelude::*;

    fn blobs(n: usize, sep: f64, rng: &mut RngStream) -> (Matrix, Vec<u32>) {
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = (i % 2) as u32;
            let center = if c == 0 { [sep, 0.0, 1.0] } else { [-sep, 0.0, 1.0] };
            rows.push(center.map(|m| m + 0.1 * rng.normal()));
            y.push(c);
        }
        (Matrix::from_rows(&rows), y)
    }

    #[test]
    fn identical_point_k1() {
        let ds = ProbeDataset::new(
            Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]),
            vec![3, 1],
            Matrix::from_rows(&[[2.0, 0.0]]),
            vec![3],
        )
        .unwrap();
        assert_eq!(knn_predict(&ds, &KnnConfig { k: 1, temperature: 0.07 }).unwrap(), vec![3]);
    }

    #[test]
    fn separated_blobs_are_perfect() {
        let mut rng = RngStream::new(0);
        let (trx, tr_y) = blobs(40, 1.0, &mut rng);
        let (tex, te_y) = blobs(40, 1.0, &mut rng);
        // brute-force oracle: every test row's 10 nearest rows share its label
        let ds = ProbeDataset::new(trx, tr_y, tex, te_y).unwrap();
        assert_eq!(knn_probe(&ds, &KnnConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn single_class_train_predicts_it() {
        let mut rng = RngStream::new(1);
        let ds = ProbeDataset::new(
            Matrix::random_normal(12, 4, 1.0, &mut rng),
            vec![2; 12],
            Matrix::random_normal(5, 4, 1.0, &mut rng),
            vec![0, 1, 2, 0, 1],
        )
        .unwrap();
        assert_eq!(knn_predict(&ds, &KnnConfig::default()).unwrap(), vec![2; 5]);
    }

    #[test]
    fn too_few_neighbors() {
        let ds = ProbeDataset::new(Matrix::zeros(3, 2), vec![0; 3], Matrix::zeros(1, 2), vec![0]).unwrap();
        assert_eq!(
            knn_probe(&ds, &KnnConfig::default()).unwrap_err(),
            ProbeError::TooFewNeighbors { train: 3, k: 10 }
        );
    }

    proptest! {
        #[test]
        fn knn_is_scale_invariant(seed in 0u64..500, scale in 0.01f64..100.0) {
            let mut rng = RngStream::new(seed);
            let trx = Matrix::random_normal(30, 5, 1.0, &mut rng);
            let tr_y: Vec<u32> = (0..30).map(|_| rng.below(3) as u32).collect();
            let tex = Matrix::random_normal(10, 5, 1.0, &mut rng);
            let cfg = KnnConfig { k: 5, temperature: 0.1 };
            let a = ProbeDataset::new(trx.clone(), tr_y.clone(), tex.clone(), vec![0; 10]).unwrap();
            let b = ProbeDataset::new(trx.scaled(scale), tr_y, tex.scaled(scale), vec![0; 10]).unwrap();
            prop_assert_eq!(knn_predict(&a, &cfg).unwrap(), knn_predict(&b, &cfg).unwrap());
        }

        #[test]
        fn k1_ignores_temperature(seed in 0u64..500, t in 0.01f64..10.0) {
            let mut rng = RngStream::new(seed);
            let trx = Matrix::random_normal(20, 4, 1.0, &mut rng);
            let tr_y: Vec<u32> = (0..20).map(|_| rng.below(4) as u32).collect();
            let tex = Matrix::random_normal(8, 4, 1.0, &mut rng);
            let ds = ProbeDataset::new(trx, tr_y, tex, vec![0; 8]).unwrap();
            let a = knn_predict(&ds, &KnnConfig { k: 1, temperature: t }).unwrap();
            let b = knn_predict(&ds, &KnnConfig { k: 1, temperature: 0.07 }).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn low_shot_partitions(seed in 0u64..1000, n in 1usize..9) {
            let labels: Vec<u32> = (0..30).map(|i| (i % 3) as u32).collect();
            let feats = Matrix::from_vec(30, 1, (0..30).map(|i| i as f64).collect()).unwrap();
            let ds = low_shot_split(&feats, &labels, n, seed).unwrap();
            prop_assert_eq!(ds.train_x.rows(), 3 * n);
            let mut all: Vec<f64> = ds.train_x.as_slice().iter().chain(ds.test_x.as_slice()).cloned().collect();
            all.sort_by(f64::total_cmp);
            prop_assert_eq!(all, (0..30).map(|i| i as f64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn low_shot_counts_and_errors() {
        let labels: Vec<u32> = (0..30).map(|i| (i % 3) as u32).collect();
        let feats = Matrix::zeros(30, 2);
        let ds = low_shot_split(&feats, &labels, 1, 0).unwrap();
        assert_eq!((ds.train_x.rows(), ds.test_x.rows()), (3, 27));
        assert_eq!(low_shot_split(&feats, &labels, 10, 0).unwrap_err(), ProbeError::EmptyTest);
        assert!(matches!(low_shot_split(&feats, &labels, 11, 0), Err(ProbeError::ClassTooSmall { .. })));
    }

    #[test]
    fn low_shot_seeds_differ() {
        let labels: Vec<u32> = (0..30).map(|i| (i % 3) as u32).collect();
        let feats = Matrix::from_vec(30, 1, (0..30).map(|i| i as f64).collect()).unwrap();
        let a = low_shot_split(&feats, &labels, 2, 1).unwrap();
        let b = low_shot_split(&feats, &labels, 2, 2).unwrap();
        assert_ne!(a.train_x, b.train_x);
    }

    #[test]
    fn logistic_separates_1d() {
        let x = Matrix::from_vec(6, 1, vec![-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]).unwrap();
        let y = vec![0, 0, 0, 1, 1, 1];
        let ds = ProbeDataset::new(x.clone(), y.clone(), x, y).unwrap();
        let (model, _) = train_logistic(&ds, &LinearProbeConfig::default()).unwrap();
        assert!(model.weight.get(1, 0) > model.weight.get(0, 0));
        assert_eq!(linear_probe(&ds, &LinearProbeConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn zero_epochs_predicts_class_zero() {
        let x = Matrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ds = ProbeDataset::new(x.clone(), vec![0, 1, 2, 1], x, vec![0, 1, 1, 2]).unwrap();
        let cfg = LinearProbeConfig { epochs: 0, ..Default::default() };
        assert_eq!(linear_probe(&ds, &cfg).unwrap(), 0.25);
        let missing = ProbeDataset::new(Matrix::zeros(2, 1), vec![0, 2], Matrix::zeros(1, 1), vec![1]).unwrap();
        assert_eq!(linear_probe(&missing, &cfg).unwrap_err(), ProbeError::MissingClass(1));
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(3);
        let x = Matrix::random_normal(7, 4, 1.0, &mut rng);
        let y = vec![0, 1, 2, 1, 0, 2, 2];
        let model = LogisticRegression {
            weight: Matrix::random_normal(3, 4, 0.5, &mut rng),
            bias: vec![0.1, -0.2, 0.3],
        };
        let (_, g) = model.loss_and_grad(&x, &y, 0.01);
        let flat: Vec<f64> = model.weight.as_slice().iter().chain(&model.bias).cloned().collect();
        let numeric = finite_diff_grad(
            |p| {
                let m = LogisticRegression {
                    weight: Matrix::from_vec(3, 4, p[..12].to_vec()).unwrap(),
                    bias: p[12..].to_vec(),
                };
                m.loss_and_grad(&x, &y, 0.01).0
            },
            &flat,
            1e-6,
        )
        .unwrap();
        let analytic: Vec<f64> = g.weight.as_slice().iter().chain(&g.bias).cloned().collect();
        assert!(gradient_mismatch(&analytic, &numeric, 1e-5, 1e-7) <= 1.0);
    }

    #[test]
    fn logistic_loss_is_non_increasing_at_small_lr() {
        let mut rng = RngStream::new(4);
        let (x, y) = blobs(30, 0.3, &mut rng);
        let ds = ProbeDataset::new(x.clone(), y.clone(), x, y).unwrap();
        let (_, losses) = train_logistic(&ds, &LinearProbeConfig { epochs: 50, lr: 1e-3, weight_decay: 0.0 }).unwrap();
        assert!(losses.windows(2).all(|w| w[1] <= w[0]));
    }
}
