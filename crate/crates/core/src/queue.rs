//! First-in-first-out memory of past bottleneck embeddings with top-k
//! cosine retrieval.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{norm, Matrix, RngStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueueError {
    #[error("invalid queue config: {0}")]
    BadConfig(String),
    #[error("row {row} is not unit-norm (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("queue holds {filled} entries, need at least {k}")]
    QueueTooSmall { filled: usize, k: usize },
    #[error("queue entry {index} has no label")]
    UnlabeledQueue { index: usize },
    #[error("dimension mismatch: queue has {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("{labels} labels for {rows} rows")]
    LabelMismatch { rows: usize, labels: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueueConfig {
    pub capacity: usize,
    pub top_k: usize,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self { capacity: 65536, top_k: 20 }
    }
}

impl QueueConfig {
    pub fn validate(&self) -> Result<(), QueueError> {
        if self.capacity == 0 {
            return Err(QueueError::BadConfig("capacity must be >= 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.capacity {
            return Err(QueueError::BadConfig(format!(
                "top_k {} must lie in 1..={}",
                self.top_k, self.capacity
            )));
        }
        Ok(())
    }
}

const NORM_TOLERANCE: f64 = 1e-6;
/// Anchors per similarity block during retrieval.
const ANCHOR_CHUNK: usize = 64;

/// Ring buffer of unit vectors with optional class labels.
///
/// Logical index 0 is the oldest surviving entry. Storage grows lazily up to
/// `capacity` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportQueue {
    capacity: usize,
    dim: usize,
    data: Vec<f64>,
    labels: Vec<Option<u32>>,
    write_cursor: usize,
    filled: usize,
}

impl SupportQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self, QueueError> {
        if capacity == 0 {
            return Err(QueueError::BadConfig("capacity must be >= 1".into()));
        }
        Ok(Self { capacity, dim, data: Vec::new(), labels: Vec::new(), write_cursor: 0, filled: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    fn slot(&self, logical: usize) -> usize {
        debug_assert!(logical < self.filled);
        if self.filled < self.capacity {
            logical
        } else {
            (self.write_cursor + logical) % self.capacity
        }
    }

    /// Entry at logical position `i` (0 = oldest).
    pub fn entry(&self, i: usize) -> (&[f64], Option<u32>) {
        let s = self.slot(i);
        (&self.data[s * self.dim..(s + 1) * self.dim], self.labels[s])
    }

    /// Appends rows in order, overwriting the oldest entries once full.
    pub fn enqueue_batch(&mut self, embeddings: &Matrix, labels: Option<&[u32]>) -> Result<(), QueueError> {
        if embeddings.cols() != self.dim {
            return Err(QueueError::DimMismatch { expected: self.dim, got: embeddings.cols() });
        }
        if let Some(l) = labels {
            if l.len() != embeddings.rows() {
                return Err(QueueError::LabelMismatch { rows: embeddings.rows(), labels: l.len() });
            }
        }
        for (r, row) in embeddings.iter_rows().enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(QueueError::NotNormalized { row: r, norm: n });
            }
        }
        for (r, row) in embeddings.iter_rows().enumerate() {
            let label = labels.map(|l| l[r]);
            if self.labels.len() < self.capacity {
                self.data.extend_from_slice(row);
                self.labels.push(label);
            } else {
                let s = self.write_cursor;
                self.data[s * self.dim..(s + 1) * self.dim].copy_from_slice(row);
                self.labels[s] = label;
            }
            self.write_cursor = (self.write_cursor + 1) % self.capacity;
            self.filled = (self.filled + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Surviving entries, oldest first.
    pub fn snapshot(&self) -> (Matrix, Vec<Option<u32>>) {
        let mut m = Matrix::zeros(self.filled, self.dim);
        let mut labels = Vec::with_capacity(self.filled);
        for i in 0..self.filled {
            let (v, l) = self.entry(i);
            m.row_mut(i).copy_from_slice(v);
            labels.push(l);
        }
        (m, labels)
    }

    /// Similarities of each anchor against every stored entry, in logical order.
    fn similarities(&self, anchors: &Matrix) -> Matrix {
        let (entries, _) = self.snapshot();
        anchors.matmul_nt(&entries)
    }

    /// Logical indices of the `k` most similar entries for one anchor, best
    /// first; ties go to the older entry.
    pub fn top_k(&self, anchor: &[f64], k: usize) -> Result<Vec<usize>, QueueError> {
        if self.filled < k || k == 0 {
            return Err(QueueError::QueueTooSmall { filled: self.filled, k });
        }
        let a = Matrix::from_vec(1, anchor.len(), anchor.to_vec()).expect("row");
        if a.cols() != self.dim {
            return Err(QueueError::DimMismatch { expected: self.dim, got: a.cols() });
        }
        Ok(top_k_of_row(self.similarities(&a).row(0), k))
    }

    /// Picks one of each anchor's `k` nearest entries uniformly at random.
    /// With `k = 1` no randomness is consumed and the result is the argmax.
    pub fn retrieve_nn(
        &self,
        anchors: &Matrix,
        k: usize,
        rng: &mut RngStream,
    ) -> Result<(Matrix, Vec<usize>), QueueError> {
        if k == 0 || self.filled < k {
            return Err(QueueError::QueueTooSmall { filled: self.filled, k });
        }
        if anchors.cols() != self.dim {
            return Err(QueueError::DimMismatch { expected: self.dim, got: anchors.cols() });
        }
        let (entries, _) = self.snapshot();
        let mut indices = Vec::with_capacity(anchors.rows());
        for start in (0..anchors.rows()).step_by(ANCHOR_CHUNK) {
            let end = (start + ANCHOR_CHUNK).min(anchors.rows());
            let sims = anchors.slice_rows(start, end).matmul_nt(&entries);
            for r in 0..sims.rows() {
                let idx = if k == 1 {
                    argmax_row(sims.row(r))
                } else {
                    let top = top_k_of_row(sims.row(r), k);
                    top[rng.below(k)]
                };
                indices.push(idx);
            }
        }
        Ok((entries.select_rows(&indices), indices))
    }

    /// Fraction of anchors whose top-1 neighbor carries the anchor's label.
    pub fn nn_swap_accuracy(&self, anchors: &Matrix, anchor_labels: &[u32]) -> Result<f64, QueueError> {
        if self.filled == 0 {
            return Err(QueueError::QueueTooSmall { filled: 0, k: 1 });
        }
        if anchor_labels.len() != anchors.rows() {
            return Err(QueueError::LabelMismatch { rows: anchors.rows(), labels: anchor_labels.len() });
        }
        let (_, labels) = self.snapshot();
        if let Some(index) = labels.iter().position(Option::is_none) {
            return Err(QueueError::UnlabeledQueue { index });
        }
        if anchors.rows() == 0 {
            return Ok(0.0);
        }
        let mut rng = RngStream::new(0);
        let (_, idx) = self.retrieve_nn(anchors, 1, &mut rng)?;
        let hits = idx
            .iter()
            .zip(anchor_labels)
            .filter(|(i, l)| labels[**i] == Some(**l))
            .count();
        Ok(hits as f64 / anchors.rows() as f64)
    }
}

fn argmax_row(sims: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in sims.iter().enumerate().skip(1) {
        if s > sims[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values, descending, ties to the lower index.
pub(crate) fn top_k_of_row(sims: &[f64], k: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| sims[*b].total_cmp(&sims[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_normalize_rows;
    use proptest::prelude::*;
    use std::collections::VecDeque;

    fn unit(v: &[f64]) -> Matrix {
        l2_normalize_rows(&Matrix::from_rows(&[v])).unwrap()
    }

    #[test]
    fn fifo_eviction() {
        let mut q = SupportQueue::new(3, 2).unwrap();
        let rows = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]);
        q.enqueue_batch(&rows, Some(&[0, 1, 2, 3])).unwrap();
        let (snap, labels) = q.snapshot();
        assert_eq!(snap, rows.slice_rows(1, 4));
        assert_eq!(labels, vec![Some(1), Some(2), Some(3)]);
    }

    #[test]
    fn filled_counts() {
        let mut q = SupportQueue::new(8, 2).unwrap();
        q.enqueue_batch(&Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]), None).unwrap();
        assert_eq!(q.filled(), 2);
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let mut q = SupportQueue::new(4, 2).unwrap();
        let err = q.enqueue_batch(&Matrix::from_rows(&[[1.0, 1.0]]), None).unwrap_err();
        assert!(matches!(err, QueueError::NotNormalized { row: 0, .. }));
        assert!(q.is_empty());
    }

    #[test]
    fn retrieve_argmax() {
        let mut q = SupportQueue::new(4, 2).unwrap();
        q.enqueue_batch(&Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]), None).unwrap();
        let mut rng = RngStream::new(0);
        let (sel, idx) = q.retrieve_nn(&unit(&[1.0, 0.0]), 1, &mut rng).unwrap();
        assert_eq!(idx, vec![0]);
        assert_eq!(sel.row(0), &[1.0, 0.0]);
        let (_, idx) = q.retrieve_nn(&unit(&[0.1, 1.0]), 1, &mut rng).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(
            q.retrieve_nn(&unit(&[1.0, 0.0]), 3, &mut rng).unwrap_err(),
            QueueError::QueueTooSmall { filled: 2, k: 3 }
        );
    }

    #[test]
    fn ties_prefer_older_entries() {
        let mut q = SupportQueue::new(4, 2).unwrap();
        q.enqueue_batch(&Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]]), None).unwrap();
        assert_eq!(q.top_k(&[1.0, 0.0], 2).unwrap(), vec![1, 2]);
        assert_eq!(q.top_k(&[1.0, 0.0], 1).unwrap(), vec![1]);
    }

    #[test]
    fn top3_sampling_is_uniform() {
        let mut rng = RngStream::new(17);
        let entries = l2_normalize_rows(&Matrix::random_normal(10, 5, 1.0, &mut rng)).unwrap();
        let mut q = SupportQueue::new(10, 5).unwrap();
        q.enqueue_batch(&entries, None).unwrap();
        let anchor = l2_normalize_rows(&Matrix::random_normal(1, 5, 1.0, &mut rng)).unwrap();
        // exhaustive reference: sort all similarities
        let mut order: Vec<(f64, usize)> =
            (0..10).map(|i| (crate::numerics::dot(anchor.row(0), entries.row(i)), i)).collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0));
        let expected: Vec<usize> = order[..3].iter().map(|p| p.1).collect();
        assert_eq!(q.top_k(anchor.row(0), 3).unwrap(), expected);
        let mut counts = [0usize; 10];
        let draws = 10_000;
        for _ in 0..draws {
            let (_, idx) = q.retrieve_nn(&anchor, 3, &mut rng).unwrap();
            counts[idx[0]] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            if expected.contains(&i) {
                assert!((c as f64 / draws as f64 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
            } else {
                assert_eq!(c, 0);
            }
        }
    }

    #[test]
    fn nn_swap_accuracy_cases() {
        let mut q = SupportQueue::new(8, 2).unwrap();
        q.enqueue_batch(&Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]), Some(&[4, 4])).unwrap();
        let anchors = l2_normalize_rows(&Matrix::from_rows(&[[1.0, 0.2], [0.3, 1.0]])).unwrap();
        assert_eq!(q.nn_swap_accuracy(&anchors, &[4, 4]).unwrap(), 1.0);
        assert_eq!(q.nn_swap_accuracy(&anchors, &[5, 5]).unwrap(), 0.0);
        let mut unlabeled = SupportQueue::new(4, 2).unwrap();
        unlabeled.enqueue_batch(&Matrix::from_rows(&[[1.0, 0.0]]), None).unwrap();
        assert_eq!(
            unlabeled.nn_swap_accuracy(&anchors, &[0, 0]).unwrap_err(),
            QueueError::UnlabeledQueue { index: 0 }
        );
    }

    #[test]
    fn nn_swap_accuracy_separated_gaussians() {
        let mut rng = RngStream::new(2);
        let dim = 6;
        let mu_a: Vec<f64> = (0..dim).map(|i| if i == 0 { 10.0 } else { 0.0 }).collect();
        let mu_b: Vec<f64> = (0..dim).map(|i| if i == 1 { 10.0 } else { 0.0 }).collect();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2u32 {
            let mu = if c == 0 { &mu_a } else { &mu_b };
            for _ in 0..20 {
                rows.push(mu.iter().map(|m| m + 0.1 * rng.normal()).collect::<Vec<_>>());
                labels.push(c);
            }
        }
        let mut q = SupportQueue::new(64, dim).unwrap();
        q.enqueue_batch(&l2_normalize_rows(&Matrix::from_rows(&rows)).unwrap(), Some(&labels)).unwrap();
        let anchors = l2_normalize_rows(&Matrix::from_rows(&[mu_a.clone(), mu_b.clone()])).unwrap();
        assert_eq!(q.nn_swap_accuracy(&anchors, &[0, 1]).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn fifo_matches_reference(capacity in 1usize..12, batches in proptest::collection::vec(1usize..7, 1..12)) {
            let mut q = SupportQueue::new(capacity, 2).unwrap();
            let mut reference: VecDeque<u32> = VecDeque::new();
            let mut next = 0u32;
            for b in batches {
                let labels: Vec<u32> = (0..b as u32).map(|i| next + i).collect();
                let rows: Vec<[f64; 2]> = labels.iter().map(|&l| {
                    let t = l as f64 * 0.37;
                    [t.cos(), t.sin()]
                }).collect();
                q.enqueue_batch(&Matrix::from_rows(&rows), Some(&labels)).unwrap();
                for l in labels {
                    reference.push_back(l);
                    if reference.len() > capacity {
                        reference.pop_front();
                    }
                }
                next += b as u32;
            }
            let (_, labels) = q.snapshot();
            let got: Vec<u32> = labels.into_iter().map(Option::unwrap).collect();
            prop_assert_eq!(got, reference.into_iter().collect::<Vec<_>>());
        }

        #[test]
        fn retrieval_bounds(seed in 0u64..1000, n in 1usize..20, k in 1usize..5) {
            prop_assume!(k <= n);
            let mut rng = RngStream::new(seed);
            let mut q = SupportQueue::new(n + 3, 4).unwrap();
            q.enqueue_batch(&l2_normalize_rows(&Matrix::random_normal(n, 4, 1.0, &mut rng)).unwrap(), None).unwrap();
            let anchors = l2_normalize_rows(&Matrix::random_normal(5, 4, 1.0, &mut rng)).unwrap();
            let (_, idx) = q.retrieve_nn(&anchors, k, &mut rng).unwrap();
            prop_assert!(idx.iter().all(|&i| i < q.filled()));
            let (_, a) = q.retrieve_nn(&anchors, 1, &mut RngStream::new(1)).unwrap();
            let (_, b) = q.retrieve_nn(&anchors, 1, &mut RngStream::new(2)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
