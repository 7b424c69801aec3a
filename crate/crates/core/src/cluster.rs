//! Clustering battery: mini-batch k-means with restarts, optimal-assignment
//! cluster accuracy, NMI/AMI/ARI, silhouette and Davies-Bouldin scores.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Matrix, RngStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("{rows} rows cannot form {k} clusters")]
    TooFewRows { rows: usize, k: usize },
    #[error("label vectors have lengths {left} and {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("at least two non-empty clusters are required")]
    SingleCluster,
    #[error("invalid k-means config: {0}")]
    BadConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KmeansConfig {
    pub k: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self { k: 8, batch_size: 256, iterations: 100, restarts: 100, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub labels: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.iter_rows().enumerate() {
        let d = sq_dist(x, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(x: &Matrix, centroids: &Matrix) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = x
        .iter_rows()
        .map(|r| {
            let (c, d) = nearest(r, centroids);
            inertia += d;
            c
        })
        .collect();
    (labels, inertia)
}

fn single_run(x: &Matrix, cfg: &KmeansConfig, rng: &mut RngStream) -> Clustering {
    let n = x.rows();
    // seed centroids on k rows with distinct values where possible
    let order = rng.permutation(n);
    let mut chosen: Vec<usize> = Vec::with_capacity(cfg.k);
    for &i in &order {
        if chosen.len() == cfg.k {
            break;
        }
        if chosen.iter().all(|&j| x.row(j) != x.row(i)) {
            chosen.push(i);
        }
    }
    for &i in &order {
        if chosen.len() == cfg.k {
            break;
        }
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }
    let mut centroids = x.select_rows(&chosen);
    let mut counts = vec![0usize; cfg.k];
    let batch = cfg.batch_size.min(n);
    for _ in 0..cfg.iterations {
        let rows: Vec<usize> = (0..batch).map(|_| rng.below(n)).collect();
        let targets: Vec<usize> = rows.iter().map(|&r| nearest(x.row(r), &centroids).0).collect();
        for (&r, &c) in rows.iter().zip(&targets) {
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            for (m, v) in centroids.row_mut(c).iter_mut().zip(x.row(r)) {
                *m += eta * (v - *m);
            }
        }
    }
    let (labels, inertia) = assign(x, &centroids);
    Clustering { labels, centroids, inertia }
}

/// Best of `restarts` independent runs by full-data inertia (ties go to the
/// earlier restart). Rows should already be L2-normalized.
pub fn minibatch_kmeans(x: &Matrix, cfg: &KmeansConfig) -> Result<Clustering, ClusterError> {
    if cfg.k < 2 || cfg.restarts == 0 || cfg.batch_size == 0 {
        return Err(ClusterError::BadConfig("need k >= 2, restarts >= 1 and batch_size >= 1".into()));
    }
    if x.rows() < cfg.k {
        return Err(ClusterError::TooFewRows { rows: x.rows(), k: cfg.k });
    }
    let base = RngStream::new(cfg.seed);
    let runs: Vec<Clustering> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| single_run(x, cfg, &mut base.split(r as u64)))
        .collect();
    let mut best = 0;
    for (i, run) in runs.iter().enumerate() {
        if run.inertia < runs[best].inertia {
            best = i;
        }
    }
    Ok(runs.into_iter().nth(best).expect("restarts >= 1"))
}

fn check_lengths(a: &[usize], b: &[usize]) -> Result<(), ClusterError> {
    if a.len() != b.len() {
        return Err(ClusterError::LengthMismatch { left: a.len(), right: b.len() });
    }
    Ok(())
}

/// Contingency counts with rows indexed by `a`'s ids and columns by `b`'s.
fn contingency(a: &[usize], b: &[usize]) -> Vec<Vec<f64>> {
    let ra = a.iter().max().map_or(0, |m| m + 1);
    let rb = b.iter().max().map_or(0, |m| m + 1);
    let mut t = vec![vec![0.0; rb]; ra];
    for (&i, &j) in a.iter().zip(b) {
        t[i][j] += 1.0;
    }
    t
}

/// Maximum-weight perfect matching on a square matrix; returns the column
/// assigned to each row.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<usize> {
    let n = weights.len();
    let top = weights.iter().flatten().cloned().fold(0.0f64, f64::max);
    let cost = |i: usize, j: usize| top - weights[i][j];
    // potentials-based shortest augmenting path, 1-indexed with a dummy column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

/// Percentage of points matched under the best one-to-one mapping of
/// predicted ids to true ids.
pub fn cluster_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64, ClusterError> {
    check_lengths(pred, truth)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let t = contingency(pred, truth);
    let n = t.len().max(t[0].len());
    let mut square = vec![vec![0.0; n]; n];
    for (i, row) in t.iter().enumerate() {
        square[i][..row.len()].copy_from_slice(row);
    }
    let assignment = max_weight_assignment(&square);
    let matched: f64 = assignment.iter().enumerate().map(|(i, &j)| square[i][j]).sum();
    Ok(100.0 * matched / pred.len() as f64)
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts.iter().filter(|&&c| c > 0.0).map(|&c| -(c / n) * (c / n).ln()).sum()
}

struct Tables {
    n: f64,
    t: Vec<Vec<f64>>,
    rows: Vec<f64>,
    cols: Vec<f64>,
}

fn tables(a: &[usize], b: &[usize]) -> Tables {
    let t = contingency(a, b);
    let rows: Vec<f64> = t.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..t.first().map_or(0, Vec::len)).map(|j| t.iter().map(|r| r[j]).sum()).collect();
    Tables { n: a.len() as f64, t, rows, cols }
}

/// Sum in sorted order, so swapping the two labelings gives the same bits.
fn ordered_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

fn mutual_information(tb: &Tables) -> f64 {
    let mut terms = Vec::new();
    for (i, row) in tb.t.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0.0 {
                terms.push(nij / tb.n * (tb.n * nij / (tb.rows[i] * tb.cols[j])).ln());
            }
        }
    }
    ordered_sum(terms).max(0.0)
}

fn nonempty(v: &[f64]) -> usize {
    v.iter().filter(|&&c| c > 0.0).count()
}

/// Mutual information over the arithmetic mean of the two entropies.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64, ClusterError> {
    check_lengths(a, b)?;
    let tb = tables(a, b);
    let (ha, hb) = (entropy(&tb.rows, tb.n), entropy(&tb.cols, tb.n));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mean = 0.5 * (ha + hb);
    Ok((mutual_information(&tb) / mean).min(1.0))
}

/// Expected mutual information under the hypergeometric model of random
/// labelings with fixed marginals.
fn expected_mutual_information(tb: &Tables) -> f64 {
    let n = tb.n;
    let lg = |x: f64| libm::lgamma(x + 1.0);
    let lg_n = lg(n);
    let mut terms = Vec::new();
    for &ai in tb.rows.iter().filter(|&&c| c > 0.0) {
        for &bj in tb.cols.iter().filter(|&&c| c > 0.0) {
            let lo = (ai + bj - n).max(1.0);
            let hi = ai.min(bj);
            let mut nij = lo;
            while nij <= hi {
                let term = nij / n * (n * nij / (ai * bj)).ln();
                let log_p = ((lg(ai) + lg(n - ai)) + (lg(bj) + lg(n - bj)))
                    - lg_n
                    - lg(nij)
                    - (lg(ai - nij) + lg(bj - nij))
                    - lg(n - ai - bj + nij);
                terms.push(term * log_p.exp());
                nij += 1.0;
            }
        }
    }
    ordered_sum(terms)
}

/// Chance-adjusted mutual information, arithmetic-mean normalization.
pub fn ami(a: &[usize], b: &[usize]) -> Result<f64, ClusterError> {
    check_lengths(a, b)?;
    let tb = tables(a, b);
    let (ka, kb) = (nonempty(&tb.rows), nonempty(&tb.cols));
    let n = a.len();
    if (ka == kb && (ka <= 1 || ka == n)) || n == 0 {
        return Ok(1.0);
    }
    let mi = mutual_information(&tb);
    let emi = expected_mutual_information(&tb);
    let mean = 0.5 * (entropy(&tb.rows, tb.n) + entropy(&tb.cols, tb.n));
    let mut denom = mean - emi;
    denom = if denom < 0.0 { denom.min(-f64::EPSILON) } else { denom.max(f64::EPSILON) };
    Ok((mi - emi) / denom)
}

fn comb2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64, ClusterError> {
    check_lengths(a, b)?;
    let tb = tables(a, b);
    let n = a.len();
    let (ka, kb) = (nonempty(&tb.rows), nonempty(&tb.cols));
    if ka == kb && (ka <= 1 || ka == n) {
        return Ok(1.0);
    }
    let index: f64 = tb.t.iter().flatten().map(|&c| comb2(c)).sum();
    let sa: f64 = tb.rows.iter().map(|&c| comb2(c)).sum();
    let sb: f64 = tb.cols.iter().map(|&c| comb2(c)).sum();
    let expected = sa * sb / comb2(tb.n);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(0.0);
    }
    Ok((index - expected) / (max - expected))
}

fn pairwise_distances(x: &Matrix) -> Matrix {
    let norms: Vec<f64> = x.iter_rows().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mut g = x.matmul_nt(x);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let d2 = norms[i] + norms[j] - 2.0 * g.get(i, j);
            g.set(i, j, if i == j { 0.0 } else { d2.max(0.0).sqrt() });
        }
    }
    g
}

fn cluster_ids(labels: &[usize]) -> Result<usize, ClusterError> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; k];
    labels.iter().for_each(|&l| seen[l] = true);
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(ClusterError::SingleCluster);
    }
    Ok(k)
}

/// Mean silhouette coefficient × 100 under Euclidean distance; points in
/// singleton clusters count as 0.
pub fn silhouette(x: &Matrix, labels: &[usize]) -> Result<f64, ClusterError> {
    if x.rows() != labels.len() {
        return Err(ClusterError::LengthMismatch { left: x.rows(), right: labels.len() });
    }
    let k = cluster_ids(labels)?;
    let mut sizes = vec![0.0; k];
    labels.iter().for_each(|&l| sizes[l] += 1.0);
    let d = pairwise_distances(x);
    let mut total = 0.0;
    for i in 0..x.rows() {
        let own = labels[i];
        if sizes[own] <= 1.0 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for (j, &l) in labels.iter().enumerate() {
            sums[l] += d.get(i, j);
        }
        let a = sums[own] / (sizes[own] - 1.0);
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0.0)
            .map(|c| sums[c] / sizes[c])
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(100.0 * total / x.rows() as f64)
}

/// Davies-Bouldin index (lower is better).
pub fn davies_bouldin(x: &Matrix, labels: &[usize]) -> Result<f64, ClusterError> {
    if x.rows() != labels.len() {
        return Err(ClusterError::LengthMismatch { left: x.rows(), right: labels.len() });
    }
    let k = cluster_ids(labels)?;
    let mut centroids = Matrix::zeros(k, x.cols());
    let mut sizes = vec![0.0; k];
    for (r, &l) in labels.iter().enumerate() {
        sizes[l] += 1.0;
        for (c, v) in centroids.row_mut(l).iter_mut().zip(x.row(r)) {
            *c += v;
        }
    }
    let present: Vec<usize> = (0..k).filter(|&c| sizes[c] > 0.0).collect();
    for &c in &present {
        let s = sizes[c];
        centroids.row_mut(c).iter_mut().for_each(|v| *v /= s);
    }
    let mut scatter = vec![0.0; k];
    for (r, &l) in labels.iter().enumerate() {
        scatter[l] += sq_dist(x.row(r), centroids.row(l)).sqrt();
    }
    for &c in &present {
        scatter[c] /= sizes[c];
    }
    let mut total = 0.0;
    for &i in &present {
        let mut worst = 0.0f64;
        for &j in &present {
            if i == j {
                continue;
            }
            let dist = sq_dist(centroids.row(i), centroids.row(j)).sqrt();
            let ratio = if dist > 0.0 { (scatter[i] + scatter[j]) / dist } else { f64::INFINITY };
            worst = worst.max(ratio);
        }
        total += worst;
    }
    Ok(total / present.len() as f64)
}

/// `100 · NMI` between the cluster labels of consecutive blocks.
pub fn block_cluster_similarity(per_block_labels: &[Vec<usize>]) -> Result<Vec<f64>, ClusterError> {
    if per_block_labels.len() < 2 {
        return Err(ClusterError::BadConfig("need labels from at least two blocks".into()));
    }
    per_block_labels.windows(2).map(|w| Ok(100.0 * nmi(&w[0], &w[1])?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn accuracy_examples() {
        let truth = [0, 1, 1, 2, 2, 0];
        assert_eq!(cluster_accuracy(&truth, &truth).unwrap(), 100.0);
        let permuted: Vec<usize> = truth.iter().map(|&t| [2, 0, 1][t]).collect();
        assert_eq!(cluster_accuracy(&permuted, &truth).unwrap(), 100.0);
        // every contingency cell is at most 1, so no mapping beats 3 of 6
        let pred = [0, 0, 1, 1, 2, 2];
        let brute = permutations(3)
            .iter()
            .map(|p| pred.iter().zip(&truth).filter(|(a, b)| p[**a] == **b).count())
            .max()
            .unwrap();
        assert_eq!(brute, 3);
        assert_eq!(cluster_accuracy(&pred, &truth).unwrap(), 50.0);
        assert!(matches!(cluster_accuracy(&[0], &[0, 1]), Err(ClusterError::LengthMismatch { .. })));
    }

    proptest! {
        #[test]
        fn assignment_matches_brute_force(n in 1usize..7, seed in 0u64..10_000) {
            let mut rng = RngStream::new(seed);
            let w: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.below(20) as f64).collect()).collect();
            let a = max_weight_assignment(&w);
            let got: f64 = a.iter().enumerate().map(|(i, &j)| w[i][j]).sum();
            let best = permutations(n)
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| w[i][j]).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(got, best);
        }

        #[test]
        fn partition_scores_are_symmetric(seed in 0u64..10_000) {
            let mut rng = RngStream::new(seed);
            let a: Vec<usize> = (0..40).map(|_| rng.below(4)).collect();
            let b: Vec<usize> = (0..40).map(|_| rng.below(3)).collect();
            prop_assert_eq!(nmi(&a, &b).unwrap(), nmi(&b, &a).unwrap());
            prop_assert_eq!(ari(&a, &b).unwrap(), ari(&b, &a).unwrap());
            prop_assert_eq!(ami(&a, &b).unwrap(), ami(&b, &a).unwrap());
        }

        #[test]
        fn accuracy_is_label_permutation_invariant(seed in 0u64..10_000) {
            let mut rng = RngStream::new(seed);
            let pred: Vec<usize> = (0..30).map(|_| rng.below(4)).collect();
            let truth: Vec<usize> = (0..30).map(|_| rng.below(4)).collect();
            let p = rng.permutation(4);
            let q = rng.permutation(4);
            let pp: Vec<usize> = pred.iter().map(|&l| p[l]).collect();
            let tt: Vec<usize> = truth.iter().map(|&l| q[l]).collect();
            prop_assert!((cluster_accuracy(&pred, &truth).unwrap() - cluster_accuracy(&pp, &tt).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_partitions_score_one() {
        let a = [0, 0, 1, 1, 2, 2, 2];
        assert_eq!(nmi(&a, &a).unwrap(), 1.0);
        assert!((ami(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ari(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ari_constant_vs_balanced_is_zero() {
        assert_eq!(ari(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn refinement_is_not_perfect() {
        let coarse = [0, 0, 0, 0, 1, 1, 1, 1];
        let fine = [0, 0, 1, 1, 2, 2, 3, 3];
        assert!(ari(&coarse, &fine).unwrap() < 1.0);
    }

    #[test]
    fn expected_mutual_information_by_enumeration() {
        // all 4!/(2!2!)=6 relabelings of b with fixed marginals are equally likely
        let a = [0, 0, 1, 1];
        let perms = [[0, 0, 1, 1], [0, 1, 0, 1], [0, 1, 1, 0], [1, 0, 0, 1], [1, 0, 1, 0], [1, 1, 0, 0]];
        let brute: f64 = perms.iter().map(|b| mutual_information(&tables(&a, b))).sum::<f64>() / 6.0;
        let exact = expected_mutual_information(&tables(&a, &[0, 0, 1, 1]));
        assert!((brute - exact).abs() < 1e-12, "{brute} vs {exact}");
    }

    #[test]
    fn null_scores_are_near_zero() {
        let mut rng = RngStream::new(11);
        let (mut s_ami, mut s_ari) = (0.0, 0.0);
        for _ in 0..100 {
            let a: Vec<usize> = (0..200).map(|_| rng.below(5)).collect();
            let b: Vec<usize> = (0..200).map(|_| rng.below(5)).collect();
            s_ami += ami(&a, &b).unwrap();
            s_ari += ari(&a, &b).unwrap();
        }
        assert!((s_ami / 100.0).abs() < 0.05 && (s_ari / 100.0).abs() < 0.05);
    }

    #[test]
    fn four_point_closed_form() {
        let (eps, big) = (0.01, 10.0);
        let x = Matrix::from_rows(&[[0.0], [eps], [big], [big + eps]]);
        let labels = [0, 0, 1, 1];
        // a = ε; b = mean distance to the far pair (D for one, D for the other side)
        let sil_ref = {
            let b0 = (big + big + eps) / 2.0;
            let b1 = (big - eps + big) / 2.0;
            100.0 * ((b0 - eps) / b0 + (b1 - eps) / b1 + (b1 - eps) / b1 + (b0 - eps) / b0) / 4.0
        };
        assert!((silhouette(&x, &labels).unwrap() - sil_ref).abs() < 1e-9);
        let dbs_ref = (eps / 2.0 + eps / 2.0) / big;
        assert!((davies_bouldin(&x, &labels).unwrap() - dbs_ref).abs() < 1e-12);
    }

    #[test]
    fn duplicated_points_have_zero_dbs() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]);
        assert_eq!(davies_bouldin(&x, &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(silhouette(&x, &[0, 0, 0, 0]).unwrap_err(), ClusterError::SingleCluster);
    }

    #[test]
    fn random_labels_on_one_blob_have_flat_silhouette() {
        for seed in 0..5 {
            let mut rng = RngStream::new(seed);
            let x = Matrix::random_normal(120, 3, 1.0, &mut rng);
            let labels: Vec<usize> = (0..120).map(|_| rng.below(3)).collect();
            assert!(silhouette(&x, &labels).unwrap().abs() < 10.0);
        }
    }

    #[test]
    fn kmeans_recovers_repeated_points() {
        let pts = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        let rows: Vec<[f64; 2]> = (0..30).map(|i| pts[i % 3]).collect();
        let x = Matrix::from_rows(&rows);
        let cfg = KmeansConfig { k: 3, batch_size: 8, iterations: 5, restarts: 2, seed: 1 };
        let c = minibatch_kmeans(&x, &cfg).unwrap();
        assert_eq!(c.inertia, 0.0);
        let truth: Vec<usize> = (0..30).map(|i| i % 3).collect();
        assert_eq!(cluster_accuracy(&c.labels, &truth).unwrap(), 100.0);
    }

    #[test]
    fn kmeans_separates_tight_blobs() {
        let mut rng = RngStream::new(2);
        let rows: Vec<[f64; 2]> = (0..60)
            .map(|i| {
                let c = if i % 2 == 0 { 5.0 } else { -5.0 };
                [c + 0.05 * rng.normal(), 0.05 * rng.normal()]
            })
            .collect();
        let truth: Vec<usize> = (0..60).map(|i| i % 2).collect();
        let cfg = KmeansConfig { k: 2, batch_size: 16, iterations: 20, restarts: 10, seed: 0 };
        let c = minibatch_kmeans(&Matrix::from_rows(&rows), &cfg).unwrap();
        assert_eq!(ari(&c.labels, &truth).unwrap(), 1.0);
    }

    #[test]
    fn more_restarts_never_hurt_and_runs_reproduce() {
        let mut rng = RngStream::new(3);
        let x = Matrix::random_normal(150, 4, 1.0, &mut rng);
        let one = KmeansConfig { k: 6, batch_size: 32, iterations: 10, restarts: 1, seed: 5 };
        let many = KmeansConfig { restarts: 20, ..one.clone() };
        let a = minibatch_kmeans(&x, &one).unwrap();
        let b = minibatch_kmeans(&x, &many).unwrap();
        assert!(b.inertia <= a.inertia);
        assert_eq!(b, minibatch_kmeans(&x, &many).unwrap());
    }

    #[test]
    fn block_similarity_examples() {
        let a = vec![0, 0, 1, 1, 2];
        assert_eq!(block_cluster_similarity(&[a.clone(), a.clone(), a.clone()]).unwrap(), vec![100.0, 100.0]);
        let b = vec![1, 0, 0, 1, 1];
        assert_eq!(block_cluster_similarity(&[a.clone(), b.clone()]).unwrap(), vec![100.0 * nmi(&a, &b).unwrap()]);
    }
}
