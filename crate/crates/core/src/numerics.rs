//! Dense row-major matrices, numerically stable reductions, seeded random
//! streams and a central-difference gradient oracle.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norm below which a row is treated as the zero vector.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("row {row} has norm below {ZERO_NORM:e}")]
    ZeroRow { row: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value at coordinate {index}")]
    NonFinite { index: usize },
    #[error("buffer of length {len} cannot hold a {rows}x{cols} matrix")]
    BadLength { rows: usize, cols: usize, len: usize },
}

/// Row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::BadLength { rows, cols, len: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            (self.cols as isize, 1),
            &other.data,
            (other.cols as isize, 1),
            &mut out.data,
        );
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dimension");
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(
            self.rows,
            self.cols,
            other.rows,
            &self.data,
            (self.cols as isize, 1),
            &other.data,
            (1, other.cols as isize),
            &mut out.data,
        );
        out
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dimension");
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(
            self.cols,
            self.rows,
            other.cols,
            &self.data,
            (1, self.cols as isize),
            &other.data,
            (other.cols as isize, 1),
            &mut out.data,
        );
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) {
        assert_eq!(bias.len(), self.cols);
        for r in 0..self.rows {
            for (v, b) in self.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    /// Stacks matrices vertically. All inputs must share a column count.
    pub fn vstack(parts: &[&Matrix]) -> Matrix {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols, cols, "vstack column mismatch");
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Matrix { rows, cols, data }
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a` (m×k), `b` (k×n)
    // and the contiguous row-major output `c` (m×n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix, NumericsError> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = norm(row);
        if n < ZERO_NORM {
            return Err(NumericsError::ZeroRow { row: r });
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Row normalization that divides by `max(norm, ZERO_NORM)` instead of
/// failing; all-zero rows stay zero. Returns the normalized rows and the
/// clamped norms, which [`l2_normalize_rows_backward`] needs.
pub fn l2_normalize_rows_clamped(m: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = norm(row).max(ZERO_NORM);
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (out, norms)
}

/// Gradient of row normalization: `(g - (g·u) u) / ‖x‖` per row, where `u`
/// is the normalized row.
pub fn l2_normalize_rows_backward(normalized: &Matrix, norms: &[f64], grad: &Matrix) -> Matrix {
    let mut out = grad.clone();
    for r in 0..grad.rows() {
        let u = normalized.row(r);
        let n = norms[r];
        let row = out.row_mut(r);
        if n <= ZERO_NORM && u.iter().all(|v| *v == 0.0) {
            row.iter_mut().for_each(|v| *v /= ZERO_NORM);
            continue;
        }
        let gu = dot(row, u);
        for (g, ui) in row.iter_mut().zip(u) {
            *g = (*g - gu * ui) / n;
        }
    }
    out
}

/// Pairwise dot products of unit rows: entry `(i, j) = a_i · b_j`.
pub fn cosine_similarity(a: &Matrix, b: &Matrix) -> Result<Matrix, NumericsError> {
    if a.cols() != b.cols() {
        return Err(NumericsError::DimMismatch { left: a.cols(), right: b.cols() });
    }
    Ok(a.matmul_nt(b))
}

/// `log Σ exp(v_i)`, evaluated with a max shift.
pub fn log_sum_exp(v: &[f64]) -> Result<f64, NumericsError> {
    if v.is_empty() {
        return Err(NumericsError::EmptyInput);
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        let index = v.iter().position(|x| !x.is_finite()).unwrap_or(0);
        return Err(NumericsError::NonFinite { index });
    }
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>, NumericsError>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe);
        probe[i] = orig - eps;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(NumericsError::NonFinite { index: i });
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Largest elementwise violation of `|a - b| <= abs_tol + rel_tol * max(|a|, |b|)`,
/// expressed as the ratio of the error to the allowed bound (≤ 1 means pass).
pub fn gradient_mismatch(analytic: &[f64], numeric: &[f64], rel_tol: f64, abs_tol: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let bound = abs_tol + rel_tol * a.abs().max(n.abs());
            (a - n).abs() / bound
        })
        .fold(0.0, f64::max)
}

/// Seeded random stream. Built on a counter-mode ChaCha core so that
/// [`RngStream::split`] yields independent, reproducible sub-streams.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Independent child stream keyed by `id`. Does not advance `self`.
    pub fn split(&self, id: u64) -> RngStream {
        let child = splitmix(self.stream ^ splitmix(id.wrapping_add(0x9E37_79B9_7F4A_7C15)));
        Self::with_stream(self.seed, child)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngCore;

    #[test]
    fn normalize_examples() {
        let m = l2_normalize_rows(&Matrix::from_rows(&[[3.0, 4.0]])).unwrap();
        assert!((m.get(0, 0) - 0.6).abs() < 1e-15 && (m.get(0, 1) - 0.8).abs() < 1e-15);
        let m = l2_normalize_rows(&Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0]])).unwrap();
        assert_eq!(m.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn normalize_random_rows_keep_direction() {
        let mut rng = RngStream::new(3);
        let m = Matrix::random_normal(5, 8, 1.0, &mut rng);
        let n = l2_normalize_rows(&m).unwrap();
        for r in 0..5 {
            assert!((norm(n.row(r)) - 1.0).abs() < 1e-12);
            let cos = dot(m.row(r), n.row(r)) / norm(m.row(r));
            assert!((cos - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_zero_row_fails() {
        let m = Matrix::from_rows(&[[1.0, 1.0], [0.0, 0.0]]);
        assert_eq!(l2_normalize_rows(&m), Err(NumericsError::ZeroRow { row: 1 }));
    }

    #[test]
    fn cosine_examples() {
        let e1 = Matrix::from_rows(&[[1.0, 0.0]]);
        let e2 = Matrix::from_rows(&[[0.0, 1.0]]);
        let neg = Matrix::from_rows(&[[-1.0, 0.0]]);
        assert_eq!(cosine_similarity(&e1, &e1).unwrap().get(0, 0), 1.0);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap().get(0, 0), 0.0);
        assert_eq!(cosine_similarity(&e1, &neg).unwrap().get(0, 0), -1.0);
        let e3 = Matrix::from_rows(&[[1.0, 0.0, 0.0]]);
        assert!(matches!(cosine_similarity(&e1, &e3), Err(NumericsError::DimMismatch { .. })));
    }

    #[test]
    fn log_sum_exp_examples() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]).unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let v = [-1.0, 2.0, 0.5];
        let naive = v.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v).unwrap() - naive).abs() < 1e-14);
        assert_eq!(log_sum_exp(&[]), Err(NumericsError::EmptyInput));
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.3], 1e-5).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        let err = finite_diff_grad(|x| if x[0] > 0.0 { f64::NAN } else { 0.0 }, &[0.0], 1e-5);
        assert_eq!(err, Err(NumericsError::NonFinite { index: 0 }));
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let mut rng = RngStream::new(11);
        let a = Matrix::random_normal(4, 3, 1.0, &mut rng);
        let b = Matrix::random_normal(3, 5, 1.0, &mut rng);
        let c = a.matmul(&b);
        for i in 0..4 {
            for j in 0..5 {
                let naive: f64 = (0..3).map(|k| a.get(i, k) * b.get(k, j)).sum();
                assert!((c.get(i, j) - naive).abs() < 1e-12);
            }
        }
        assert!(a.matmul_nt(&b.transpose()).max_abs_diff(&c) < 1e-12);
        assert!(a.transpose().matmul_tn(&b).max_abs_diff(&c) < 1e-12);
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let mut rng = RngStream::new(5);
        let x = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let w = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let (u, norms) = l2_normalize_rows_clamped(&x);
        let analytic = l2_normalize_rows_backward(&u, &norms, &w);
        let numeric = finite_diff_grad(
            |p| {
                let m = Matrix::from_vec(3, 4, p.to_vec()).unwrap();
                let (u, _) = l2_normalize_rows_clamped(&m);
                dot(u.as_slice(), w.as_slice())
            },
            x.as_slice(),
            1e-6,
        )
        .unwrap();
        assert!(gradient_mismatch(analytic.as_slice(), &numeric, 1e-5, 1e-7) <= 1.0);
    }

    #[test]
    fn split_streams_are_reproducible_and_distinct() {
        let root = RngStream::new(42);
        let mut a1 = root.split(1);
        let mut a2 = root.split(1);
        let mut b = root.split(2);
        let xs: Vec<u64> = (0..8).map(|_| a1.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| a2.next_u64()).collect();
        let zs: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(data in proptest::collection::vec(-10.0f64..10.0, 12)) {
            let m = Matrix::from_vec(3, 4, data).unwrap();
            prop_assume!(m.iter_rows().all(|r| norm(r) > 1e-3));
            let once = l2_normalize_rows(&m).unwrap();
            let twice = l2_normalize_rows(&once).unwrap();
            prop_assert!(once.max_abs_diff(&twice) <= 1e-12);
        }

        #[test]
        fn self_cosine_has_unit_diagonal(data in proptest::collection::vec(-5.0f64..5.0, 15)) {
            let m = Matrix::from_vec(5, 3, data).unwrap();
            prop_assume!(m.iter_rows().all(|r| norm(r) > 1e-3));
            let n = l2_normalize_rows(&m).unwrap();
            let s = cosine_similarity(&n, &n).unwrap();
            for i in 0..5 {
                prop_assert!((s.get(i, i) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn log_sum_exp_shift(v in proptest::collection::vec(-20.0f64..20.0, 1..10), sign in proptest::bool::ANY) {
            let c = if sign { 500.0 } else { -500.0 };
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let lhs = log_sum_exp(&shifted).unwrap();
            let rhs = log_sum_exp(&v).unwrap() + c;
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn same_seed_same_draws(seed in proptest::num::u64::ANY) {
            let mut a = RngStream::new(seed);
            let mut b = RngStream::new(seed);
            for _ in 0..16 {
                prop_assert_eq!(a.next_u64(), b.next_u64());
            }
        }
    }
}
