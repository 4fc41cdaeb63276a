//! Minimal dense linear algebra and seeded randomness.
//!
//! Everything is row-major f64 with a fixed left-to-right accumulation order,
//! so results are bit-deterministic across runs and across the grouped and
//! conventional execution paths.

use crate::error::{Result, SimError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SimError::InvalidArgument {
                arg: "data",
                reason: format!(
                    "expected {} entries for {}x{}, got {}",
                    rows * cols,
                    rows,
                    cols,
                    data.len()
                ),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(nrows * ncols);
        for r in rows {
            if r.len() != ncols {
                return Err(SimError::InvalidArgument {
                    arg: "rows",
                    reason: "ragged row lengths".to_string(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(nrows, ncols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
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

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Vertical concatenation in the given order.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts
            .first()
            .map(|m| m.cols)
            .ok_or_else(|| SimError::InvalidArgument {
                arg: "parts",
                reason: "empty stack".to_string(),
            })?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(SimError::DimensionMismatch {
                    left_rows: rows,
                    left_cols: cols,
                    right_rows: p.rows,
                    right_cols: p.cols,
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Matrix::new(rows, cols, data)
    }

    /// Rows `[start, start + count)` as a new matrix.
    pub fn slice_rows(&self, start: usize, count: usize) -> Matrix {
        assert!(start + count <= self.rows);
        Matrix {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn byte_len(&self) -> usize {
        self.rows * self.cols * std::mem::size_of::<f64>()
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(SimError::DimensionMismatch {
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        Ok(())
    }
}

/// Standard matrix product with left-to-right accumulation per output entry.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(SimError::DimensionMismatch {
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.data[i * a.cols + k] * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

/// Row-wise log-softmax via the shifted logsumexp, stable for entries up to ~1e3.
pub fn log_softmax_rows(m: &Matrix) -> Result<Matrix> {
    if !m.is_finite() {
        return Err(SimError::NonFinite {
            context: "log_softmax_rows input".to_string(),
        });
    }
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let row = m.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        for c in 0..m.cols {
            out.data[r * m.cols + c] = m.data[r * m.cols + c] - lse;
        }
    }
    Ok(out)
}

/// Row-wise softmax, derived from the stable log-softmax.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    let ls = log_softmax_rows(m)?;
    Ok(Matrix {
        rows: ls.rows,
        cols: ls.cols,
        data: ls.data.iter().map(|v| v.exp()).collect(),
    })
}

/// Scale each row to unit Euclidean norm. Zero rows are an error.
pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..m.rows {
        let norm = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(SimError::ZeroRow { row: r });
        }
        for c in 0..m.cols {
            out.data[r * m.cols + c] /= norm;
        }
    }
    Ok(out)
}

/// Seeded random stream. Identical seed and call sequence give an identical
/// stream; the underlying generator is ChaCha8 whose output is stable.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent stream for a named sub-task.
    pub fn split(&self, stream: u64) -> Self {
        let mut inner = self.inner.clone();
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn gaussian(&mut self, rows: usize, cols: usize, std: f64) -> Result<Matrix> {
        if std <= 0.0 {
            return Err(SimError::InvalidArgument {
                arg: "std",
                reason: format!("must be > 0, got {std}"),
            });
        }
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.inner);
                z * std
            })
            .collect();
        Matrix::new(rows, cols, data)
    }

    pub fn uniform(&mut self) -> f64 {
        use rand::Rng as _;
        self.inner.gen::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        use rand::Rng as _;
        self.inner.gen_range(0..n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Matrix {
        Matrix::new(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let m = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let i = Matrix::identity(2);
        assert_eq!(matmul(&i, &m).unwrap(), m);
        assert_eq!(matmul(&m, &i).unwrap(), m);
    }

    #[test]
    fn matmul_hand_case() {
        let a = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = mat(2, 1, &[1.0, 1.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Rng::from_seed(7);
        let a = rng.gaussian(5, 3, 1.0).unwrap();
        let b = rng.gaussian(3, 4, 1.0).unwrap();
        let c = matmul(&a, &b).unwrap();
        // naive triple loop, same accumulation order
        for i in 0..5 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert_eq!(c.get(i, j), acc);
            }
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = mat(2, 3, &[0.0; 6]);
        let b = mat(2, 2, &[0.0; 4]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("2x2"), "{msg}");
    }

    #[test]
    fn log_softmax_symmetric_row() {
        let m = mat(1, 2, &[0.0, 0.0]);
        let out = log_softmax_rows(&m).unwrap();
        let expect = -(2.0_f64).ln();
        assert!((out.get(0, 0) - expect).abs() < 1e-15);
        assert!((out.get(0, 1) - expect).abs() < 1e-15);
    }

    #[test]
    fn log_softmax_large_entries_stable() {
        let m = mat(1, 2, &[1000.0, 0.0]);
        let out = log_softmax_rows(&m).unwrap();
        assert!(out.is_finite());
        assert!(out.get(0, 0).abs() < 1e-12);
        assert!((out.get(0, 1) + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn log_softmax_matches_careful_oracle() {
        let mut rng = Rng::from_seed(11);
        let m = rng.gaussian(4, 4, 3.0).unwrap();
        let out = log_softmax_rows(&m).unwrap();
        for r in 0..4 {
            // oracle: two-pass compensated (Kahan) logsumexp
            let row = m.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (mut sum, mut comp) = (0.0_f64, 0.0_f64);
            for &v in row {
                let term = (v - max).exp();
                let y = term - comp;
                let t = sum + y;
                comp = (t - sum) - y;
                sum = t;
            }
            let lse = max + sum.ln();
            for c in 0..4 {
                assert!((out.get(r, c) - (m.get(r, c) - lse)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_softmax_rejects_non_finite() {
        let m = mat(1, 2, &[f64::NAN, 0.0]);
        assert!(log_softmax_rows(&m).is_err());
    }

    #[test]
    fn exp_log_softmax_rows_sum_to_one() {
        let mut rng = Rng::from_seed(3);
        let m = rng.gaussian(6, 9, 300.0).unwrap();
        let out = log_softmax_rows(&m).unwrap();
        for r in 0..6 {
            let s: f64 = out.row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
        }
    }

    #[test]
    fn l2_normalize_345() {
        let m = mat(1, 2, &[3.0, 4.0]);
        let out = l2_normalize_rows(&m).unwrap();
        assert!((out.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((out.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_idempotent() {
        let mut rng = Rng::from_seed(5);
        let m = rng.gaussian(4, 7, 2.0).unwrap();
        let once = l2_normalize_rows(&m).unwrap();
        let twice = l2_normalize_rows(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_zero_row_error() {
        let m = mat(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        match l2_normalize_rows(&m) {
            Err(SimError::ZeroRow { row }) => assert_eq!(row, 1),
            other => panic!("expected ZeroRow, got {other:?}"),
        }
    }

    #[test]
    fn gaussian_deterministic_per_seed() {
        let a = Rng::from_seed(99).gaussian(3, 3, 1.0).unwrap();
        let b = Rng::from_seed(99).gaussian(3, 3, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_rejects_zero_std() {
        assert!(Rng::from_seed(0).gaussian(1, 1, 0.0).is_err());
    }

    #[test]
    fn gaussian_large_sample_statistics() {
        let m = Rng::from_seed(1234).gaussian(1000, 1000, 1.0).unwrap();
        let n = m.data().len() as f64;
        let mean: f64 = m.data().iter().sum::<f64>() / n;
        let var: f64 = m
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((0.99..=1.01).contains(&std), "std {std}");
    }
}
