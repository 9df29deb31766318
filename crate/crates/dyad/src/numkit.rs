//! Dense linear-algebra substrate and seeded randomness.
//!
//! Everything in the crate stores matrices row-major in a flat `Vec<f64>`;
//! dimensions stay small (a few hundred at most), so there is no blocked or
//! sparse storage. Explicit matrix inversion is not provided anywhere —
//! symmetric positive-definite systems are solved through [`cholesky`] plus
//! the triangular solves below.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Relative jitter used by [`default_jitter`].
pub const DEFAULT_EPS_REL: f64 = 1e-6;
/// Absolute floor used by [`default_jitter`].
pub const DEFAULT_EPS_ABS: f64 = 1e-8;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from a flat row-major buffer.
    ///
    /// Panics if `data.len() != rows * cols`.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Stacks row vectors into a matrix. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows: no rows");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "from_rows: ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Column vector from a slice.
    pub fn col_vec(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        dgemm_rowmajor(
            self.rows, self.cols, other.cols,
            &self.data, self.cols as isize, 1,
            &other.data, other.cols as isize, 1,
            &mut out.data, other.cols as isize,
        );
        out
    }

    /// `self * other^T`.
    pub fn matmul_transb(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_transb inner dimension");
        let mut out = Matrix::zeros(self.rows, other.rows);
        dgemm_rowmajor(
            self.rows, self.cols, other.rows,
            &self.data, self.cols as isize, 1,
            &other.data, 1, other.cols as isize,
            &mut out.data, other.rows as isize,
        );
        out
    }

    /// `self^T * other`.
    pub fn matmul_transa(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_transa inner dimension");
        let mut out = Matrix::zeros(self.cols, other.cols);
        dgemm_rowmajor(
            self.cols, self.rows, other.cols,
            &self.data, 1, self.cols as isize,
            &other.data, other.cols as isize, 1,
            &mut out.data, other.cols as isize,
        );
        out
    }

    /// Matrix-vector product.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dimension");
        (0..self.rows)
            .map(|i| dot(self.row(i), v))
            .collect()
    }

    /// Adds `other` scaled by `alpha` in place.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    /// Extracts the square sub-matrix indexed by `idx` on both axes.
    pub fn sub_square(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(idx.len(), idx.len(), |i, j| self[(idx[i], idx[j])])
    }

    /// Extracts the rectangular sub-matrix with rows `ri` and columns `ci`.
    pub fn sub_block(&self, ri: &[usize], ci: &[usize]) -> Matrix {
        Matrix::from_fn(ri.len(), ci.len(), |i, j| self[(ri[i], ci[j])])
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[allow(clippy::too_many_arguments)]
fn dgemm_rowmajor(
    m: usize, k: usize, n: usize,
    a: &[f64], rsa: isize, csa: isize,
    b: &[f64], rsb: isize, csb: isize,
    c: &mut [f64], rsc: isize,
) {
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            0.0,
            c.as_mut_ptr(), rsc, 1,
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// Returns the lower-triangular `L` with `L * L^T = m`; only the lower
/// triangle of `m` is read. Fails with [`Error::NotPositiveDefinite`] on the
/// first non-positive pivot, which signals the caller to regularize.
///
/// [`Error::NotPositiveDefinite`]: crate::Error::NotPositiveDefinite
pub fn cholesky(m: &Matrix) -> crate::Result<Matrix> {
    assert_eq!(m.rows, m.cols, "cholesky: square matrix required");
    let n = m.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(crate::Error::NotPositiveDefinite { index: i, pivot: s });
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// `m + eps * I`.
pub fn regularize_spd(m: &Matrix, eps: f64) -> Matrix {
    assert_eq!(m.rows, m.cols, "regularize_spd: square matrix required");
    let mut out = m.clone();
    for i in 0..m.rows {
        out[(i, i)] += eps;
    }
    out
}

/// Scale-aware jitter: `DEFAULT_EPS_REL` times the mean diagonal magnitude,
/// floored at `DEFAULT_EPS_ABS`.
pub fn default_jitter(m: &Matrix) -> f64 {
    let n = m.rows.min(m.cols);
    if n == 0 {
        return DEFAULT_EPS_ABS;
    }
    let mean_diag = (0..n).map(|i| m[(i, i)].abs()).sum::<f64>() / n as f64;
    (DEFAULT_EPS_REL * mean_diag).max(DEFAULT_EPS_ABS)
}

/// Cholesky with a single scale-aware regularization retry.
pub fn cholesky_regularized(m: &Matrix) -> crate::Result<Matrix> {
    match cholesky(m) {
        Ok(l) => Ok(l),
        Err(_) => cholesky(&regularize_spd(m, default_jitter(m))),
    }
}

/// Solves `l * x = b` by forward substitution for lower-triangular `l`.
///
/// `b` may carry multiple right-hand sides as columns.
pub fn solve_triangular(l: &Matrix, b: &Matrix) -> crate::Result<Matrix> {
    assert_eq!(l.rows, l.cols, "solve_triangular: square matrix required");
    assert_eq!(l.rows, b.rows, "solve_triangular: dimension mismatch");
    let n = l.rows;
    let mut x = b.clone();
    for i in 0..n {
        let d = l[(i, i)];
        if d == 0.0 {
            return Err(crate::Error::SingularMatrix(i));
        }
        for c in 0..b.cols {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / d;
        }
    }
    Ok(x)
}

/// Solves `l^T * x = b` by back substitution for lower-triangular `l`.
pub fn solve_triangular_transpose(l: &Matrix, b: &Matrix) -> crate::Result<Matrix> {
    assert_eq!(l.rows, l.cols, "solve_triangular_transpose: square matrix required");
    assert_eq!(l.rows, b.rows, "solve_triangular_transpose: dimension mismatch");
    let n = l.rows;
    let mut x = b.clone();
    for i in (0..n).rev() {
        let d = l[(i, i)];
        if d == 0.0 {
            return Err(crate::Error::SingularMatrix(i));
        }
        for c in 0..b.cols {
            let mut s = x[(i, c)];
            for k in i + 1..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / d;
        }
    }
    Ok(x)
}

/// Convenience: solves the lower-triangular system for a single vector.
pub fn solve_lower_vec(l: &Matrix, b: &[f64]) -> crate::Result<Vec<f64>> {
    Ok(solve_triangular(l, &Matrix::col_vec(b))?.data)
}

/// Convenience: solves the transposed system for a single vector.
pub fn solve_lower_transpose_vec(l: &Matrix, b: &[f64]) -> crate::Result<Vec<f64>> {
    Ok(solve_triangular_transpose(l, &Matrix::col_vec(b))?.data)
}

/// Seeded random source. Identical seed and call sequence produce an
/// identical stream; `derive` spawns an independent stream for a sub-task so
/// reordering unrelated work cannot perturb the draws.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream identified by `tag`.
    pub fn derive(&self, tag: u64) -> RngState {
        RngState::new(splitmix64(self.seed ^ splitmix64(tag)))
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for x in out {
            *x = self.normal();
        }
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.gen_range(lo..hi)
    }

    /// Uniform integer in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}
