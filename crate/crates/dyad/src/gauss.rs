//! Multivariate Gaussians parameterized by mean and Cholesky factor.
//!
//! The covariance never appears inverted anywhere: log-densities, block
//! conditioning and KL divergences all go through triangular solves against
//! the factor, which is both cheaper and better behaved than forming an
//! explicit inverse.

use crate::numkit::{
    self, cholesky, cholesky_regularized, dot, solve_lower_transpose_vec, solve_lower_vec,
    solve_triangular, Matrix,
};
use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453; // ln(2*pi)

/// Gaussian over `R^d` stored as mean plus lower-triangular factor `L` with
/// `L * L^T` the covariance. The diagonal of `L` is strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateGaussian {
    mean: Vec<f64>,
    chol: Matrix,
}

/// Disjoint index sets carving a joint Gaussian into an observed block
/// (agent 1) and a predicted block (agent 2). The sets need not be
/// contiguous, which keeps asymmetric agent dimensions unceremonious.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSplit {
    first: Vec<usize>,
    second: Vec<usize>,
}

impl BlockSplit {
    /// Validates that `first` and `second` are disjoint and cover `0..d`.
    pub fn new(first: Vec<usize>, second: Vec<usize>) -> Result<Self> {
        let d = first.len() + second.len();
        let mut seen = vec![false; d];
        for &i in first.iter().chain(second.iter()) {
            if i >= d || seen[i] {
                return Err(Error::ShapeMismatch(format!(
                    "block split indices must partition 0..{d}"
                )));
            }
            seen[i] = true;
        }
        Ok(Self { first, second })
    }

    /// Contiguous split: first block `0..d1`, second block `d1..d1+d2`.
    pub fn contiguous(d1: usize, d2: usize) -> Self {
        Self {
            first: (0..d1).collect(),
            second: (d1..d1 + d2).collect(),
        }
    }

    pub fn first(&self) -> &[usize] {
        &self.first
    }

    pub fn second(&self) -> &[usize] {
        &self.second
    }

    pub fn dim(&self) -> usize {
        self.first.len() + self.second.len()
    }
}

impl MultivariateGaussian {
    /// From mean and an existing lower-triangular factor with positive
    /// diagonal. Panics on malformed factors; use [`from_mean_cov`] when the
    /// input is an arbitrary covariance.
    ///
    /// [`from_mean_cov`]: MultivariateGaussian::from_mean_cov
    pub fn from_mean_chol(mean: Vec<f64>, chol: Matrix) -> Self {
        assert_eq!(mean.len(), chol.rows(), "mean/factor dimension");
        assert_eq!(chol.rows(), chol.cols(), "factor must be square");
        for i in 0..chol.rows() {
            assert!(chol[(i, i)] > 0.0, "factor diagonal must be positive");
            for j in i + 1..chol.cols() {
                assert_eq!(chol[(i, j)], 0.0, "factor must be lower-triangular");
            }
        }
        Self { mean, chol }
    }

    /// Factorizes `cov`; fails if it is not positive definite.
    pub fn from_mean_cov(mean: Vec<f64>, cov: &Matrix) -> Result<Self> {
        if mean.len() != cov.rows() {
            return Err(Error::DimensionMismatch {
                expected: cov.rows(),
                got: mean.len(),
                context: "gaussian mean vs covariance",
            });
        }
        Ok(Self {
            mean,
            chol: cholesky(cov)?,
        })
    }

    /// Factorizes `cov`, retrying once with scale-aware jitter.
    pub fn from_mean_cov_regularized(mean: Vec<f64>, cov: &Matrix) -> Result<Self> {
        if mean.len() != cov.rows() {
            return Err(Error::DimensionMismatch {
                expected: cov.rows(),
                got: mean.len(),
                context: "gaussian mean vs covariance",
            });
        }
        Ok(Self {
            mean,
            chol: cholesky_regularized(cov)?,
        })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            chol: Matrix::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn chol(&self) -> &Matrix {
        &self.chol
    }

    /// Dense covariance `L * L^T`.
    pub fn covariance(&self) -> Matrix {
        self.chol.matmul_transb(&self.chol)
    }

    /// `ln det` of the covariance, `2 * sum(ln L_ii)`.
    pub fn logdet_cov(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.chol[(i, i)].ln()).sum::<f64>()
    }

    /// Log-density at `x`.
    pub fn logpdf(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
                context: "logpdf input",
            });
        }
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let y = solve_lower_vec(&self.chol, &diff)?;
        let quad = dot(&y, &y);
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + quad) - 0.5 * self.logdet_cov())
    }

    /// Marginal over the selected dimensions, in the order given.
    pub fn marginal(&self, dims: &[usize]) -> Result<MultivariateGaussian> {
        for &i in dims {
            if i >= self.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.dim(),
                    got: i,
                    context: "marginal index",
                });
            }
        }
        let cov = self.covariance().sub_square(dims);
        let mean = dims.iter().map(|&i| self.mean[i]).collect();
        // sub-block of an SPD matrix is SPD; jitter only mops up roundoff
        MultivariateGaussian::from_mean_cov_regularized(mean, &cov)
    }

    /// Conditional distribution of the `second` block given the `first`
    /// block observed at `observed`.
    ///
    /// Mean `mu2 + S21 S11^-1 (observed - mu1)` and covariance
    /// `S22 - S21 S11^-1 S12`, with the inverse realized as two triangular
    /// solves against the Cholesky factor of `S11`.
    pub fn condition(&self, split: &BlockSplit, observed: &[f64]) -> Result<MultivariateGaussian> {
        if split.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: split.dim(),
                context: "condition split",
            });
        }
        if observed.len() != split.first.len() {
            return Err(Error::DimensionMismatch {
                expected: split.first.len(),
                got: observed.len(),
                context: "condition observation",
            });
        }
        let cov = self.covariance();
        let s11 = cov.sub_square(&split.first);
        let s12 = cov.sub_block(&split.first, &split.second);
        let s22 = cov.sub_square(&split.second);
        let l11 = cholesky(&s11).map_err(|_| Error::SingularBlock)?;

        // W = L11^-1 S12, so S21 S11^-1 S12 = W^T W
        let w = solve_triangular(&l11, &s12)?;
        let mut cond_cov = s22;
        let wtw = w.matmul_transa(&w);
        cond_cov.axpy(-1.0, &wtw);

        let diff: Vec<f64> = split
            .first
            .iter()
            .zip(observed)
            .map(|(&i, &z)| z - self.mean[i])
            .collect();
        let y = solve_lower_vec(&l11, &diff)?; // L11^-1 (z - mu1)
        let mut mean: Vec<f64> = split.second.iter().map(|&i| self.mean[i]).collect();
        // mu2 + W^T y
        for (j, m) in mean.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..w.rows() {
                acc += w[(i, j)] * y[i];
            }
            *m += acc;
        }
        MultivariateGaussian::from_mean_cov_regularized(mean, &cond_cov)
    }

    /// Draws `mean + L * eps` with `eps` standard normal.
    pub fn sample(&self, rng: &mut numkit::RngState) -> Vec<f64> {
        let mut eps = vec![0.0; self.dim()];
        rng.fill_normal(&mut eps);
        self.apply_noise(&eps)
    }

    /// `mean + L * eps` for a caller-supplied noise vector.
    pub fn apply_noise(&self, eps: &[f64]) -> Vec<f64> {
        let mut z = self.mean.clone();
        for i in 0..self.dim() {
            for j in 0..=i {
                z[i] += self.chol[(i, j)] * eps[j];
            }
        }
        z
    }
}

/// Closed-form `KL(q || p)` between two full-covariance Gaussians.
pub fn kl_divergence(q: &MultivariateGaussian, p: &MultivariateGaussian) -> Result<f64> {
    Ok(kl_terms(q, p)?.0)
}

/// `KL(q || p)` together with its gradients in `q`'s parameters: the mean
/// and the lower triangle of the factor. `p` is treated as a constant.
pub fn kl_divergence_with_grad(
    q: &MultivariateGaussian,
    p: &MultivariateGaussian,
) -> Result<(f64, Vec<f64>, Matrix)> {
    let (kl, m, y) = kl_terms(q, p)?;
    let d = q.dim();
    // d/dmu_q = Sigma_p^-1 (mu_q - mu_p) = L_p^-T y
    let grad_mean = solve_lower_transpose_vec(&p.chol, &y)?;
    // d/dL_q = Sigma_p^-1 L_q - diag(1 / L_q_ii), lower triangle only
    let mut grad_chol = solve_triangular_transpose_mat(&p.chol, &m)?;
    for i in 0..d {
        for j in i + 1..d {
            grad_chol[(i, j)] = 0.0;
        }
        grad_chol[(i, i)] -= 1.0 / q.chol[(i, i)];
    }
    Ok((kl, grad_mean, grad_chol))
}

fn solve_triangular_transpose_mat(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    numkit::solve_triangular_transpose(l, b)
}

/// Shared KL computation. Returns `(kl, M, y)` where `M = L_p^-1 L_q` and
/// `y = L_p^-1 (mu_q - mu_p)`.
fn kl_terms(
    q: &MultivariateGaussian,
    p: &MultivariateGaussian,
) -> Result<(f64, Matrix, Vec<f64>)> {
    if q.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
            context: "kl divergence",
        });
    }
    let d = q.dim() as f64;
    let m = solve_triangular(&p.chol, &q.chol)?;
    let trace: f64 = m.data().iter().map(|x| x * x).sum();
    let diff: Vec<f64> = q.mean.iter().zip(&p.mean).map(|(a, b)| a - b).collect();
    let y = solve_lower_vec(&p.chol, &diff)?;
    let quad = dot(&y, &y);
    let kl = 0.5 * (trace - d + quad + p.logdet_cov() - q.logdet_cov());
    Ok((kl, m, y))
}
