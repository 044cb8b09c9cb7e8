//! Dense symmetric positive-definite algebra and Gaussian sampling.
//!
//! Every covariance in the crate lives in one of two wrappers:
//! [`SpdMatrix`] for a validated symmetric positive-definite matrix with its
//! Cholesky factor, and [`GaussianDist`] for a mean plus such a covariance.
//! Both symmetrize their input as `(M + Mᵀ)/2` before factorizing and refuse
//! to construct when the factorization fails.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// `(M + Mᵀ)/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    let n = out.nrows().min(out.ncols());
    for j in 0..n {
        for i in j + 1..n {
            let v = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Lower-triangular `L` with `L·Lᵀ = m`.
///
/// The input is symmetrized first. Fails with `NotPositiveDefinite` when the
/// matrix is not square, holds non-finite entries, or is not strictly
/// positive definite.
pub fn cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(factorize(m, "cholesky")?.l())
}

fn factorize(m: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "{context}: expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::not_pd(format!("{context}: non-finite entry")));
    }
    Cholesky::new(symmetrize(m)).ok_or_else(|| Error::not_pd(context.to_string()))
}

/// Adds `rel · trace(m)/dim` to the diagonal. A zero `rel` leaves `m` untouched.
pub fn add_relative_jitter(m: &mut DMatrix<f64>, rel: f64) {
    if rel > 0.0 && m.nrows() > 0 {
        let eps = rel * m.trace() / m.nrows() as f64;
        for i in 0..m.nrows() {
            m[(i, i)] += eps;
        }
    }
}

/// Overwrites `m` with its lower Cholesky factor, zeroing the strict upper
/// triangle. Only the lower triangle is read. Returns false if `m` is not
/// numerically positive definite, leaving it partly overwritten.
pub(crate) fn cholesky_in_place(m: &mut DMatrix<f64>) -> bool {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    let a = m.as_mut_slice();
    for j in 0..n {
        let (done, rest) = a.split_at_mut(j * n);
        let col = &mut rest[..n];
        for k in 0..j {
            let lk = &done[k * n..(k + 1) * n];
            let f = lk[j];
            for (c, &l) in col[j..].iter_mut().zip(&lk[j..]) {
                *c -= f * l;
            }
        }
        let d = col[j];
        if !(d > 0.0 && d.is_finite()) {
            return false;
        }
        let d = d.sqrt();
        col[j] = d;
        for v in &mut col[j + 1..] {
            *v /= d;
        }
        col[..j].fill(0.0);
    }
    true
}

/// Symmetric positive-definite matrix with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    data: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl SpdMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let chol = factorize(&m, "SpdMatrix")?;
        Ok(Self {
            data: symmetrize(&m),
            chol,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0).expect("identity is positive definite")
    }

    pub fn scaled_identity(dim: usize, scale: f64) -> Result<Self> {
        Self::new(DMatrix::identity(dim, dim) * scale)
    }

    pub fn from_diagonal(diag: &DVector<f64>) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(diag))
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    /// Lower-triangular Cholesky factor.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        symmetrize(&self.chol.inverse())
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }
}

/// Multivariate normal `N(mean, cov)`.
#[derive(Debug, Clone)]
pub struct GaussianDist {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::with_jitter(mean, cov, 0.0)
    }

    /// Like [`GaussianDist::new`] but first adds `rel · trace/dim` to the
    /// diagonal of the covariance.
    pub fn with_jitter(mean: DVector<f64>, cov: DMatrix<f64>, rel: f64) -> Result<Self> {
        if cov.nrows() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        let mut cov = symmetrize(&cov);
        add_relative_jitter(&mut cov, rel);
        let chol = cholesky(&cov)?;
        Ok(Self { mean, cov, chol })
    }

    pub fn from_spd(mean: DVector<f64>, cov: &SpdMatrix) -> Result<Self> {
        if cov.dim() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "mean has length {} but covariance has dimension {}",
                mean.len(),
                cov.dim()
            )));
        }
        Ok(Self {
            mean,
            cov: cov.matrix().clone(),
            chol: cov.cholesky_factor(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// Draw `mean + L·z` with `z` a vector of independent standard normals.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        sample_gaussian(self, rng)
    }
}

/// Draws one sample from `dist`; a pure function of the distribution and the
/// state of `rng`.
pub fn sample_gaussian<R: Rng + ?Sized>(dist: &GaussianDist, rng: &mut R) -> DVector<f64> {
    let z = standard_normals(rng, dist.dim());
    &dist.mean + &dist.chol * z
}

pub fn standard_normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Block-diagonal assembly of square blocks.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut offset = 0;
    for b in blocks {
        debug_assert!(b.is_square(), "block_diag expects square blocks");
        let k = b.nrows();
        out.view_mut((offset, offset), (k, k)).copy_from(b);
        offset += k;
    }
    out
}

/// Eigenvalues of a symmetric matrix, sorted in decreasing order.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let eig = SymmetricEigen::try_new(symmetrize(m), 1e-14, 0)
        .expect("symmetric eigensolver failed to converge");
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    values
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m).first().copied().unwrap_or(0.0)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m).last().copied().unwrap_or(0.0)
}

/// Relative Frobenius distance `‖a − b‖_F / max(‖b‖_F, tiny)`.
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm().max(f64::MIN_POSITIVE);
    (a - b).norm() / denom
}
