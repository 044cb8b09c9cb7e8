//! Hierarchical generative environments and their forward samplers.
//!
//! `Ψ* ~ N(μ_Ψ, Σ_Ψ)`, then `θ*_i | Ψ* ~ N(C_i Ψ*, Σ_{0,i})` for every action,
//! and rewards `Y | x, θ ~ N(xᵀθ, σ²)`. `C_i` is the `d × Ld` mixing row of
//! action `i`: `b_iᵀ ⊗ I_d` for scalar weights, or `[C_{i,1}, …, C_{i,L}]`.
//!
//! Action indices are zero-based inside the library.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{kron, standard_normals, GaussianDist, SpdMatrix};

/// How actions attach to the latent parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum MixingStructure {
    /// `K × L` matrix; row `i` holds `b_i`. Zeros encode sparsity.
    Weights(DMatrix<f64>),
    /// `K` rows of `L` matrices, each `d × d`.
    Matrices(Vec<Vec<DMatrix<f64>>>),
}

impl MixingStructure {
    pub fn action_count(&self) -> usize {
        match self {
            MixingStructure::Weights(b) => b.nrows(),
            MixingStructure::Matrices(c) => c.len(),
        }
    }

    pub fn latent_count(&self) -> usize {
        match self {
            MixingStructure::Weights(b) => b.ncols(),
            MixingStructure::Matrices(c) => c.first().map_or(0, Vec::len),
        }
    }

    pub fn weights(&self) -> Option<&DMatrix<f64>> {
        match self {
            MixingStructure::Weights(b) => Some(b),
            MixingStructure::Matrices(_) => None,
        }
    }

    /// The `C_{i,ℓ} = b_{i,ℓ} I_d` expansion of a weight matrix.
    pub fn weights_as_matrices(b: &DMatrix<f64>, dim: usize) -> Self {
        let eye = DMatrix::<f64>::identity(dim, dim);
        MixingStructure::Matrices(
            (0..b.nrows())
                .map(|i| (0..b.ncols()).map(|l| &eye * b[(i, l)]).collect())
                .collect(),
        )
    }

    /// `d × Ld` map sending the stacked latent vector to action `i`'s prior mean.
    pub fn row(&self, i: usize, dim: usize) -> DMatrix<f64> {
        match self {
            MixingStructure::Weights(b) => {
                kron(&DMatrix::from_row_slice(1, b.ncols(), b.row(i).transpose().as_slice()), &DMatrix::identity(dim, dim))
            }
            MixingStructure::Matrices(c) => {
                let blocks = &c[i];
                let mut out = DMatrix::zeros(dim, dim * blocks.len());
                for (l, block) in blocks.iter().enumerate() {
                    out.view_mut((0, l * dim), (dim, dim)).copy_from(block);
                }
                out
            }
        }
    }
}

/// Full generative specification of a contextual bandit with `L` shared
/// latent parameters.
#[derive(Debug, Clone)]
pub struct HierModelSpec {
    latents: usize,
    actions: usize,
    dim: usize,
    mu_psi: DVector<f64>,
    sigma_psi: SpdMatrix,
    sigma0: Vec<SpdMatrix>,
    mixing: MixingStructure,
    sigma: f64,
}

impl HierModelSpec {
    pub fn new(
        mu_psi: DVector<f64>,
        sigma_psi: SpdMatrix,
        sigma0: Vec<SpdMatrix>,
        mixing: MixingStructure,
        sigma: f64,
    ) -> Result<Self> {
        let actions = sigma0.len();
        if actions == 0 {
            return Err(Error::InvalidModel("at least one action is required".into()));
        }
        let dim = sigma0[0].dim();
        if dim == 0 {
            return Err(Error::InvalidModel("feature dimension must be positive".into()));
        }
        if let Some(i) = sigma0.iter().position(|s| s.dim() != dim) {
            return Err(Error::DimensionMismatch(format!(
                "Σ0 of action {i} has dimension {} but action 0 has {dim}",
                sigma0[i].dim()
            )));
        }
        if mu_psi.is_empty() || mu_psi.len() % dim != 0 {
            return Err(Error::DimensionMismatch(format!(
                "hyper-prior mean length {} is not a positive multiple of d = {dim}",
                mu_psi.len()
            )));
        }
        let latents = mu_psi.len() / dim;
        if sigma_psi.dim() != latents * dim {
            return Err(Error::DimensionMismatch(format!(
                "Σ_Ψ is {0}x{0}, expected {1}x{1}",
                sigma_psi.dim(),
                latents * dim
            )));
        }
        if mixing.action_count() != actions || mixing.latent_count() != latents {
            return Err(Error::DimensionMismatch(format!(
                "mixing structure is {}x{}, expected {actions}x{latents}",
                mixing.action_count(),
                mixing.latent_count()
            )));
        }
        if let MixingStructure::Matrices(rows) = &mixing {
            for (i, row) in rows.iter().enumerate() {
                if row.len() != latents {
                    return Err(Error::DimensionMismatch(format!(
                        "mixing row {i} has {} matrices, expected {latents}",
                        row.len()
                    )));
                }
                if row.iter().any(|c| c.nrows() != dim || c.ncols() != dim) {
                    return Err(Error::DimensionMismatch(format!(
                        "mixing row {i} holds a matrix that is not {dim}x{dim}"
                    )));
                }
            }
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidModel(format!("reward noise must be positive, got {sigma}")));
        }
        Ok(Self {
            latents,
            actions,
            dim,
            mu_psi,
            sigma_psi,
            sigma0,
            mixing,
            sigma,
        })
    }

    /// Isotropic spec: `μ_Ψ = mean·1`, `Σ_Ψ = psi_var·I`, `Σ_{0,i} = action_var·I`.
    pub fn isotropic(
        weights: DMatrix<f64>,
        dim: usize,
        mean: f64,
        psi_var: f64,
        action_var: f64,
        sigma: f64,
    ) -> Result<Self> {
        let latents = weights.ncols();
        let sigma0 = SpdMatrix::scaled_identity(dim, action_var)?;
        Self::new(
            DVector::from_element(latents * dim, mean),
            SpdMatrix::scaled_identity(latents * dim, psi_var)?,
            vec![sigma0; weights.nrows()],
            MixingStructure::Weights(weights),
            sigma,
        )
    }

    pub fn latent_count(&self) -> usize {
        self.latents
    }

    pub fn action_count(&self) -> usize {
        self.actions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mu_psi(&self) -> &DVector<f64> {
        &self.mu_psi
    }

    pub fn sigma_psi(&self) -> &SpdMatrix {
        &self.sigma_psi
    }

    pub fn sigma0(&self, i: usize) -> &SpdMatrix {
        &self.sigma0[i]
    }

    pub fn sigma0_all(&self) -> &[SpdMatrix] {
        &self.sigma0
    }

    pub fn mixing(&self) -> &MixingStructure {
        &self.mixing
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Same spec with a different mixing structure of matching shape.
    pub fn with_mixing(&self, mixing: MixingStructure) -> Result<Self> {
        Self::new(
            self.mu_psi.clone(),
            self.sigma_psi.clone(),
            self.sigma0.clone(),
            mixing,
            self.sigma,
        )
    }

    /// `d × Ld` mixing row of action `i`.
    pub fn mixing_row(&self, i: usize) -> DMatrix<f64> {
        self.mixing.row(i, self.dim)
    }

    /// All mixing rows stacked into the `Kd × Ld` matrix `Γ`.
    pub fn stacked_mixing(&self) -> DMatrix<f64> {
        let (d, ld) = (self.dim, self.latents * self.dim);
        let mut gamma = DMatrix::zeros(self.actions * d, ld);
        for i in 0..self.actions {
            gamma.view_mut((i * d, 0), (d, ld)).copy_from(&self.mixing_row(i));
        }
        gamma
    }

    /// Marginal prior of `θ*_i` with the latents integrated out:
    /// `N(C_i μ_Ψ, Σ_{0,i} + C_i Σ_Ψ C_iᵀ)`.
    pub fn marginal_prior(&self, i: usize) -> Result<GaussianDist> {
        let row = self.mixing_row(i);
        let cov = self.sigma0[i].matrix() + &row * self.sigma_psi.matrix() * row.transpose();
        GaussianDist::new(&row * &self.mu_psi, cov)
    }

    /// Mean and covariance blocks of latent `l` in the hyper-prior.
    pub fn latent_prior_block(&self, l: usize) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim;
        (
            self.mu_psi.rows(l * d, d).into_owned(),
            self.sigma_psi.matrix().view((l * d, l * d), (d, d)).into_owned(),
        )
    }
}

/// Distribution of the context stream.
#[derive(Debug, Clone, PartialEq)]
pub enum ContextSpec {
    /// Independent uniform coordinates on `[low, high]^d`.
    UniformCube { dim: usize, low: f64, high: f64 },
    /// Uniform draw, with replacement, from a fixed set of vectors.
    FixedPool(Vec<DVector<f64>>),
    /// The constant context `x = (1)`; reduces the model to a multi-armed bandit.
    Constant,
}

impl ContextSpec {
    pub fn dim(&self) -> Option<usize> {
        match self {
            ContextSpec::UniformCube { dim, .. } => Some(*dim),
            ContextSpec::FixedPool(pool) => pool.first().map(|v| v.len()),
            ContextSpec::Constant => Some(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ContextSpec::UniformCube { dim, low, high } => {
                if *dim == 0 {
                    return Err(Error::InvalidArgument("context dimension must be positive".into()));
                }
                if !(low.is_finite() && high.is_finite() && low < high) {
                    return Err(Error::InvalidArgument(format!(
                        "context cube bounds must be finite with low < high, got [{low}, {high}]"
                    )));
                }
            }
            ContextSpec::FixedPool(pool) => {
                let first = pool.first().ok_or(Error::EmptyPool)?;
                if pool.iter().any(|v| v.len() != first.len()) {
                    return Err(Error::DimensionMismatch(
                        "context pool vectors differ in length".into(),
                    ));
                }
            }
            ContextSpec::Constant => {}
        }
        Ok(())
    }
}

/// One draw of the unknown parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvDraw {
    pub psi: DVector<f64>,
    pub theta: Vec<DVector<f64>>,
}

impl EnvDraw {
    /// Mean reward `xᵀθ_i`.
    pub fn mean_reward(&self, x: &DVector<f64>, i: usize) -> f64 {
        x.dot(&self.theta[i])
    }
}

/// Samples `Ψ*` from the hyper-prior, then every `θ*_i` given `Ψ*`.
pub fn sample_environment<R: Rng + ?Sized>(spec: &HierModelSpec, rng: &mut R) -> Result<EnvDraw> {
    let hyper = GaussianDist::from_spd(spec.mu_psi().clone(), spec.sigma_psi())?;
    let psi = hyper.sample(rng);
    let theta = (0..spec.action_count())
        .map(|i| {
            let mean = spec.mixing_row(i) * &psi;
            mean + spec.sigma0(i).cholesky_factor() * standard_normals(rng, spec.dim())
        })
        .collect();
    Ok(EnvDraw { psi, theta })
}

/// One context draw.
pub fn sample_context<R: Rng + ?Sized>(ctx: &ContextSpec, rng: &mut R) -> Result<DVector<f64>> {
    match ctx {
        ContextSpec::UniformCube { dim, low, high } => {
            Ok(DVector::from_fn(*dim, |_, _| rng.random_range(*low..=*high)))
        }
        ContextSpec::FixedPool(pool) => {
            if pool.is_empty() {
                return Err(Error::EmptyPool);
            }
            Ok(pool[rng.random_range(0..pool.len())].clone())
        }
        ContextSpec::Constant => Ok(DVector::from_element(1, 1.0)),
    }
}

/// Draw from `N(xᵀθ, σ²)`.
pub fn sample_reward<R: Rng + ?Sized>(
    theta: &DVector<f64>,
    x: &DVector<f64>,
    sigma: f64,
    rng: &mut R,
) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    x.dot(theta) + sigma * z
}

/// `argmax_i xᵀθ_i` with ties going to the lowest index.
pub fn best_action(theta: &[DVector<f64>], x: &DVector<f64>) -> (usize, f64) {
    assert!(!theta.is_empty(), "best_action needs at least one action");
    let mut best = (0, x.dot(&theta[0]));
    for (i, t) in theta.iter().enumerate().skip(1) {
        let v = x.dot(t);
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}
