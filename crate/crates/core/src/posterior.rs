//! Bayesian updates for the hierarchical Gaussian model.
//!
//! The joint hyper-posterior over the stacked latents is
//!
//! ```text
//! Σ̄⁻¹ = Σ_Ψ⁻¹ + Σ_i C_iᵀ W_i C_i          μ̄ = Σ̄ (Σ_Ψ⁻¹ μ_Ψ + Σ_i C_iᵀ m_i)
//! ```
//!
//! with per-action precision weight `W_i = (Σ_{0,i} + G_i⁻¹)⁻¹` and MLE weight
//! `m_i = W_i G_i⁻¹ B_i`. Neither is ever formed through `G_i⁻¹`: with
//! `M_i = (I + G_i Σ_{0,i})⁻¹` we have `W_i = M_i G_i` and `m_i = M_i B_i`,
//! which equal the Woodbury forms `Λ₀ − Λ₀(G+Λ₀)⁻¹Λ₀` and `Λ₀(G+Λ₀)⁻¹B`
//! (`Λ₀ = Σ_{0,i}⁻¹`) and stay well defined while `G_i` is singular. The same
//! `M_i` gives the conditional posterior `Σ̃_i = Σ_{0,i} M_i` and
//! `μ̃_i = M_iᵀ C_i Ψ + Σ̃_i B_i`.

use nalgebra::{DMatrix, DVector, Dyn, Matrix, Storage, U1};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{block_diag, standard_normals, symmetrize, GaussianDist, SpdMatrix};
use crate::model::{HierModelSpec, MixingStructure};

/// Per-action noise-scaled Gram matrices, reward-weighted context sums, and
/// pull counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    dim: usize,
    gram: Vec<DMatrix<f64>>,
    moment: Vec<DVector<f64>>,
    pulls: Vec<usize>,
}

impl SufficientStats {
    pub fn new(actions: usize, dim: usize) -> Self {
        Self {
            dim,
            gram: vec![DMatrix::zeros(dim, dim); actions],
            moment: vec![DVector::zeros(dim); actions],
            pulls: vec![0; actions],
        }
    }

    pub fn for_spec(spec: &HierModelSpec) -> Self {
        Self::new(spec.action_count(), spec.dim())
    }

    /// Batch construction from a history.
    pub fn from_history(actions: usize, dim: usize, history: &[HistoryRecord], sigma: f64) -> Result<Self> {
        let mut stats = Self::new(actions, dim);
        for r in history {
            stats.update(&r.x, r.action, r.reward, sigma)?;
        }
        Ok(stats)
    }

    /// `G_a += xxᵀ/σ²`, `B_a += y·x/σ²`, `N_a += 1`.
    pub fn update(&mut self, x: &DVector<f64>, action: usize, reward: f64, sigma: f64) -> Result<()> {
        if action >= self.pulls.len() {
            return Err(Error::ActionOutOfRange {
                index: action,
                count: self.pulls.len(),
            });
        }
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "context has length {} but the model has d = {}",
                x.len(),
                self.dim
            )));
        }
        let scale = 1.0 / (sigma * sigma);
        self.gram[action].ger(scale, x, x, 1.0);
        self.moment[action].axpy(reward * scale, x, 1.0);
        self.pulls[action] += 1;
        Ok(())
    }

    pub fn action_count(&self) -> usize {
        self.pulls.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gram(&self, i: usize) -> &DMatrix<f64> {
        &self.gram[i]
    }

    pub fn moment(&self, i: usize) -> &DVector<f64> {
        &self.moment[i]
    }

    pub fn pulls(&self, i: usize) -> usize {
        self.pulls[i]
    }

    /// Number of observations absorbed so far.
    pub fn total_rounds(&self) -> usize {
        self.pulls.iter().sum()
    }

    fn check_against(&self, spec: &HierModelSpec) -> Result<()> {
        if self.action_count() != spec.action_count() || self.dim != spec.dim() {
            return Err(Error::DimensionMismatch(format!(
                "statistics are for K = {}, d = {} but the model has K = {}, d = {}",
                self.action_count(),
                self.dim,
                spec.action_count(),
                spec.dim()
            )));
        }
        Ok(())
    }
}

/// One interaction `(x, a, y)` observed in round `round`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub round: usize,
    pub x: DVector<f64>,
    pub action: usize,
    pub reward: f64,
}

/// `(I + G Σ₀)⁻¹`.
fn shrinkage(sigma0: &SpdMatrix, gram: &DMatrix<f64>) -> DMatrix<f64> {
    let d = gram.nrows();
    let a = DMatrix::identity(d, d) + gram * sigma0.matrix();
    // I + GΣ₀ is similar to I + Σ₀^{1/2} G Σ₀^{1/2}, so its eigenvalues are >= 1.
    a.lu().try_inverse().expect("I + GΣ₀ is invertible for PSD G and PD Σ₀")
}

/// `(Σ₀ + G⁻¹)⁻¹`, well defined for singular `G`.
pub fn precision_weight(sigma0: &SpdMatrix, gram: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&(shrinkage(sigma0, gram) * gram))
}

/// `(Σ₀ + G⁻¹)⁻¹ G⁻¹ B`, well defined for singular `G`.
pub fn mle_weight(sigma0: &SpdMatrix, gram: &DMatrix<f64>, moment: &DVector<f64>) -> DVector<f64> {
    shrinkage(sigma0, gram) * moment
}

/// Everything a posterior computation needs from one action's statistics.
#[derive(Debug, Clone)]
pub struct ActionTerms {
    /// `(I + Σ₀ G)⁻¹ = Σ̃ Σ₀⁻¹`, applied to the prior mean `C_i Ψ`.
    pub prior_gain: DMatrix<f64>,
    pub precision_weight: DMatrix<f64>,
    pub mle_weight: DVector<f64>,
    /// Conditional covariance `Σ̃ = (Σ₀⁻¹ + G)⁻¹`.
    pub cond_cov: DMatrix<f64>,
    pub cond_chol: DMatrix<f64>,
    /// Data part of the conditional mean, `Σ̃ B`.
    pub cond_data_mean: DVector<f64>,
}

impl ActionTerms {
    pub fn compute(sigma0: &SpdMatrix, gram: &DMatrix<f64>, moment: &DVector<f64>, jitter: f64) -> Result<Self> {
        let m = shrinkage(sigma0, gram);
        let precision_weight = symmetrize(&(&m * gram));
        let mle_weight = &m * moment;
        let cond_cov = symmetrize(&(sigma0.matrix() * &m));
        let cond = GaussianDist::with_jitter(DVector::zeros(gram.nrows()), cond_cov, jitter)?;
        let cond_data_mean = cond.cov() * moment;
        Ok(Self {
            prior_gain: m.transpose(),
            precision_weight,
            mle_weight,
            cond_cov: cond.cov().clone(),
            cond_chol: cond.cholesky_factor().clone(),
            cond_data_mean,
        })
    }

    pub fn for_action(spec: &HierModelSpec, stats: &SufficientStats, i: usize, jitter: f64) -> Result<Self> {
        Self::compute(spec.sigma0(i), stats.gram(i), stats.moment(i), jitter)
    }

    /// `μ̃ = (I + Σ₀G)⁻¹ prior_mean + Σ̃ B`.
    pub fn conditional_mean<S: Storage<f64, Dyn>>(&self, prior_mean: &Matrix<f64, Dyn, U1, S>) -> DVector<f64> {
        let mut mean = self.cond_data_mean.clone();
        mean.gemv(1.0, &self.prior_gain, prior_mean, 1.0);
        mean
    }

    pub fn sample_conditional<R: Rng + ?Sized, S: Storage<f64, Dyn>>(
        &self,
        prior_mean: &Matrix<f64, Dyn, U1, S>,
        rng: &mut R,
    ) -> DVector<f64> {
        let z = standard_normals(rng, prior_mean.len());
        let mut draw = self.conditional_mean(prior_mean);
        draw.gemv(1.0, &self.cond_chol, &z, 1.0);
        draw
    }
}

/// Adds action `i`'s contribution `C_iᵀ W C_i` to `precision` and `C_iᵀ m` to
/// `shift`. Weight mixing uses the Kronecker form
/// `b_i b_iᵀ ⊗ W`.
pub(crate) fn accumulate_action(
    mixing: &MixingStructure,
    i: usize,
    dim: usize,
    precision_weight: &DMatrix<f64>,
    mle_weight: &DVector<f64>,
    precision: &mut DMatrix<f64>,
    shift: &mut DVector<f64>,
) {
    match mixing {
        MixingStructure::Weights(b) => {
            let k = b.nrows();
            let bi = b.as_slice()[i..].iter().step_by(k);
            let n = precision.nrows();
            let w = precision_weight.as_slice();
            let m = mle_weight.as_slice();
            let p = precision.as_mut_slice();
            for (h, &bl) in shift.as_mut_slice().chunks_exact_mut(dim).zip(bi.clone()) {
                for (dst, &v) in h.iter_mut().zip(m) {
                    *dst += bl * v;
                }
            }
            // column (j, c) of b_i b_iᵀ ⊗ W is b_{i,j} (b_i ⊗ W[:, c])
            let mut u = vec![0.0; n * dim];
            for (uc, wc) in u.chunks_exact_mut(n).zip(w.chunks_exact(dim)) {
                for (block, &bl) in uc.chunks_exact_mut(dim).zip(bi.clone()) {
                    for (dst, &v) in block.iter_mut().zip(wc) {
                        *dst = bl * v;
                    }
                }
            }
            for (pj, &bj) in p.chunks_exact_mut(n * dim).zip(bi) {
                if bj == 0.0 {
                    continue;
                }
                for (dst, &v) in pj.iter_mut().zip(&u) {
                    *dst += bj * v;
                }
            }
        }
        MixingStructure::Matrices(_) => {
            let row = mixing.row(i, dim);
            *precision += row.transpose() * precision_weight * &row;
            *shift += row.transpose() * mle_weight;
        }
    }
}

/// Precision form of the hyper-posterior: `(Σ̄⁻¹, Σ̄⁻¹ μ̄)`.
#[derive(Debug, Clone)]
pub struct HyperPrecision {
    pub precision: DMatrix<f64>,
    pub shift: DVector<f64>,
}

impl HyperPrecision {
    /// Assembles the precision form from a prior precision and per-action terms.
    pub fn assemble(spec: &HierModelSpec, prior_precision: &DMatrix<f64>, terms: &[ActionTerms]) -> Self {
        let mut precision = prior_precision.clone();
        let mut shift = prior_precision * spec.mu_psi();
        for (i, t) in terms.iter().enumerate() {
            accumulate_action(
                spec.mixing(),
                i,
                spec.dim(),
                &t.precision_weight,
                &t.mle_weight,
                &mut precision,
                &mut shift,
            );
        }
        Self {
            precision: symmetrize(&precision),
            shift,
        }
    }

    /// Covariance form `N(μ̄, Σ̄)`.
    pub fn to_gaussian(&self, jitter: f64) -> Result<GaussianDist> {
        let p = SpdMatrix::new(self.precision.clone())?;
        let mean = p.solve(&self.shift);
        GaussianDist::with_jitter(mean, p.inverse(), jitter)
    }
}

fn all_terms(spec: &HierModelSpec, stats: &SufficientStats) -> Result<Vec<ActionTerms>> {
    stats.check_against(spec)?;
    (0..spec.action_count())
        .map(|i| ActionTerms::for_action(spec, stats, i, 0.0))
        .collect()
}

/// `Σ̄_t⁻¹` and `Σ̄_t⁻¹ μ̄_t`.
pub fn hyper_precision(spec: &HierModelSpec, stats: &SufficientStats) -> Result<HyperPrecision> {
    let terms = all_terms(spec, stats)?;
    Ok(HyperPrecision::assemble(spec, &spec.sigma_psi().inverse(), &terms))
}

/// Exact joint hyper-posterior `Q_t = N(μ̄_t, Σ̄_t)` over the stacked latents.
pub fn hyper_posterior(spec: &HierModelSpec, stats: &SufficientStats) -> Result<GaussianDist> {
    hyper_precision(spec, stats)?.to_gaussian(0.0)
}

/// Conditional posterior `P_{t,i}(· | Ψ)`.
pub fn conditional_posterior(
    spec: &HierModelSpec,
    stats: &SufficientStats,
    i: usize,
    psi: &DVector<f64>,
) -> Result<GaussianDist> {
    stats.check_against(spec)?;
    if i >= spec.action_count() {
        return Err(Error::ActionOutOfRange {
            index: i,
            count: spec.action_count(),
        });
    }
    let terms = ActionTerms::for_action(spec, stats, i, 0.0)?;
    let mean = terms.conditional_mean(&(spec.mixing_row(i) * psi));
    GaussianDist::new(mean, terms.cond_cov)
}

/// Fails unless every off-diagonal `d × d` block of `Σ_Ψ` is exactly zero.
pub fn check_block_diagonal(spec: &HierModelSpec) -> Result<()> {
    let (l, d) = (spec.latent_count(), spec.dim());
    let s = spec.sigma_psi().matrix();
    for a in 0..l {
        for b in 0..l {
            if a != b && s.view((a * d, b * d), (d, d)).iter().any(|v| *v != 0.0) {
                return Err(Error::NonBlockDiagonalHyperPrior(a.min(b), a.max(b)));
            }
        }
    }
    Ok(())
}

const MEAN_FIELD_TOL: f64 = 1e-14;
const MEAN_FIELD_MAX_SWEEPS: usize = 10_000;

/// Factored (mean-field) hyper-posterior state.
///
/// Factor `ℓ` has precision `Σ_{ψ_ℓ}⁻¹ + Σ_i b_{i,ℓ}² W_i`, the `ℓ`-th diagonal
/// block of `Σ̄_t⁻¹`. The factor means solve the coupled mean-field equations
/// `m_ℓ = P_ℓℓ⁻¹ (h_ℓ − Σ_{j≠ℓ} P_ℓj m_j)` by block Gauss-Seidel sweeps; the
/// fixed point is the exact posterior mean.
#[derive(Debug, Clone)]
pub struct FactoredHyperPosterior {
    pub factors: Vec<GaussianDist>,
    pub sweeps: usize,
}

/// Blockwise inverse of a block-diagonal `Σ_Ψ`.
pub(crate) fn blockwise_prior_precision(spec: &HierModelSpec) -> Result<DMatrix<f64>> {
    check_block_diagonal(spec)?;
    let blocks = (0..spec.latent_count())
        .map(|l| Ok(SpdMatrix::new(spec.latent_prior_block(l).1)?.inverse()))
        .collect::<Result<Vec<_>>>()?;
    Ok(block_diag(&blocks))
}

pub(crate) fn solve_mean_field(
    hp: &HyperPrecision,
    latents: usize,
    dim: usize,
    warm_start: Option<&[DVector<f64>]>,
    jitter: f64,
) -> Result<FactoredHyperPosterior> {
    let fit = mean_field_fit(hp, latents, dim, warm_start)?;
    let factors = fit
        .precisions
        .iter()
        .zip(fit.means)
        .map(|(p, m)| GaussianDist::with_jitter(m, p.inverse(), jitter))
        .collect::<Result<_>>()?;
    Ok(FactoredHyperPosterior {
        factors,
        sweeps: fit.sweeps,
    })
}

/// Factor means and precisions of the mean-field fit.
pub(crate) struct MeanFieldFit {
    pub means: Vec<DVector<f64>>,
    pub precisions: Vec<SpdMatrix>,
    pub sweeps: usize,
}

/// Block Gauss-Seidel on the precision form: each factor mean solves
/// `P_ℓℓ m_ℓ = h_ℓ - Σ_{j≠ℓ} P_ℓj m_j`. The fixed point is the exact mean.
pub(crate) fn mean_field_fit(
    hp: &HyperPrecision,
    latents: usize,
    dim: usize,
    warm_start: Option<&[DVector<f64>]>,
) -> Result<MeanFieldFit> {
    let d = dim;
    let diag: Vec<SpdMatrix> = (0..latents)
        .map(|l| SpdMatrix::new(hp.precision.view((l * d, l * d), (d, d)).into_owned()))
        .collect::<Result<_>>()?;
    let mut means: Vec<DVector<f64>> = match warm_start {
        Some(w) if w.len() == latents => w.to_vec(),
        _ => vec![DVector::zeros(d); latents],
    };
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let mut change: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for l in 0..latents {
            let mut r = hp.shift.rows(l * d, d).into_owned();
            for (j, mj) in means.iter().enumerate() {
                if j != l {
                    r -= hp.precision.view((l * d, j * d), (d, d)) * mj;
                }
            }
            let updated = diag[l].solve(&r);
            change = change.max((&updated - &means[l]).amax());
            scale = scale.max(updated.amax());
            means[l] = updated;
        }
        if latents == 1 || change <= MEAN_FIELD_TOL * (1.0 + scale) || sweeps >= MEAN_FIELD_MAX_SWEEPS {
            break;
        }
    }
    Ok(MeanFieldFit {
        means,
        precisions: diag,
        sweeps,
    })
}

/// One independent Gaussian per latent parameter.
pub fn factored_hyper_posterior(spec: &HierModelSpec, stats: &SufficientStats) -> Result<Vec<GaussianDist>> {
    let prior_precision = blockwise_prior_precision(spec)?;
    let terms = all_terms(spec, stats)?;
    let hp = HyperPrecision::assemble(spec, &prior_precision, &terms);
    Ok(solve_mean_field(&hp, spec.latent_count(), spec.dim(), None, 0.0)?.factors)
}

/// Closed-form hyper-posterior of the multi-armed (`d = 1`, `x ≡ 1`) model.
pub fn mab_hyper_posterior(spec: &HierModelSpec, stats: &SufficientStats) -> Result<GaussianDist> {
    if spec.dim() != 1 {
        return Err(Error::DimensionMismatch(format!(
            "the multi-armed closed form needs d = 1, got d = {}",
            spec.dim()
        )));
    }
    stats.check_against(spec)?;
    let (k, l) = (spec.action_count(), spec.latent_count());
    let sigma2 = spec.sigma() * spec.sigma();
    let weights = DMatrix::from_fn(k, l, |i, j| match spec.mixing() {
        MixingStructure::Weights(b) => b[(i, j)],
        MixingStructure::Matrices(c) => c[i][j][(0, 0)],
    });
    let prior_precision = spec.sigma_psi().inverse();
    let mut precision = prior_precision.clone();
    let mut shift = &prior_precision * spec.mu_psi();
    for i in 0..k {
        let n = stats.pulls(i) as f64;
        if (stats.gram(i)[(0, 0)] * sigma2 - n).abs() > 1e-9 * n.max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "action {i} was observed with contexts other than 1"
            )));
        }
        let reward_sum = stats.moment(i)[0] * sigma2;
        let denom = n * spec.sigma0(i).matrix()[(0, 0)] + sigma2;
        let b = weights.row(i).transpose();
        precision += &b * b.transpose() * (n / denom);
        shift += &b * (reward_sum / denom);
    }
    let p = SpdMatrix::new(precision)?;
    GaussianDist::new(p.solve(&shift), p.inverse())
}

/// Direct Bayesian linear regression over all `Kd` action parameters.
///
/// Prior `N(Γμ_Ψ, Σ₀ + ΓΣ_ΨΓᵀ)`, one design row per record with `x` placed
/// in the block of the chosen action, and noise `σ²`. Used as the reference
/// the hierarchical decomposition is checked against.
pub fn joint_posterior_oracle(spec: &HierModelSpec, history: &[HistoryRecord]) -> Result<GaussianDist> {
    let (k, d) = (spec.action_count(), spec.dim());
    let gamma = spec.stacked_mixing();
    let sigma0 = block_diag(&spec.sigma0_all().iter().map(|s| s.matrix().clone()).collect::<Vec<_>>());
    let prior_mean = &gamma * spec.mu_psi();
    let prior_cov = sigma0 + &gamma * spec.sigma_psi().matrix() * gamma.transpose();
    if history.is_empty() {
        return GaussianDist::new(prior_mean, prior_cov);
    }
    let t = history.len();
    let mut design = DMatrix::zeros(t, k * d);
    let mut y = DVector::zeros(t);
    for (row, r) in history.iter().enumerate() {
        if r.action >= k {
            return Err(Error::ActionOutOfRange { index: r.action, count: k });
        }
        design.view_mut((row, r.action * d), (1, d)).copy_from(&r.x.transpose());
        y[row] = r.reward;
    }
    let sigma2 = spec.sigma() * spec.sigma();
    let cross = &prior_cov * design.transpose();
    let innovation = SpdMatrix::new(&design * &cross + DMatrix::identity(t, t) * sigma2)?;
    let residual = y - &design * &prior_mean;
    let mean = &prior_mean + &cross * innovation.solve(&residual);
    let cov = &prior_cov - &cross * innovation.solve_matrix(&cross.transpose());
    GaussianDist::new(mean, cov)
}

/// Marginal posterior of all action parameters assembled from the hierarchical
/// pieces: `Σ̂ = Σ̃ + Σ̃Σ₀⁻¹ Γ Σ̄ Γᵀ Σ₀⁻¹Σ̃` and `μ̂ = Σ̃(B + Σ₀⁻¹Γμ̄)`.
pub fn decomposed_marginal_posterior(spec: &HierModelSpec, stats: &SufficientStats) -> Result<GaussianDist> {
    let terms = all_terms(spec, stats)?;
    let q = HyperPrecision::assemble(spec, &spec.sigma_psi().inverse(), &terms).to_gaussian(0.0)?;
    let (k, d, ld) = (spec.action_count(), spec.dim(), spec.latent_count() * spec.dim());
    let mut lift = DMatrix::zeros(k * d, ld);
    let mut mean = DVector::zeros(k * d);
    for (i, t) in terms.iter().enumerate() {
        let block = &t.prior_gain * spec.mixing_row(i);
        mean.rows_mut(i * d, d)
            .copy_from(&(&t.cond_data_mean + &block * q.mean()));
        lift.view_mut((i * d, 0), (d, ld)).copy_from(&block);
    }
    let conditional = block_diag(&terms.iter().map(|t| t.cond_cov.clone()).collect::<Vec<_>>());
    let cov = conditional + &lift * q.cov() * lift.transpose();
    GaussianDist::new(mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use nalgebra::dmatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_chain(weight: f64) -> (HierModelSpec, SufficientStats) {
        let spec = HierModelSpec::isotropic(dmatrix![weight], 1, 0.0, 1.0, 1.0, 1.0).unwrap();
        let mut stats = SufficientStats::for_spec(&spec);
        stats.update(&DVector::from_element(1, 1.0), 0, 1.0, 1.0).unwrap();
        (spec, stats)
    }

    fn direct_precision_weight(sigma0: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
        (sigma0 + g.clone().try_inverse().unwrap()).try_inverse().unwrap()
    }

    #[test]
    fn update_single_observation() {
        let mut stats = SufficientStats::new(2, 2);
        stats.update(&DVector::from_vec(vec![1.0, 0.0]), 0, 2.0, 1.0).unwrap();
        assert_eq!(stats.gram(0), &dmatrix![1.0, 0.0; 0.0, 0.0]);
        assert_eq!(stats.moment(0), &DVector::from_vec(vec![2.0, 0.0]));
        assert_eq!(stats.pulls(0), 1);
        assert_eq!(stats.pulls(1), 0);
        assert_eq!(stats.gram(1), &DMatrix::zeros(2, 2));

        let mut scaled = SufficientStats::new(2, 2);
        scaled.update(&DVector::from_vec(vec![1.0, 0.0]), 0, 2.0, 2.0).unwrap();
        assert_eq!(scaled.gram(0), &dmatrix![0.25, 0.0; 0.0, 0.0]);
        assert_eq!(scaled.moment(0), &DVector::from_vec(vec![0.5, 0.0]));
    }

    #[test]
    fn update_rejects_bad_action() {
        let mut stats = SufficientStats::new(2, 1);
        let err = stats.update(&DVector::from_element(1, 1.0), 2, 0.0, 1.0);
        assert_eq!(err, Err(Error::ActionOutOfRange { index: 2, count: 2 }));
    }

    #[test]
    fn interleavings_give_identical_stats() {
        // Records touch actions 0..3 and 3..6; replaying one half before the
        // other or interleaving them leaves each action's sums in the same order.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let history: Vec<HistoryRecord> = (0..50)
            .map(|t| HistoryRecord {
                round: t,
                x: DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)),
                action: if t % 2 == 0 { t % 3 } else { 3 + t % 3 },
                reward: rng.random_range(-2.0..2.0),
            })
            .collect();
        let interleaved = SufficientStats::from_history(6, 3, &history, 0.7).unwrap();
        let (evens, odds): (Vec<_>, Vec<_>) = history.iter().cloned().partition(|r| r.action < 3);
        let mut grouped = SufficientStats::new(6, 3);
        for r in evens.iter().chain(&odds) {
            grouped.update(&r.x, r.action, r.reward, 0.7).unwrap();
        }
        assert_eq!(interleaved, grouped);
        assert_eq!(grouped.total_rounds(), 50);
    }

    #[test]
    fn precision_weight_examples() {
        let s0 = SpdMatrix::identity(2);
        assert_eq!(precision_weight(&s0, &DMatrix::zeros(2, 2)), DMatrix::zeros(2, 2));
        let w = precision_weight(&SpdMatrix::identity(1), &dmatrix![1.0]);
        assert!((w[(0, 0)] - 0.5).abs() < 1e-15);
        let m = mle_weight(&SpdMatrix::identity(1), &dmatrix![1.0], &DVector::from_element(1, 1.0));
        assert!((m[0] - 0.5).abs() < 1e-15);
        assert_eq!(
            mle_weight(&s0, &dmatrix![1.0, 0.2; 0.2, 3.0], &DVector::zeros(2)),
            DVector::zeros(2)
        );
    }

    #[test]
    fn woodbury_forms_match_direct_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let s0 = fixtures::random_spd(3, 0.2, &mut rng);
            let g = fixtures::random_spd(3, 0.1, &mut rng);
            let b = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let spd = SpdMatrix::new(s0.clone()).unwrap();
            let direct = direct_precision_weight(&s0, &g);
            assert!((precision_weight(&spd, &g) - &direct).amax() < 1e-10 * (1.0 + direct.amax()));
            let direct_mle = &direct * g.clone().try_inverse().unwrap() * &b;
            assert!((mle_weight(&spd, &g, &b) - &direct_mle).amax() < 1e-10 * (1.0 + direct_mle.amax()));
        }
    }

    #[test]
    fn no_data_keeps_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = fixtures::random_spec(4, 2, 2, false, &mut rng);
        let q = hyper_posterior(&spec, &SufficientStats::for_spec(&spec)).unwrap();
        assert!((q.mean() - spec.mu_psi()).amax() < 1e-12);
        assert!((q.cov() - spec.sigma_psi().matrix()).amax() < 1e-12);
        let psi = DVector::from_fn(4, |i, _| i as f64);
        let p = conditional_posterior(&spec, &SufficientStats::for_spec(&spec), 1, &psi).unwrap();
        assert!((p.mean() - spec.mixing_row(1) * &psi).amax() < 1e-12);
        assert!((p.cov() - spec.sigma0(1).matrix()).amax() < 1e-12);
    }

    #[test]
    fn scalar_chain_hyper_posterior() {
        let (spec, stats) = scalar_chain(1.0);
        let q = hyper_posterior(&spec, &stats).unwrap();
        assert!((q.cov()[(0, 0)] - 2.0 / 3.0).abs() < 1e-14);
        assert!((q.mean()[0] - 1.0 / 3.0).abs() < 1e-14);

        let (spec, stats) = scalar_chain(0.0);
        let q = hyper_posterior(&spec, &stats).unwrap();
        assert_eq!(q.cov()[(0, 0)], 1.0);
        assert_eq!(q.mean()[0], 0.0);
    }

    #[test]
    fn scalar_chain_conditional() {
        let (spec, stats) = scalar_chain(1.0);
        let p = conditional_posterior(&spec, &stats, 0, &DVector::from_element(1, 1.0 / 3.0)).unwrap();
        assert!((p.cov()[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((p.mean()[0] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn near_deterministic_link_pins_conditional_mean() {
        let spec = HierModelSpec::isotropic(dmatrix![1.0, -0.5], 2, 0.0, 1.0, 1e-30, 1.0).unwrap();
        let mut stats = SufficientStats::for_spec(&spec);
        stats.update(&DVector::from_vec(vec![1.0, 0.3]), 0, 5.0, 1.0).unwrap();
        stats.update(&DVector::from_vec(vec![-0.2, 1.0]), 0, -3.0, 1.0).unwrap();
        let psi = DVector::from_vec(vec![0.4, -1.0, 2.0, 0.5]);
        let p = conditional_posterior(&spec, &stats, 0, &psi).unwrap();
        assert!((p.mean() - spec.mixing_row(0) * &psi).amax() < 1e-6);
    }

    #[test]
    fn weights_match_identity_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let spec = fixtures::random_spec(5, 3, 2, false, &mut rng);
            let history = fixtures::random_history(&spec, 15, &mut rng);
            let stats = SufficientStats::from_history(5, 2, &history, spec.sigma()).unwrap();
            let b = spec.mixing().weights().unwrap().clone();
            let mspec = spec.with_mixing(MixingStructure::weights_as_matrices(&b, 2)).unwrap();
            let (a, c) = (hyper_posterior(&spec, &stats).unwrap(), hyper_posterior(&mspec, &stats).unwrap());
            assert!((a.mean() - c.mean()).amax() < 1e-12);
            assert!((a.cov() - c.cov()).amax() < 1e-12);
        }
    }

    #[test]
    fn factored_single_latent_equals_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = fixtures::random_spec(6, 1, 3, true, &mut rng);
        let history = fixtures::random_history(&spec, 20, &mut rng);
        let stats = SufficientStats::from_history(6, 3, &history, spec.sigma()).unwrap();
        let exact = hyper_posterior(&spec, &stats).unwrap();
        let factored = factored_hyper_posterior(&spec, &stats).unwrap();
        assert_eq!(factored.len(), 1);
        assert!((factored[0].mean() - exact.mean()).amax() < 1e-12);
        assert!((factored[0].cov() - exact.cov()).amax() < 1e-12);
    }

    #[test]
    fn factored_prior_and_precision_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = fixtures::random_spec(8, 3, 2, true, &mut rng);
        let empty = SufficientStats::for_spec(&spec);
        for (l, f) in factored_hyper_posterior(&spec, &empty).unwrap().iter().enumerate() {
            let (m, s) = spec.latent_prior_block(l);
            assert!((f.mean() - m).amax() < 1e-12);
            assert!((f.cov() - s).amax() < 1e-12);
        }

        let history = fixtures::random_history(&spec, 30, &mut rng);
        let stats = SufficientStats::from_history(8, 2, &history, spec.sigma()).unwrap();
        let factors = factored_hyper_posterior(&spec, &stats).unwrap();
        let b = spec.mixing().weights().unwrap();
        for (l, f) in factors.iter().enumerate() {
            // Σ̄_ℓ⁻¹ = Σ_ψℓ⁻¹ + Σ_i b_iℓ² W_i
            let mut expected = spec.latent_prior_block(l).1.try_inverse().unwrap();
            for i in 0..8 {
                expected += precision_weight(spec.sigma0(i), stats.gram(i)) * b[(i, l)].powi(2);
            }
            let got = f.cov().clone().try_inverse().unwrap();
            assert!((got - &expected).amax() < 1e-9 * (1.0 + expected.amax()));
        }
    }

    #[test]
    fn factored_rejects_coupled_hyper_prior() {
        let spec = HierModelSpec::new(
            DVector::zeros(2),
            SpdMatrix::new(dmatrix![1.0, 0.3; 0.3, 1.0]).unwrap(),
            vec![SpdMatrix::identity(1); 2],
            MixingStructure::Weights(dmatrix![1.0, 0.0; 0.0, 1.0]),
            1.0,
        )
        .unwrap();
        let err = factored_hyper_posterior(&spec, &SufficientStats::for_spec(&spec)).unwrap_err();
        assert_eq!(err, Error::NonBlockDiagonalHyperPrior(0, 1));
    }

    #[test]
    fn mab_scalar_example_and_reduction() {
        let (spec, stats) = scalar_chain(1.0);
        let q = mab_hyper_posterior(&spec, &stats).unwrap();
        assert!((q.cov()[(0, 0)] - 2.0 / 3.0).abs() < 1e-14);
        assert!((q.mean()[0] - 1.0 / 3.0).abs() < 1e-14);

        let spec = HierModelSpec::isotropic(dmatrix![1.0, 0.0], 2, 0.0, 1.0, 1.0, 1.0).unwrap();
        let err = mab_hyper_posterior(&spec, &SufficientStats::for_spec(&spec)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn oracle_scalar_chain() {
        let (spec, _) = scalar_chain(1.0);
        let history = vec![HistoryRecord { round: 1, x: DVector::from_element(1, 1.0), action: 0, reward: 1.0 }];
        let oracle = joint_posterior_oracle(&spec, &history).unwrap();
        assert!((oracle.mean()[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((oracle.cov()[(0, 0)] - 2.0 / 3.0).abs() < 1e-14);
        let stats = SufficientStats::from_history(1, 1, &history, 1.0).unwrap();
        let decomposed = decomposed_marginal_posterior(&spec, &stats).unwrap();
        assert!((decomposed.mean()[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((decomposed.cov()[(0, 0)] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn oracle_and_decomposition_without_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let spec = fixtures::random_spec(3, 2, 2, false, &mut rng);
        let oracle = joint_posterior_oracle(&spec, &[]).unwrap();
        let decomposed = decomposed_marginal_posterior(&spec, &SufficientStats::for_spec(&spec)).unwrap();
        let gamma = spec.stacked_mixing();
        assert!((oracle.mean() - &gamma * spec.mu_psi()).amax() < 1e-12);
        assert!((decomposed.mean() - oracle.mean()).amax() < 1e-12);
        assert!((decomposed.cov() - oracle.cov()).amax() < 1e-12);
    }
}
