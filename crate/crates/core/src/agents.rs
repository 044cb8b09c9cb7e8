//! Bandit policies: hierarchical Thompson sampling (exact and factored
//! hyper-posterior), a single-latent hierarchical baseline, and flat
//! per-action baselines (LinTS, IndTS, LinUCB).
//!
//! Posteriors are rebuilt from the sufficient statistics. Per-action terms
//! only depend on that action's statistics, so they are recomputed when the
//! action is observed and reused otherwise.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::error::{Error, Result};
use crate::linalg::{add_relative_jitter, block_diag, cholesky_in_place, standard_normals, GaussianDist, SpdMatrix};
use crate::model::{best_action, EnvDraw, HierModelSpec, MixingStructure};
use crate::posterior::{
    accumulate_action, blockwise_prior_precision, check_block_diagonal, mean_field_fit, ActionTerms, HyperPrecision,
    SufficientStats,
};

/// A stateful policy.
pub trait Agent: Send {
    fn name(&self) -> &str;

    /// Chooses an action (zero-based) for context `x`.
    fn act(&mut self, x: &DVector<f64>, rng: &mut dyn RngCore) -> Result<usize>;

    fn observe(&mut self, x: &DVector<f64>, action: usize, reward: f64) -> Result<()>;

    /// Called once per episode with the true parameters. Only oracle policies
    /// look at it.
    fn begin_episode(&mut self, _env: &EnvDraw) {}
}

const REBUILD_INTERVAL: usize = 256;

/// Per-action posterior terms, recomputed only for actions observed since
/// the last refresh.
#[derive(Debug, Clone)]
struct TermCache {
    terms: Vec<ActionTerms>,
    dirty: Vec<bool>,
}

impl TermCache {
    fn new(priors: &[SpdMatrix], stats: &SufficientStats, jitter: f64) -> Result<Self> {
        let terms = priors
            .iter()
            .enumerate()
            .map(|(i, p)| ActionTerms::compute(p, stats.gram(i), stats.moment(i), jitter))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dirty: vec![false; terms.len()],
            terms,
        })
    }

    fn invalidate(&mut self, i: usize) {
        self.dirty[i] = true;
    }

    fn refresh(&mut self, priors: &[SpdMatrix], stats: &SufficientStats, jitter: f64) -> Result<&[ActionTerms]> {
        for (i, (term, dirty)) in self.terms.iter_mut().zip(&mut self.dirty).enumerate() {
            if *dirty {
                *term = ActionTerms::compute(&priors[i], stats.gram(i), stats.moment(i), jitter)?;
                *dirty = false;
            }
        }
        Ok(&self.terms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HyperMode {
    Exact,
    Factored,
}

/// `N(mean, P⁻¹)` sampled through the Cholesky factor of the precision `P`.
#[derive(Debug, Clone)]
struct PrecisionGaussian {
    mean: DVector<f64>,
    /// `L` for `P = LLᵀ`.
    lower: DMatrix<f64>,
}

impl PrecisionGaussian {
    fn new(mean: DVector<f64>, precision: &SpdMatrix) -> Self {
        Self {
            mean,
            lower: precision.cholesky_factor(),
        }
    }

    fn sample_into(&self, rng: &mut dyn RngCore, out: &mut Vec<f64>) {
        let mut v = standard_normals(rng, self.mean.len());
        // v ← L⁻ᵀ z has covariance P⁻¹
        assert!(self.lower.tr_solve_lower_triangular_mut(&mut v), "Cholesky factor has a positive diagonal");
        out.extend(v.iter().zip(self.mean.iter()).map(|(a, b)| a + b));
    }

    fn covariance(&self) -> DMatrix<f64> {
        let inv = self.lower.clone().try_inverse().expect("Cholesky factor has a positive diagonal");
        inv.transpose() * inv
    }
}

/// Hierarchical Thompson sampling: draw `Ψ_t ~ Q_t`, then every
/// `θ_{t,i} ~ P_{t,i}(· | Ψ_t)`, and act greedily on the draws.
#[derive(Debug, Clone)]
pub struct GHierTs {
    name: String,
    spec: HierModelSpec,
    stats: SufficientStats,
    mode: HyperMode,
    jitter: f64,
    prior_precision: DMatrix<f64>,
    prior_shift: DVector<f64>,
    /// Running `Σ_i C_iᵀ W_i C_i` and `Σ_i C_iᵀ m_i`.
    data_precision: DMatrix<f64>,
    data_shift: DVector<f64>,
    updates_since_rebuild: usize,
    mixing_rows: Vec<DMatrix<f64>>,
    cache: TermCache,
    /// One factor for the exact posterior, one per latent when factored.
    latent: Vec<PrecisionGaussian>,
    stale: bool,
    warm_means: Vec<DVector<f64>>,
    psi_buf: Vec<f64>,
    means_buf: DMatrix<f64>,
}

impl GHierTs {
    /// Exact joint hyper-posterior.
    pub fn new(spec: HierModelSpec, jitter: f64) -> Result<Self> {
        let prior_precision = spec.sigma_psi().inverse();
        Self::build("G-HierTS", spec, HyperMode::Exact, prior_precision, jitter)
    }

    /// Factored hyper-posterior; needs a block-diagonal `Σ_Ψ`.
    pub fn factored(spec: HierModelSpec, jitter: f64) -> Result<Self> {
        check_block_diagonal(&spec)?;
        let prior_precision = blockwise_prior_precision(&spec)?;
        Self::build("G-HierTS-Fa", spec, HyperMode::Factored, prior_precision, jitter)
    }

    fn build(
        name: &str,
        spec: HierModelSpec,
        mode: HyperMode,
        prior_precision: DMatrix<f64>,
        jitter: f64,
    ) -> Result<Self> {
        let mixing_rows = (0..spec.action_count()).map(|i| spec.mixing_row(i)).collect();
        let stats = SufficientStats::for_spec(&spec);
        let ld = spec.latent_count() * spec.dim();
        Ok(Self {
            name: name.to_string(),
            cache: TermCache::new(spec.sigma0_all(), &stats, jitter)?,
            stats,
            mode,
            jitter,
            prior_shift: &prior_precision * spec.mu_psi(),
            prior_precision,
            data_precision: DMatrix::zeros(ld, ld),
            data_shift: DVector::zeros(ld),
            updates_since_rebuild: 0,
            mixing_rows,
            latent: Vec::new(),
            stale: true,
            warm_means: Vec::new(),
            psi_buf: Vec::with_capacity(ld),
            means_buf: DMatrix::zeros(0, 0),
            spec,
        })
    }

    pub(crate) fn renamed(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    pub fn spec(&self) -> &HierModelSpec {
        &self.spec
    }

    pub fn stats(&self) -> &SufficientStats {
        &self.stats
    }

    /// Brings the running data sums up to date. Dirty actions are swapped
    /// out one by one; every [`REBUILD_INTERVAL`] updates the sums are rebuilt
    /// from scratch so rounding errors do not accumulate.
    fn sync_data_sums(&mut self) -> Result<()> {
        let dirty: Vec<usize> = (0..self.cache.dirty.len()).filter(|&i| self.cache.dirty[i]).collect();
        if dirty.is_empty() {
            return Ok(());
        }
        let (mixing, dim) = (self.spec.mixing(), self.spec.dim());
        self.updates_since_rebuild += dirty.len();
        if self.updates_since_rebuild >= REBUILD_INTERVAL {
            self.updates_since_rebuild = 0;
            let terms = self.cache.refresh(self.spec.sigma0_all(), &self.stats, self.jitter)?;
            self.data_precision.fill(0.0);
            self.data_shift.fill(0.0);
            for (i, t) in terms.iter().enumerate() {
                accumulate_action(
                    mixing,
                    i,
                    dim,
                    &t.precision_weight,
                    &t.mle_weight,
                    &mut self.data_precision,
                    &mut self.data_shift,
                );
            }
            return Ok(());
        }
        for i in dirty {
            let new = ActionTerms::compute(self.spec.sigma0(i), self.stats.gram(i), self.stats.moment(i), self.jitter)?;
            // the old terms are overwritten with the change new - old
            let mut delta = std::mem::replace(&mut self.cache.terms[i], new);
            let fresh = &self.cache.terms[i];
            delta.precision_weight.zip_apply(&fresh.precision_weight, |o, n| *o = n - *o);
            delta.mle_weight.zip_apply(&fresh.mle_weight, |o, n| *o = n - *o);
            accumulate_action(
                mixing,
                i,
                dim,
                &delta.precision_weight,
                &delta.mle_weight,
                &mut self.data_precision,
                &mut self.data_shift,
            );
            self.cache.dirty[i] = false;
        }
        Ok(())
    }

    fn refresh(&mut self) -> Result<&[PrecisionGaussian]> {
        if !self.stale {
            return Ok(&self.latent);
        }
        self.sync_data_sums()?;
        match self.mode {
            HyperMode::Exact => {
                let ld = self.prior_shift.len();
                if self.latent.is_empty() {
                    self.latent.push(PrecisionGaussian {
                        mean: DVector::zeros(ld),
                        lower: DMatrix::zeros(ld, ld),
                    });
                }
                let f = &mut self.latent[0];
                // both terms are exactly symmetric by construction, so factor as is
                f.lower.copy_from(&self.prior_precision);
                f.lower += &self.data_precision;
                add_relative_jitter(&mut f.lower, self.jitter);
                if !cholesky_in_place(&mut f.lower) {
                    return Err(Error::NotPositiveDefinite {
                        context: "hyper-posterior precision".into(),
                    });
                }
                f.mean.copy_from(&self.prior_shift);
                f.mean += &self.data_shift;
                f.lower.solve_lower_triangular_unchecked_mut(&mut f.mean);
                f.lower.tr_solve_lower_triangular_unchecked_mut(&mut f.mean);
            }
            HyperMode::Factored => {
                let mut hp = HyperPrecision {
                    precision: &self.prior_precision + &self.data_precision,
                    shift: &self.prior_shift + &self.data_shift,
                };
                add_relative_jitter(&mut hp.precision, self.jitter);
                let warm = (!self.warm_means.is_empty()).then_some(self.warm_means.as_slice());
                let fit = mean_field_fit(&hp, self.spec.latent_count(), self.spec.dim(), warm)?;
                self.warm_means = fit.means.clone();
                self.latent = fit
                    .means
                    .into_iter()
                    .zip(&fit.precisions)
                    .map(|(m, p)| PrecisionGaussian::new(m, p))
                    .collect();
            }
        }
        self.stale = false;
        Ok(&self.latent)
    }

    /// Current hyper-posterior over the stacked latents. The factored variant
    /// reports the product of its factors.
    pub fn latent_posterior(&mut self) -> Result<GaussianDist> {
        let factors = self.refresh()?;
        let total = factors.iter().map(|f| f.mean.len()).sum();
        let mean = DVector::from_iterator(total, factors.iter().flat_map(|f| f.mean.iter().copied()));
        let blocks: Vec<_> = factors.iter().map(|f| f.covariance()).collect();
        GaussianDist::new(mean, block_diag(&blocks))
    }

    /// Draws `Ψ` and then each `θ_i` in action order, handing every draw to `f`.
    fn sample_each(&mut self, rng: &mut dyn RngCore, mut f: impl FnMut(usize, DVector<f64>)) -> Result<()> {
        let mut psi = std::mem::take(&mut self.psi_buf);
        psi.clear();
        for factor in self.refresh()? {
            factor.sample_into(rng, &mut psi);
        }
        let terms = &self.cache.terms;
        match self.spec.mixing() {
            MixingStructure::Weights(b) => {
                // column i holds Σ_ℓ b_{i,ℓ} ψ_ℓ
                let (d, k) = (self.spec.dim(), b.nrows());
                let means = &mut self.means_buf;
                if means.shape() != (d, k) {
                    *means = DMatrix::zeros(d, k);
                } else {
                    means.fill(0.0);
                }
                let out = means.as_mut_slice();
                for (psi_l, b_l) in psi.chunks_exact(d).zip(b.as_slice().chunks_exact(k)) {
                    for (col, &bil) in out.chunks_exact_mut(d).zip(b_l) {
                        for (m, &p) in col.iter_mut().zip(psi_l) {
                            *m += bil * p;
                        }
                    }
                }
                for (i, t) in terms.iter().enumerate() {
                    f(i, t.sample_conditional(&means.column(i), rng));
                }
            }
            MixingStructure::Matrices(_) => {
                let stacked = DVector::from_column_slice(&psi);
                for (i, (row, t)) in self.mixing_rows.iter().zip(terms).enumerate() {
                    f(i, t.sample_conditional(&(row * &stacked), rng));
                }
            }
        }
        self.psi_buf = psi;
        Ok(())
    }

    /// One hierarchical draw of all action parameters.
    pub fn sample_parameters(&mut self, rng: &mut dyn RngCore) -> Result<Vec<DVector<f64>>> {
        let mut theta = Vec::with_capacity(self.spec.action_count());
        self.sample_each(rng, |_, t| theta.push(t))?;
        Ok(theta)
    }

    /// Action and the sampled parameters it was chosen from.
    pub fn act_with_sample(&mut self, x: &DVector<f64>, rng: &mut dyn RngCore) -> Result<(usize, Vec<DVector<f64>>)> {
        let theta = self.sample_parameters(rng)?;
        Ok((best_action(&theta, x).0, theta))
    }
}

impl Agent for GHierTs {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(&mut self, x: &DVector<f64>, rng: &mut dyn RngCore) -> Result<usize> {
        // same draws and tie-break as `act_with_sample`, without keeping θ
        let mut best = (0, f64::NEG_INFINITY);
        self.sample_each(rng, |i, theta| {
            let v = x.dot(&theta);
            if i == 0 || v > best.1 {
                best = (i, v);
            }
        })?;
        Ok(best.0)
    }

    fn observe(&mut self, x: &DVector<f64>, action: usize, reward: f64) -> Result<()> {
        self.stats.update(x, action, reward, self.spec.sigma())?;
        self.cache.invalidate(action);
        self.stale = true;
        Ok(())
    }
}

/// Collapses the latents into their average: hyper-prior of `(1/L) Σ_ℓ ψ_ℓ`,
/// and per-action weight `Σ_ℓ b_{i,ℓ}`.
pub fn single_latent_reduction(spec: &HierModelSpec) -> Result<HierModelSpec> {
    let b = spec.mixing().weights().ok_or_else(|| {
        Error::InvalidModel("the single-latent reduction needs scalar mixing weights".into())
    })?;
    let (l, d) = (spec.latent_count(), spec.dim());
    let lf = l as f64;
    let mut mean = DVector::zeros(d);
    let mut cov = DMatrix::zeros(d, d);
    for a in 0..l {
        mean += spec.mu_psi().rows(a * d, d);
        for c in 0..l {
            cov += spec.sigma_psi().matrix().view((a * d, c * d), (d, d));
        }
    }
    let weights = DMatrix::from_fn(b.nrows(), 1, |i, _| b.row(i).sum());
    HierModelSpec::new(
        mean / lf,
        SpdMatrix::new(cov / (lf * lf))?,
        spec.sigma0_all().to_vec(),
        MixingStructure::Weights(weights),
        spec.sigma(),
    )
}

/// HierTS baseline: G-HierTS on the single-latent reduction.
pub fn hierts_single(spec: &HierModelSpec, jitter: f64) -> Result<GHierTs> {
    Ok(GHierTs::new(single_latent_reduction(spec)?, jitter)?.renamed("HierTS"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum FlatPolicy {
    Thompson,
    Ucb { alpha: f64 },
}

/// Independent Bayesian linear regression per action, ignoring the latents.
#[derive(Debug, Clone)]
pub struct FlatLinearAgent {
    name: String,
    policy: FlatPolicy,
    prior_means: Vec<DVector<f64>>,
    prior_covs: Vec<SpdMatrix>,
    sigma: f64,
    jitter: f64,
    stats: SufficientStats,
    cache: TermCache,
}

impl FlatLinearAgent {
    fn from_marginals(name: &str, policy: FlatPolicy, spec: &HierModelSpec, jitter: f64) -> Result<Self> {
        let priors = (0..spec.action_count())
            .map(|i| spec.marginal_prior(i))
            .collect::<Result<Vec<_>>>()?;
        Self::from_priors(name, policy, priors, spec.sigma(), jitter)
    }

    fn from_priors(name: &str, policy: FlatPolicy, priors: Vec<GaussianDist>, sigma: f64, jitter: f64) -> Result<Self> {
        let dim = priors.first().map(|p| p.dim()).ok_or_else(|| {
            Error::InvalidModel("at least one action is required".into())
        })?;
        let prior_covs = priors
            .iter()
            .map(|p| SpdMatrix::new(p.cov().clone()))
            .collect::<Result<Vec<_>>>()?;
        let stats = SufficientStats::new(priors.len(), dim);
        Ok(Self {
            name: name.to_string(),
            policy,
            cache: TermCache::new(&prior_covs, &stats, jitter)?,
            stats,
            prior_means: priors.into_iter().map(|p| p.mean().clone()).collect(),
            prior_covs,
            sigma,
            jitter,
        })
    }

    /// LinTS with the marginal prior `N(C_i μ_Ψ, Σ_{0,i} + C_i Σ_Ψ C_iᵀ)`.
    pub fn lints(spec: &HierModelSpec, jitter: f64) -> Result<Self> {
        Self::from_marginals("LinTS", FlatPolicy::Thompson, spec, jitter)
    }

    /// Same model as LinTS, one posterior per action.
    pub fn indts(spec: &HierModelSpec, jitter: f64) -> Result<Self> {
        Self::from_marginals("IndTS", FlatPolicy::Thompson, spec, jitter)
    }

    /// Optimistic index `xᵀθ̂_i + α·sqrt(xᵀΣ̂_i x)` on the same posteriors.
    pub fn linucb(spec: &HierModelSpec, alpha: f64, jitter: f64) -> Result<Self> {
        Self::from_marginals("LinUCB", FlatPolicy::Ucb { alpha }, spec, jitter)
    }

    /// Thompson sampling from explicit per-action priors.
    pub fn thompson_with_priors(priors: Vec<GaussianDist>, sigma: f64) -> Result<Self> {
        Self::from_priors("LinTS", FlatPolicy::Thompson, priors, sigma, 0.0)
    }

    /// LinUCB from explicit per-action priors.
    pub fn ucb_with_priors(priors: Vec<GaussianDist>, sigma: f64, alpha: f64) -> Result<Self> {
        Self::from_priors("LinUCB", FlatPolicy::Ucb { alpha }, priors, sigma, 0.0)
    }

    /// Posterior of action `i` given its own history.
    pub fn posterior(&mut self, i: usize) -> Result<GaussianDist> {
        let terms = self.cache.refresh(&self.prior_covs, &self.stats, self.jitter)?;
        let t = &terms[i];
        GaussianDist::new(t.conditional_mean(&self.prior_means[i]), t.cond_cov.clone())
    }

    pub fn stats(&self) -> &SufficientStats {
        &self.stats
    }
}

impl Agent for FlatLinearAgent {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(&mut self, x: &DVector<f64>, rng: &mut dyn RngCore) -> Result<usize> {
        let terms = self.cache.refresh(&self.prior_covs, &self.stats, self.jitter)?;
        let mut best = (0, f64::NEG_INFINITY);
        for (i, t) in terms.iter().enumerate() {
            let score = match self.policy {
                FlatPolicy::Thompson => x.dot(&t.sample_conditional(&self.prior_means[i], rng)),
                FlatPolicy::Ucb { alpha } => {
                    let mean = t.conditional_mean(&self.prior_means[i]);
                    let width = (x.transpose() * &t.cond_cov * x)[(0, 0)].max(0.0).sqrt();
                    x.dot(&mean) + alpha * width
                }
            };
            if score > best.1 {
                best = (i, score);
            }
        }
        Ok(best.0)
    }

    fn observe(&mut self, x: &DVector<f64>, action: usize, reward: f64) -> Result<()> {
        self.stats.update(x, action, reward, self.sigma)?;
        self.cache.invalidate(action);
        Ok(())
    }
}

/// Acts on the true parameters revealed by [`Agent::begin_episode`].
#[derive(Debug, Clone, Default)]
pub struct OracleAgent {
    theta: Vec<DVector<f64>>,
}

impl Agent for OracleAgent {
    fn name(&self) -> &str {
        "Oracle"
    }

    fn act(&mut self, x: &DVector<f64>, _rng: &mut dyn RngCore) -> Result<usize> {
        if self.theta.is_empty() {
            return Err(Error::InvalidArgument("oracle agent used before begin_episode".into()));
        }
        Ok(best_action(&self.theta, x).0)
    }

    fn observe(&mut self, _x: &DVector<f64>, _action: usize, _reward: f64) -> Result<()> {
        Ok(())
    }

    fn begin_episode(&mut self, env: &EnvDraw) {
        self.theta = env.theta.clone();
    }
}

/// Named policy plus its options; builds a fresh agent per run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AgentKind {
    GHierTs,
    GHierTsFa,
    LinTs,
    LinUcb { alpha: f64 },
    HierTs,
    IndTs,
}

impl AgentKind {
    pub const DEFAULT_LINUCB_ALPHA: f64 = 1.0;

    pub fn name(&self) -> &'static str {
        match self {
            AgentKind::GHierTs => "G-HierTS",
            AgentKind::GHierTsFa => "G-HierTS-Fa",
            AgentKind::LinTs => "LinTS",
            AgentKind::LinUcb { .. } => "LinUCB",
            AgentKind::HierTs => "HierTS",
            AgentKind::IndTs => "IndTS",
        }
    }

    /// Case-insensitive lookup by name; LinUCB gets `alpha`.
    pub fn parse(name: &str, alpha: f64) -> Option<Self> {
        let kind = match name.to_ascii_lowercase().as_str() {
            "g-hierts" | "ghierts" => AgentKind::GHierTs,
            "g-hierts-fa" | "ghierts-fa" | "ghierts_fa" => AgentKind::GHierTsFa,
            "lints" => AgentKind::LinTs,
            "linucb" => AgentKind::LinUcb { alpha },
            "hierts" => AgentKind::HierTs,
            "indts" => AgentKind::IndTs,
            _ => return None,
        };
        Some(kind)
    }

    pub fn build(&self, spec: &HierModelSpec, jitter: f64) -> Result<Box<dyn Agent>> {
        Ok(match *self {
            AgentKind::GHierTs => Box::new(GHierTs::new(spec.clone(), jitter)?),
            AgentKind::GHierTsFa => Box::new(GHierTs::factored(spec.clone(), jitter)?),
            AgentKind::LinTs => Box::new(FlatLinearAgent::lints(spec, jitter)?),
            AgentKind::LinUcb { alpha } => Box::new(FlatLinearAgent::linucb(spec, alpha, jitter)?),
            AgentKind::HierTs => Box::new(hierts_single(spec, jitter)?),
            AgentKind::IndTs => Box::new(FlatLinearAgent::indts(spec, jitter)?),
        })
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::linalg::SpdMatrix;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn degenerate_spec(mu_psi: DVector<f64>, weights: DMatrix<f64>, dim: usize) -> HierModelSpec {
        let ld = mu_psi.len();
        HierModelSpec::new(
            mu_psi,
            SpdMatrix::scaled_identity(ld, 1e-30).unwrap(),
            vec![SpdMatrix::scaled_identity(dim, 1e-30).unwrap(); weights.nrows()],
            MixingStructure::Weights(weights),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn greedy_limit_picks_best_mean() {
        // θ_i = b_i ψ with ψ = 1: action 2 (zero-based) has the largest weight.
        let spec = degenerate_spec(DVector::from_element(1, 1.0), dmatrix![0.1; -0.5; 0.9; 0.3], 1);
        let x = DVector::from_element(1, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for agent in [GHierTs::new(spec.clone(), 0.0).unwrap(), GHierTs::factored(spec.clone(), 0.0).unwrap()] {
            let mut agent = agent;
            for _ in 0..20 {
                assert_eq!(agent.act(&x, &mut rng).unwrap(), 2);
            }
        }
        let mut lints = FlatLinearAgent::lints(&spec, 0.0).unwrap();
        let mut ucb = FlatLinearAgent::linucb(&spec, 0.0, 0.0).unwrap();
        let mut hier = hierts_single(&spec, 0.0).unwrap();
        for _ in 0..20 {
            assert_eq!(lints.act(&x, &mut rng).unwrap(), 2);
            assert_eq!(ucb.act(&x, &mut rng).unwrap(), 2);
            assert_eq!(hier.act(&x, &mut rng).unwrap(), 2);
        }
    }

    #[test]
    fn acting_is_deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = fixtures::random_spec(5, 2, 2, true, &mut rng);
        let history = fixtures::random_history(&spec, 12, &mut rng);
        let mut agent = GHierTs::new(spec, 0.0).unwrap();
        for r in &history {
            agent.observe(&r.x, r.action, r.reward).unwrap();
        }
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let a = agent.act_with_sample(&x, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = agent.act_with_sample(&x, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn factored_matches_exact_with_one_latent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = fixtures::random_spec(6, 1, 2, true, &mut rng);
        let history = fixtures::random_history(&spec, 25, &mut rng);
        let mut exact = GHierTs::new(spec.clone(), 0.0).unwrap();
        let mut fa = GHierTs::factored(spec, 0.0).unwrap();
        for r in &history {
            exact.observe(&r.x, r.action, r.reward).unwrap();
            fa.observe(&r.x, r.action, r.reward).unwrap();
        }
        let x = DVector::from_vec(vec![1.0, 0.5]);
        for seed in 0..10 {
            let a = exact.act_with_sample(&x, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = fa.act_with_sample(&x, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn factored_needs_block_diagonal_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = fixtures::random_spec(3, 2, 2, false, &mut rng);
        assert!(matches!(
            GHierTs::factored(spec, 0.0),
            Err(Error::NonBlockDiagonalHyperPrior(0, 1))
        ));
    }

    #[test]
    fn lints_single_action_always_picks_it() {
        let spec = HierModelSpec::isotropic(dmatrix![0.5, 1.0], 3, 0.0, 1.0, 1.0, 1.0).unwrap();
        let mut agent = FlatLinearAgent::lints(&spec, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            assert_eq!(agent.act(&x, &mut rng).unwrap(), 0);
            agent.observe(&x, 0, 1.0).unwrap();
        }
    }

    #[test]
    fn lints_scalar_posterior_matches_conjugate_update() {
        // prior variance 1 + 1·1·1 = 2, one observation y = 1 at x = 1, σ = 1
        let spec = HierModelSpec::isotropic(dmatrix![1.0], 1, 0.0, 1.0, 1.0, 1.0).unwrap();
        let mut agent = FlatLinearAgent::lints(&spec, 0.0).unwrap();
        agent.observe(&DVector::from_element(1, 1.0), 0, 1.0).unwrap();
        let post = agent.posterior(0).unwrap();
        assert!((post.mean()[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((post.cov()[(0, 0)] - 2.0 / 3.0).abs() < 1e-14);

        let terms = agent.cache.terms[0].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| terms.sample_conditional(&agent.prior_means[0], &mut rng)[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 2.0 / 3.0).abs() < 3.0 * (2.0f64 / 3.0 / n as f64).sqrt() + 1e-3);
        assert!((var - 2.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn linucb_prefers_wider_posterior_at_equal_means() {
        let priors = vec![
            GaussianDist::new(DVector::from_element(1, 0.5), dmatrix![0.1]).unwrap(),
            GaussianDist::new(DVector::from_element(1, 0.5), dmatrix![0.4]).unwrap(),
        ];
        let mut agent = FlatLinearAgent::ucb_with_priors(priors, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(agent.act(&DVector::from_element(1, 1.0), &mut rng).unwrap(), 1);
    }

    #[test]
    fn linucb_hand_built_state() {
        // UCB₁ = 1 + sqrt(0.01) = 1.1, UCB₂ = 0.8 + sqrt(0.5) ≈ 1.507
        let priors = vec![
            GaussianDist::new(DVector::from_element(1, 1.0), dmatrix![0.01]).unwrap(),
            GaussianDist::new(DVector::from_element(1, 0.8), dmatrix![0.5]).unwrap(),
        ];
        let mut agent = FlatLinearAgent::ucb_with_priors(priors.clone(), 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(agent.act(&DVector::from_element(1, 1.0), &mut rng).unwrap(), 1);
        let mut greedy = FlatLinearAgent::ucb_with_priors(priors, 1.0, 0.0).unwrap();
        assert_eq!(greedy.act(&DVector::from_element(1, 1.0), &mut rng).unwrap(), 0);
    }

    #[test]
    fn single_latent_reduction_is_identity_for_one_latent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = fixtures::random_spec(4, 1, 2, true, &mut rng);
        let reduced = single_latent_reduction(&spec).unwrap();
        assert_eq!(reduced.mu_psi(), spec.mu_psi());
        assert_eq!(reduced.sigma_psi().matrix(), spec.sigma_psi().matrix());
        assert_eq!(reduced.mixing(), spec.mixing());

        let history = fixtures::random_history(&spec, 10, &mut rng);
        let mut a = GHierTs::new(spec.clone(), 0.0).unwrap();
        let mut b = hierts_single(&spec, 0.0).unwrap();
        for r in &history {
            a.observe(&r.x, r.action, r.reward).unwrap();
            b.observe(&r.x, r.action, r.reward).unwrap();
        }
        let x = DVector::from_vec(vec![0.2, 0.9]);
        let mut r1 = ChaCha8Rng::seed_from_u64(8);
        let mut r2 = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            assert_eq!(a.act(&x, &mut r1).unwrap(), b.act(&x, &mut r2).unwrap());
        }
    }

    #[test]
    fn single_latent_reduction_matches_prior_means() {
        let l = 4;
        let spec = HierModelSpec::isotropic(DMatrix::from_element(3, l, 1.0 / l as f64), 2, 0.7, 3.0, 1.0, 1.0)
            .unwrap();
        let reduced = single_latent_reduction(&spec).unwrap();
        for i in 0..3 {
            let original = spec.mixing_row(i) * spec.mu_psi();
            let collapsed = reduced.mixing_row(i) * reduced.mu_psi();
            assert!((original - collapsed).amax() < 1e-12);
        }
        assert!((reduced.sigma_psi().matrix()[(0, 0)] - 3.0 / l as f64).abs() < 1e-12);
    }

    #[test]
    fn observe_tracks_batch_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let spec = fixtures::random_spec(5, 2, 3, true, &mut rng);
        let history = fixtures::random_history(&spec, 100, &mut rng);
        let mut agent = GHierTs::new(spec.clone(), 0.0).unwrap();
        for r in &history {
            agent.observe(&r.x, r.action, r.reward).unwrap();
        }
        let batch = SufficientStats::from_history(5, 3, &history, spec.sigma()).unwrap();
        assert_eq!(agent.stats(), &batch);
        let expected = crate::posterior::hyper_posterior(&spec, &batch).unwrap();
        let got = agent.latent_posterior().unwrap();
        assert!((got.mean() - expected.mean()).amax() < 1e-12);
    }

    #[test]
    fn observations_on_distinct_actions_commute() {
        let spec = HierModelSpec::isotropic(dmatrix![1.0; -1.0], 2, 0.0, 1.0, 1.0, 1.0).unwrap();
        let x1 = DVector::from_vec(vec![1.0, 0.0]);
        let x2 = DVector::from_vec(vec![0.0, 1.0]);
        let mut a = GHierTs::new(spec.clone(), 0.0).unwrap();
        a.observe(&x1, 0, 1.0).unwrap();
        a.observe(&x2, 1, -1.0).unwrap();
        let mut b = GHierTs::new(spec, 0.0).unwrap();
        b.observe(&x2, 1, -1.0).unwrap();
        b.observe(&x1, 0, 1.0).unwrap();
        assert_eq!(a.stats(), b.stats());
    }

    #[test]
    fn observe_with_tight_conditional_moves_to_mle() {
        // Σ₀ ≈ 0 ties θ to ψ; a vague hyper-prior and many noiseless-ish
        // observations pull the draw to the MLE.
        let spec = HierModelSpec::new(
            DVector::zeros(1),
            SpdMatrix::scaled_identity(1, 1e6).unwrap(),
            vec![SpdMatrix::scaled_identity(1, 1e-30).unwrap(); 2],
            MixingStructure::Weights(dmatrix![1.0; -1.0]),
            1e-3,
        )
        .unwrap();
        let mut agent = GHierTs::new(spec, 0.0).unwrap();
        let x = DVector::from_element(1, 1.0);
        for _ in 0..5 {
            agent.observe(&x, 0, 2.0).unwrap();
        }
        let theta = agent.sample_parameters(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((theta[0][0] - 2.0).abs() < 1e-2);
        assert!((theta[1][0] + 2.0).abs() < 1e-2);
    }

    #[test]
    fn agent_kind_names_round_trip() {
        for kind in [
            AgentKind::GHierTs,
            AgentKind::GHierTsFa,
            AgentKind::LinTs,
            AgentKind::LinUcb { alpha: 1.0 },
            AgentKind::HierTs,
            AgentKind::IndTs,
        ] {
            assert_eq!(AgentKind::parse(kind.name(), 1.0), Some(kind));
        }
        assert_eq!(AgentKind::parse("nope", 1.0), None);
    }
}
