//! Numerical self-checks of the posterior machinery against direct
//! computations. Each check draws its own random instances from a seed and
//! reports the worst discrepancy it saw.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fixtures::{random_history, random_matrix_spec, random_spec};
use crate::linalg::{relative_frobenius, symmetric_eigenvalues};
use crate::model::{HierModelSpec, MixingStructure};
use crate::posterior::{
    decomposed_marginal_posterior, factored_hyper_posterior, hyper_posterior, hyper_precision, joint_posterior_oracle,
    mab_hyper_posterior, ActionTerms, HistoryRecord, SufficientStats,
};
use crate::theory::spectral_checks;

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {}", self.name, self.detail)
    }
}

fn max_abs(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}

fn stats_of(spec: &HierModelSpec, history: &[HistoryRecord]) -> Result<SufficientStats> {
    SufficientStats::from_history(spec.action_count(), spec.dim(), history, spec.sigma())
}

fn random_instance(rng: &mut ChaCha8Rng, matrices: bool) -> (HierModelSpec, Vec<HistoryRecord>) {
    let k = rng.random_range(1..=5);
    let l = rng.random_range(1..=3);
    let d = rng.random_range(1..=3);
    let spec = if matrices {
        random_matrix_spec(k, l, d, rng)
    } else {
        random_spec(k, l, d, false, rng)
    };
    let t = rng.random_range(0..=20);
    let history = random_history(&spec, t, rng);
    (spec, history)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleEquivalence {
    pub instances: usize,
    /// Worst `max|μ̂ - μ| / (1 + ‖μ̂‖∞)`.
    pub mean_error: f64,
    /// Worst relative Frobenius error of the covariance.
    pub cov_error: f64,
}

impl OracleEquivalence {
    pub fn holds(&self, tol: f64) -> bool {
        self.mean_error <= tol && self.cov_error <= tol
    }
}

/// Compares the hierarchical marginal posterior with direct regression over
/// all action parameters, alternating weight and matrix mixing.
pub fn oracle_equivalence(instances: usize, seed: u64) -> Result<OracleEquivalence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = OracleEquivalence {
        instances,
        mean_error: 0.0,
        cov_error: 0.0,
    };
    for j in 0..instances {
        let (spec, history) = random_instance(&mut rng, j % 2 == 1);
        let oracle = joint_posterior_oracle(&spec, &history)?;
        let decomposed = decomposed_marginal_posterior(&spec, &stats_of(&spec, &history)?)?;
        let scale = 1.0 + decomposed.mean().amax();
        out.mean_error = out.mean_error.max(max_abs(decomposed.mean(), oracle.mean()) / scale);
        out.cov_error = out.cov_error.max(relative_frobenius(decomposed.cov(), oracle.cov()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingLaw {
    pub draws: usize,
    /// Frequency of each action being the argmax under two-stage sampling.
    pub hierarchical: Vec<f64>,
    /// The same frequencies under direct joint sampling.
    pub joint: Vec<f64>,
    /// Largest difference in units of its Monte Carlo standard error.
    pub max_z: f64,
}

fn argmax_blocks(theta: &DVector<f64>, x: &DVector<f64>) -> usize {
    let d = x.len();
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..theta.len() / d {
        let v = theta.rows(i * d, d).dot(x);
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Argmax frequencies of `Ψ`-then-`θ` draws against joint draws at one random
/// state (model, history and context).
pub fn sampling_law(draws: usize, seed: u64, matrices: bool) -> Result<SamplingLaw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=5);
    let l = rng.random_range(1..=3);
    let d = rng.random_range(1..=3);
    let spec = if matrices {
        random_matrix_spec(k, l, d, &mut rng)
    } else {
        random_spec(k, l, d, false, &mut rng)
    };
    let history = random_history(&spec, rng.random_range(0..=20), &mut rng);
    let x = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let stats = stats_of(&spec, &history)?;

    let hyper = hyper_posterior(&spec, &stats)?;
    let terms = (0..k)
        .map(|i| ActionTerms::for_action(&spec, &stats, i, 0.0))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<DMatrix<f64>> = (0..k).map(|i| spec.mixing_row(i)).collect();
    let joint = joint_posterior_oracle(&spec, &history)?;

    let mut hier_counts = vec![0usize; k];
    let mut joint_counts = vec![0usize; k];
    let mut theta = DVector::zeros(k * d);
    for _ in 0..draws {
        let psi = hyper.sample(&mut rng);
        for i in 0..k {
            theta.rows_mut(i * d, d).copy_from(&terms[i].sample_conditional(&(&rows[i] * &psi), &mut rng));
        }
        hier_counts[argmax_blocks(&theta, &x)] += 1;
        joint_counts[argmax_blocks(&joint.sample(&mut rng), &x)] += 1;
    }
    let n = draws as f64;
    let hierarchical: Vec<f64> = hier_counts.iter().map(|&c| c as f64 / n).collect();
    let joint: Vec<f64> = joint_counts.iter().map(|&c| c as f64 / n).collect();
    let max_z = hierarchical
        .iter()
        .zip(&joint)
        .map(|(&p, &q)| {
            let se = ((p * (1.0 - p) + q * (1.0 - q)) / n).sqrt();
            if se > 0.0 {
                (p - q).abs() / se
            } else if p == q {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    Ok(SamplingLaw {
        draws,
        hierarchical,
        joint,
        max_z,
    })
}

/// Worst absolute discrepancies of the special cases against the general
/// formulas.
#[derive(Debug, Clone, PartialEq)]
pub struct Reductions {
    /// Multi-armed closed form vs the general hyper-posterior at `d = 1`, `x ≡ 1`.
    pub mab: f64,
    /// Matrix mixing with `C = bI` vs weight mixing.
    pub matrices_as_weights: f64,
    /// Factored vs exact hyper-posterior with a single latent.
    pub factored_single_latent: f64,
    /// Factored means vs exact mean blocks with block-diagonal `Σ_Ψ`.
    pub factored_means: f64,
}

fn gaussian_gap(a: &crate::GaussianDist, b: &crate::GaussianDist) -> f64 {
    max_abs(a.mean(), b.mean()).max((a.cov() - b.cov()).amax())
}

pub fn reductions(instances: usize, seed: u64) -> Result<Reductions> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Reductions {
        mab: 0.0,
        matrices_as_weights: 0.0,
        factored_single_latent: 0.0,
        factored_means: 0.0,
    };
    for _ in 0..instances {
        let (k, l) = (rng.random_range(1..=5), rng.random_range(1..=3));
        let spec = random_spec(k, l, 1, false, &mut rng);
        let one = DVector::from_element(1, 1.0);
        let history: Vec<HistoryRecord> = random_history(&spec, rng.random_range(0..=20), &mut rng)
            .into_iter()
            .map(|r| HistoryRecord { x: one.clone(), ..r })
            .collect();
        let stats = stats_of(&spec, &history)?;
        let gap = gaussian_gap(&mab_hyper_posterior(&spec, &stats)?, &hyper_posterior(&spec, &stats)?);
        out.mab = out.mab.max(gap);

        let d = rng.random_range(1..=3);
        let spec = random_spec(k, l, d, false, &mut rng);
        let history = random_history(&spec, rng.random_range(0..=20), &mut rng);
        let stats = stats_of(&spec, &history)?;
        let b = spec.mixing().weights().expect("weight mixing").clone();
        let as_matrices = spec.with_mixing(MixingStructure::weights_as_matrices(&b, d))?;
        let gap = gaussian_gap(&hyper_posterior(&spec, &stats)?, &hyper_posterior(&as_matrices, &stats)?).max(
            gaussian_gap(
                &decomposed_marginal_posterior(&spec, &stats)?,
                &decomposed_marginal_posterior(&as_matrices, &stats)?,
            ),
        );
        out.matrices_as_weights = out.matrices_as_weights.max(gap);

        let spec = random_spec(k, 1, d, true, &mut rng);
        let history = random_history(&spec, rng.random_range(0..=20), &mut rng);
        let stats = stats_of(&spec, &history)?;
        let factored = factored_hyper_posterior(&spec, &stats)?;
        out.factored_single_latent = out
            .factored_single_latent
            .max(gaussian_gap(&factored[0], &hyper_posterior(&spec, &stats)?));

        let spec = random_spec(k, l, d, true, &mut rng);
        let history = random_history(&spec, rng.random_range(0..=20), &mut rng);
        let stats = stats_of(&spec, &history)?;
        let exact = hyper_posterior(&spec, &stats)?;
        for (j, f) in factored_hyper_posterior(&spec, &stats)?.iter().enumerate() {
            let block = exact.mean().rows(j * d, d).into_owned();
            out.factored_means = out.factored_means.max(max_abs(f.mean(), &block));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSuite {
    pub instances: usize,
    pub failures: usize,
    /// Worst `|λ₁(ΓΓᵀ) - λ₁(D)|`.
    pub identity_gap: f64,
    /// Largest `λ₁(ΓΓᵀ) / (Kκ_b)` and `λ₁(ΓᵀΓ) / (Kκ_b)`.
    pub bound_ratio: f64,
}

pub fn spectral_suite(instances: usize, seed: u64, tol: f64) -> Result<SpectralSuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SpectralSuite {
        instances,
        failures: 0,
        identity_gap: 0.0,
        bound_ratio: 0.0,
    };
    for _ in 0..instances {
        let spec = random_spec(rng.random_range(1..=8), rng.random_range(1..=4), rng.random_range(1..=3), false, &mut rng);
        let r = spectral_checks(&spec)?;
        if !r.holds(tol) {
            out.failures += 1;
        }
        out.identity_gap = out.identity_gap.max((r.lambda_gamma_gamma_t - r.lambda_weight_gram).abs());
        out.bound_ratio = out
            .bound_ratio
            .max(r.lambda_gamma_gamma_t.max(r.lambda_gamma_t_gamma) / r.gershgorin_bound);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneInformation {
    pub instances: usize,
    /// Most negative eigenvalue of any precision increment.
    pub min_eigenvalue: f64,
    /// Largest `λ₂ / λ₁` of any precision increment.
    pub rank_ratio: f64,
}

impl MonotoneInformation {
    pub fn holds(&self, psd_tol: f64, rank_tol: f64) -> bool {
        self.min_eigenvalue >= -psd_tol && self.rank_ratio <= rank_tol
    }
}

/// Appends one record to a random history and inspects the change in the
/// hyper-posterior precision.
pub fn monotone_information(instances: usize, seed: u64) -> Result<MonotoneInformation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = MonotoneInformation {
        instances,
        min_eigenvalue: f64::INFINITY,
        rank_ratio: 0.0,
    };
    for _ in 0..instances {
        let (spec, mut history) = random_instance(&mut rng, false);
        let before = hyper_precision(&spec, &stats_of(&spec, &history)?)?.precision;
        history.extend(random_history(&spec, 1, &mut rng));
        let after = hyper_precision(&spec, &stats_of(&spec, &history)?)?.precision;
        let eig = symmetric_eigenvalues(&(after - before));
        let (lambda1, lambda2) = (eig[0], eig.get(1).copied().unwrap_or(0.0));
        out.min_eigenvalue = out.min_eigenvalue.min(*eig.last().expect("nonempty spectrum"));
        if lambda1 > 0.0 {
            out.rank_ratio = out.rank_ratio.max(lambda2 / lambda1);
        }
    }
    Ok(out)
}

/// Settings of the full suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    pub oracle_instances: usize,
    pub sampling_states: usize,
    pub sampling_draws: usize,
    pub reduction_instances: usize,
    pub spectral_instances: usize,
    pub information_instances: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            oracle_instances: 200,
            sampling_states: 5,
            sampling_draws: 100_000,
            reduction_instances: 50,
            spectral_instances: 100,
            information_instances: 100,
        }
    }
}

/// Runs every check with its standard tolerance.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    let o = oracle_equivalence(opts.oracle_instances, opts.seed)?;
    out.push(CheckOutcome {
        name: "oracle equivalence",
        passed: o.holds(1e-8),
        detail: format!(
            "{} instances, mean error {:.2e}, covariance error {:.2e} (tol 1e-8)",
            o.instances, o.mean_error, o.cov_error
        ),
    });

    let mut worst_z: f64 = 0.0;
    for s in 0..opts.sampling_states {
        let law = sampling_law(opts.sampling_draws, opts.seed.wrapping_add(s as u64), s % 2 == 1)?;
        worst_z = worst_z.max(law.max_z);
    }
    out.push(CheckOutcome {
        name: "sampling law",
        passed: worst_z <= 3.0,
        detail: format!(
            "{} states x {} draws, worst argmax gap {:.2} standard errors (limit 3)",
            opts.sampling_states, opts.sampling_draws, worst_z
        ),
    });

    let r = reductions(opts.reduction_instances, opts.seed)?;
    out.push(CheckOutcome {
        name: "reductions",
        passed: r.mab <= 1e-12
            && r.matrices_as_weights <= 1e-12
            && r.factored_single_latent <= 1e-12
            && r.factored_means <= 1e-10,
        detail: format!(
            "multi-armed {:.2e}, matrices {:.2e}, factored L=1 {:.2e} (tol 1e-12); factored means {:.2e} (tol 1e-10)",
            r.mab, r.matrices_as_weights, r.factored_single_latent, r.factored_means
        ),
    });

    let s = spectral_suite(opts.spectral_instances, opts.seed, 1e-10)?;
    out.push(CheckOutcome {
        name: "spectral identities",
        passed: s.failures == 0,
        detail: format!(
            "{} instances, {} failures, identity gap {:.2e}, worst bound ratio {:.3}",
            s.instances, s.failures, s.identity_gap, s.bound_ratio
        ),
    });

    let m = monotone_information(opts.information_instances, opts.seed)?;
    out.push(CheckOutcome {
        name: "monotone information",
        passed: m.holds(1e-10, 1e-8),
        detail: format!(
            "{} appends, min eigenvalue {:.2e}, worst second/first eigenvalue {:.2e}",
            m.instances, m.min_eigenvalue, m.rank_ratio
        ),
    });
    Ok(out)
}
