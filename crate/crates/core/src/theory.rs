//! Bayes regret upper bounds and the spectral facts they rely on.
//!
//! All logarithms are natural.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{max_eigenvalue, min_eigenvalue};
use crate::model::{ContextSpec, HierModelSpec};

/// Constants entering the regret bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundInputs {
    pub n: usize,
    pub delta: f64,
    pub actions: usize,
    pub latents: usize,
    pub dim: usize,
    pub sigma: f64,
    /// `max_i λ₁(Σ_{0,i})`
    pub lambda_1_0: f64,
    /// `min_i λ_d(Σ_{0,i})`
    pub lambda_d_0: f64,
    /// `λ₁(Σ_Ψ)`
    pub lambda_1_psi: f64,
    /// `max_i ‖b_i‖²`; for matrix mixing, `max_i λ₁(C_iᵀC_i)`.
    pub kappa_b: f64,
    /// Upper bound on `‖X_t‖²`.
    pub kappa_x: f64,
    /// `max_i λ₁(C_iᵀC_i)`
    pub kappa_c1: f64,
    /// `λ₁(CCᵀ)` for the stacked mixing map.
    pub kappa_c2: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.n == 0 || self.actions == 0 || self.latents == 0 || self.dim == 0 {
            return Err(Error::InvalidArgument("n, K, L and d must be positive".into()));
        }
        let positive = [
            ("sigma", self.sigma),
            ("lambda_1_0", self.lambda_1_0),
            ("lambda_d_0", self.lambda_d_0),
            ("lambda_1_psi", self.lambda_1_psi),
            ("kappa_b", self.kappa_b),
            ("kappa_x", self.kappa_x),
            ("kappa_c1", self.kappa_c1),
            ("kappa_c2", self.kappa_c2),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

impl BoundInputs {
    /// Replaces the mixing constants by values valid for any weight matrix
    /// whose rows have squared norm at most `kappa_b`. `λ₁(ΓᵀΓ) ≤ Kκ_b`
    /// covers the stacked map.
    pub fn with_weight_sup(self, kappa_b: f64) -> Self {
        Self {
            kappa_b,
            kappa_c1: kappa_b,
            kappa_c2: self.actions as f64 * kappa_b,
            ..self
        }
    }
}

/// Largest squared norm a context can have.
pub fn context_norm_bound(ctx: &ContextSpec) -> Result<f64> {
    match ctx {
        ContextSpec::UniformCube { dim, low, high } => Ok(*dim as f64 * low.abs().max(high.abs()).powi(2)),
        ContextSpec::FixedPool(pool) => {
            if pool.is_empty() {
                return Err(Error::EmptyPool);
            }
            Ok(pool.iter().map(|x| x.norm_squared()).fold(0.0, f64::max))
        }
        ContextSpec::Constant => Ok(1.0),
    }
}

pub fn bound_inputs_from_spec(spec: &HierModelSpec, ctx: &ContextSpec, n: usize, delta: f64) -> Result<BoundInputs> {
    let kappa_x = context_norm_bound(ctx)?;
    let mut lambda_1_0 = 0.0f64;
    let mut lambda_d_0 = f64::INFINITY;
    for s in spec.sigma0_all() {
        lambda_1_0 = lambda_1_0.max(max_eigenvalue(s.matrix()));
        lambda_d_0 = lambda_d_0.min(min_eigenvalue(s.matrix()));
    }
    let kappa_c1 = (0..spec.action_count())
        .map(|i| {
            let row = spec.mixing_row(i);
            max_eigenvalue(&(&row * row.transpose()))
        })
        .fold(0.0, f64::max);
    let kappa_b = match spec.mixing().weights() {
        Some(b) => b.row_iter().map(|r| r.norm_squared()).fold(0.0, f64::max),
        None => kappa_c1,
    };
    let gamma = spec.stacked_mixing();
    let inputs = BoundInputs {
        n,
        delta,
        actions: spec.action_count(),
        latents: spec.latent_count(),
        dim: spec.dim(),
        sigma: spec.sigma(),
        lambda_1_0,
        lambda_d_0,
        lambda_1_psi: max_eigenvalue(spec.sigma_psi().matrix()),
        kappa_b,
        kappa_x,
        kappa_c1,
        kappa_c2: max_eigenvalue(&(gamma.transpose() * &gamma)),
    };
    inputs.validate()?;
    Ok(inputs)
}

/// Every intermediate constant of a bound evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub c1: f64,
    pub c_psi: f64,
    pub c2: f64,
    pub r_action: f64,
    pub r_latent: f64,
    /// Square-root term.
    pub main_term: f64,
    /// Term that vanishes as `δ → 0`.
    pub delta_term: f64,
    pub bound: f64,
}

fn evaluate(inp: &BoundInputs, c_psi: f64, latent_gain: f64) -> BoundReport {
    let (k, l, d, n) = (inp.actions as f64, inp.latents as f64, inp.dim as f64, inp.n as f64);
    let s2 = inp.sigma * inp.sigma;
    let x0 = inp.kappa_x * inp.lambda_1_0;
    let c1 = x0 / (x0 / s2).ln_1p();
    let c2 = c_psi * (1.0 + x0 / s2) / (c_psi / s2).ln_1p();
    let r_action = k * d * c1 * (n * x0 / (s2 * k * d)).ln_1p();
    let r_latent = l * d * c2 * (latent_gain / inp.lambda_d_0).ln_1p();
    let main_term = (2.0 * n * (1.0 / inp.delta).ln() * (r_action + r_latent)).sqrt();
    let delta_term = (2.0 / PI * (inp.lambda_1_0 + c_psi) * inp.kappa_x).sqrt() * k * n * inp.delta;
    BoundReport {
        c1,
        c_psi,
        c2,
        r_action,
        r_latent,
        main_term,
        delta_term,
        bound: main_term + delta_term,
    }
}

/// Bound for scalar mixing weights.
pub fn regret_bound_report(inp: &BoundInputs) -> BoundReport {
    let c_psi = inp.actions as f64 * inp.kappa_x * inp.lambda_1_0.powi(2) * inp.lambda_1_psi * inp.kappa_b
        / inp.lambda_d_0.powi(2);
    evaluate(inp, c_psi, inp.actions as f64 * inp.kappa_b * inp.lambda_1_psi)
}

pub fn regret_bound(inp: &BoundInputs) -> f64 {
    regret_bound_report(inp).bound
}

/// Bound for general mixing matrices.
pub fn regret_bound_mixed_report(inp: &BoundInputs) -> BoundReport {
    let c_psi = inp.kappa_x * inp.kappa_c2 * inp.lambda_1_0.powi(2) * inp.lambda_1_psi / inp.lambda_d_0.powi(2);
    evaluate(inp, c_psi, inp.actions as f64 * inp.kappa_c1 * inp.lambda_1_psi)
}

pub fn regret_bound_mixed(inp: &BoundInputs) -> f64 {
    regret_bound_mixed_report(inp).bound
}

/// Spectra of the stacked mixing map and the weight Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport {
    /// `Γ`, `Kd × Ld`.
    pub gamma: DMatrix<f64>,
    /// `D = (b_iᵀ b_j)`, `K × K`.
    pub weight_gram: DMatrix<f64>,
    pub lambda_gamma_gamma_t: f64,
    pub lambda_gamma_t_gamma: f64,
    pub lambda_weight_gram: f64,
    pub kappa_b: f64,
    /// `K κ_b`
    pub gershgorin_bound: f64,
}

impl SpectralReport {
    /// `λ₁(ΓΓᵀ) = λ₁(D)` within `tol` and both Gram spectra below `Kκ_b`.
    pub fn holds(&self, tol: f64) -> bool {
        let slack = tol * (1.0 + self.gershgorin_bound);
        (self.lambda_gamma_gamma_t - self.lambda_weight_gram).abs() <= tol * (1.0 + self.lambda_weight_gram)
            && self.lambda_gamma_gamma_t <= self.gershgorin_bound + slack
            && self.lambda_gamma_t_gamma <= self.gershgorin_bound + slack
    }
}

pub fn spectral_checks(spec: &HierModelSpec) -> Result<SpectralReport> {
    let b = spec
        .mixing()
        .weights()
        .ok_or_else(|| Error::InvalidModel("spectral checks need scalar mixing weights".into()))?;
    let gamma = spec.stacked_mixing();
    let weight_gram = b * b.transpose();
    let kappa_b = b.row_iter().map(|r| r.norm_squared()).fold(0.0, f64::max);
    Ok(SpectralReport {
        lambda_gamma_gamma_t: max_eigenvalue(&(&gamma * gamma.transpose())),
        lambda_gamma_t_gamma: max_eigenvalue(&(gamma.transpose() * &gamma)),
        lambda_weight_gram: max_eigenvalue(&weight_gram),
        gershgorin_bound: b.nrows() as f64 * kappa_b,
        kappa_b,
        gamma,
        weight_gram,
    })
}
