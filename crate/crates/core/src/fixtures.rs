//! Random problem instances for property checks, the self-test, and benches.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::linalg::{block_diag, SpdMatrix};
use crate::model::{HierModelSpec, MixingStructure};
use crate::posterior::HistoryRecord;

/// `AAᵀ + ridge·I` with `A` uniform on `[-1, 1]`.
pub fn random_spd<R: Rng + ?Sized>(n: usize, ridge: f64, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * ridge
}

fn uniform_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Random weight-mixing spec. With `block_diagonal_psi` the hyper-prior has no
/// cross-latent covariance.
pub fn random_spec<R: Rng + ?Sized>(
    actions: usize,
    latents: usize,
    dim: usize,
    block_diagonal_psi: bool,
    rng: &mut R,
) -> HierModelSpec {
    let weights = uniform_matrix(actions, latents, rng);
    random_spec_with(MixingStructure::Weights(weights), dim, block_diagonal_psi, rng)
}

/// Random spec whose mixing matrices `C_{i,ℓ}` are dense.
pub fn random_matrix_spec<R: Rng + ?Sized>(actions: usize, latents: usize, dim: usize, rng: &mut R) -> HierModelSpec {
    let mixing = MixingStructure::Matrices(
        (0..actions)
            .map(|_| (0..latents).map(|_| uniform_matrix(dim, dim, rng)).collect())
            .collect(),
    );
    random_spec_with(mixing, dim, false, rng)
}

fn random_spec_with<R: Rng + ?Sized>(
    mixing: MixingStructure,
    dim: usize,
    block_diagonal_psi: bool,
    rng: &mut R,
) -> HierModelSpec {
    let (actions, latents) = (mixing.action_count(), mixing.latent_count());
    let ld = latents * dim;
    let sigma_psi = if block_diagonal_psi {
        block_diag(&(0..latents).map(|_| random_spd(dim, 0.3, rng)).collect::<Vec<_>>())
    } else {
        random_spd(ld, 0.3, rng)
    };
    let sigma0 = (0..actions)
        .map(|_| SpdMatrix::new(random_spd(dim, 0.2, rng)).expect("ridge keeps it PD"))
        .collect();
    let mu_psi = DVector::from_fn(ld, |_, _| rng.random_range(-1.0..1.0));
    let sigma = rng.random_range(0.5..1.5);
    HierModelSpec::new(
        mu_psi,
        SpdMatrix::new(sigma_psi).expect("ridge keeps it PD"),
        sigma0,
        mixing,
        sigma,
    )
    .expect("consistent dimensions")
}

/// `len` records with uniform contexts, uniform actions and arbitrary rewards.
pub fn random_history<R: Rng + ?Sized>(spec: &HierModelSpec, len: usize, rng: &mut R) -> Vec<HistoryRecord> {
    (0..len)
        .map(|t| HistoryRecord {
            round: t + 1,
            x: DVector::from_fn(spec.dim(), |_, _| rng.random_range(-1.0..1.0)),
            action: rng.random_range(0..spec.action_count()),
            reward: rng.random_range(-3.0..3.0),
        })
        .collect()
}
