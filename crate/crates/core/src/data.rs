//! Ratings ingestion, matrix factorization, clustering, and the
//! movies-as-actions problem built from item and user embeddings.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::SpdMatrix;
use crate::model::{ContextSpec, HierModelSpec, MixingStructure};
use crate::sim::{stream, ProblemSource, StreamRole};
use crate::theory::{bound_inputs_from_spec, BoundInputs};

/// Share of malformed lines above which loading fails.
pub const DEFAULT_MAX_MALFORMED: f64 = 0.01;

/// Ratings with ids reindexed densely in order of first appearance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatingsDataset {
    /// `(user index, item index, rating)`
    pub triples: Vec<(usize, usize, f64)>,
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
    /// One-based line numbers that could not be parsed.
    pub malformed: Vec<usize>,
}

impl RatingsDataset {
    pub fn user_count(&self) -> usize {
        self.user_ids.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Builds a dataset from raw `(user id, item id, rating)` triples.
    pub fn from_triples(raw: impl IntoIterator<Item = (u64, u64, f64)>) -> Self {
        let mut ds = RatingsDataset::default();
        let mut users = HashMap::new();
        let mut items = HashMap::new();
        for (u, i, r) in raw {
            ds.push(&mut users, &mut items, u, i, r);
        }
        ds
    }

    fn push(&mut self, users: &mut HashMap<u64, usize>, items: &mut HashMap<u64, usize>, u: u64, i: u64, r: f64) {
        let ui = *users.entry(u).or_insert_with(|| {
            self.user_ids.push(u);
            self.user_ids.len() - 1
        });
        let ii = *items.entry(i).or_insert_with(|| {
            self.item_ids.push(i);
            self.item_ids.len() - 1
        });
        self.triples.push((ui, ii, r));
    }
}

fn parse_line(line: &str) -> Option<(u64, u64, f64)> {
    let fields: Vec<&str> = line.trim().split("::").collect();
    if fields.len() != 3 && fields.len() != 4 {
        return None;
    }
    let user = fields[0].trim().parse().ok()?;
    let item = fields[1].trim().parse().ok()?;
    let rating: f64 = fields[2].trim().parse().ok()?;
    rating.is_finite().then_some((user, item, rating))
}

/// Parses `user::item::rating[::timestamp]` lines. Blank lines are skipped;
/// other unparsable lines are recorded, and parsing fails when they exceed
/// `max_malformed` of the non-blank lines.
pub fn parse_ratings<R: BufRead>(reader: R, max_malformed: f64) -> Result<RatingsDataset> {
    let mut ds = RatingsDataset::default();
    let mut users = HashMap::new();
    let mut items = HashMap::new();
    let mut lines = 0usize;
    for (no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        match parse_line(&line) {
            Some((u, i, r)) => ds.push(&mut users, &mut items, u, i, r),
            None => ds.malformed.push(no + 1),
        }
    }
    if lines > 0 && ds.malformed.len() as f64 > max_malformed * lines as f64 {
        return Err(Error::Format {
            line: ds.malformed[0],
            message: format!(
                "{} of {} lines are malformed (limit {:.1}%)",
                ds.malformed.len(),
                lines,
                100.0 * max_malformed
            ),
        });
    }
    Ok(ds)
}

/// Loads a ratings file with the default malformed-line limit.
pub fn load_ratings(path: &Path) -> Result<RatingsDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_ratings(std::io::BufReader::new(file), DEFAULT_MAX_MALFORMED)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlsOptions {
    pub rank: usize,
    pub reg: f64,
    pub sweeps: usize,
    pub seed: u64,
}

impl Default for AlsOptions {
    fn default() -> Self {
        Self {
            rank: 5,
            reg: 0.1,
            sweeps: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Factorization {
    pub users: Vec<DVector<f64>>,
    pub items: Vec<DVector<f64>>,
    /// Objective at initialization and after every sweep.
    pub objective: Vec<f64>,
}

impl Factorization {
    pub fn rmse(&self, ds: &RatingsDataset) -> f64 {
        let se: f64 = ds
            .triples
            .iter()
            .map(|&(u, i, r)| (r - self.users[u].dot(&self.items[i])).powi(2))
            .sum();
        (se / ds.triples.len() as f64).sqrt()
    }
}

fn als_objective(ds: &RatingsDataset, users: &[DVector<f64>], items: &[DVector<f64>], reg: f64) -> f64 {
    let fit: f64 = ds
        .triples
        .iter()
        .map(|&(u, i, r)| (r - users[u].dot(&items[i])).powi(2))
        .sum();
    let norms: f64 = users.iter().chain(items).map(|v| v.norm_squared()).sum();
    fit + reg * norms
}

/// Ridge solve for one factor given the other side's vectors.
fn ridge_update(
    rank: usize,
    reg: f64,
    entries: &[(usize, f64)],
    others: &[DVector<f64>],
) -> Result<DVector<f64>> {
    let mut a = DMatrix::identity(rank, rank) * reg;
    let mut rhs = DVector::zeros(rank);
    for &(j, r) in entries {
        a.ger(1.0, &others[j], &others[j], 1.0);
        rhs.axpy(r, &others[j], 1.0);
    }
    match SpdMatrix::new(a.clone()) {
        Ok(spd) => Ok(spd.solve(&rhs)),
        Err(_) => {
            // rank-deficient without regularization: take the minimum-norm solution
            let svd = a.svd(true, true);
            svd.solve(&rhs, 1e-12 * svd.singular_values.max().max(1.0))
                .map_err(|e| Error::DegenerateData(e.to_string()))
        }
    }
}

/// Alternating ridge regression: a user pass then an item pass per sweep.
/// Each pass solves its subproblem exactly, so the objective never increases.
pub fn factorize(ds: &RatingsDataset, opts: &AlsOptions) -> Result<Factorization> {
    if ds.is_empty() {
        return Err(Error::DegenerateData("no ratings to factorize".into()));
    }
    if opts.rank == 0 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    if !(opts.reg >= 0.0 && opts.reg.is_finite()) {
        return Err(Error::InvalidArgument(format!("regularization must be >= 0, got {}", opts.reg)));
    }
    let mut by_user = vec![Vec::new(); ds.user_count()];
    let mut by_item = vec![Vec::new(); ds.item_count()];
    for &(u, i, r) in &ds.triples {
        by_user[u].push((i, r));
        by_item[i].push((u, r));
    }
    if let Some(i) = by_item.iter().position(|v| v.is_empty()) {
        return Err(Error::DegenerateData(format!("item {} has no ratings", ds.item_ids[i])));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let scale = 1.0 / (opts.rank as f64).sqrt();
    let mut items: Vec<DVector<f64>> = (0..ds.item_count())
        .map(|_| DVector::from_fn(opts.rank, |_, _| scale * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let mut users: Vec<DVector<f64>> = vec![DVector::zeros(opts.rank); ds.user_count()];
    let mut objective = vec![als_objective(ds, &users, &items, opts.reg)];
    for _ in 0..opts.sweeps {
        for (u, entries) in by_user.iter().enumerate() {
            users[u] = ridge_update(opts.rank, opts.reg, entries, &items)?;
        }
        for (i, entries) in by_item.iter().enumerate() {
            items[i] = ridge_update(opts.rank, opts.reg, entries, &users)?;
        }
        objective.push(als_objective(ds, &users, &items, opts.reg));
    }
    Ok(Factorization {
        users,
        items,
        objective,
    })
}

#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: Vec<DVector<f64>>,
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squares after each assignment step.
    pub objective: Vec<f64>,
}

fn nearest(centroids: &[DVector<f64>], x: &DVector<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = (x - mu).norm_squared();
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding. Stops after `max_iter`
/// iterations or once no centroid moves more than `tol` relative to the
/// centroid scale. An emptied cluster is moved to the point farthest from its
/// own centroid.
pub fn kmeans(points: &[DVector<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot form {k} clusters from {} points",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points.iter().map(|x| (x - &centroids[0]).norm_squared()).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = points.len() - 1;
            for (j, &d) in dist.iter().enumerate() {
                if target < d {
                    pick = j;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (d, x) in dist.iter_mut().zip(points) {
            *d = d.min((x - &centroids[centroids.len() - 1]).norm_squared());
        }
    }

    let dim = points[0].len();
    let mut assignment = vec![0; points.len()];
    let mut objective = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut cost = 0.0;
        let mut own = vec![0.0; points.len()];
        for (j, x) in points.iter().enumerate() {
            let (c, d) = nearest(&centroids, x);
            assignment[j] = c;
            own[j] = d;
            cost += d;
        }
        objective.push(cost);

        let mut sums = vec![DVector::zeros(dim); k];
        let mut counts = vec![0usize; k];
        for (x, &c) in points.iter().zip(&assignment) {
            sums[c] += x;
            counts[c] += 1;
        }
        let mut shift: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for c in 0..k {
            let updated = if counts[c] > 0 {
                &sums[c] / counts[c] as f64
            } else {
                let far = (0..points.len())
                    .max_by(|&a, &b| own[a].total_cmp(&own[b]))
                    .expect("points are nonempty");
                own[far] = 0.0;
                points[far].clone()
            };
            shift = shift.max((&updated - &centroids[c]).norm());
            scale = scale.max(updated.norm());
            centroids[c] = updated;
        }
        if shift <= tol * (1.0 + scale) {
            break;
        }
    }
    Ok(KMeans {
        centroids,
        assignment,
        objective,
    })
}

/// Settings of the movies-as-actions problem.
#[derive(Debug, Clone, PartialEq)]
pub struct MovieLensParams {
    pub latents: usize,
    pub actions: usize,
    /// `Σ_Ψ` blocks are `scale_hyper · diag(v)`.
    pub scale_hyper: f64,
    /// `Σ_{0,i} = scale_cond · diag(v)`.
    pub scale_cond: f64,
    pub sigma: f64,
    pub kmeans_iters: usize,
    pub kmeans_tol: f64,
}

impl Default for MovieLensParams {
    fn default() -> Self {
        Self {
            latents: 5,
            actions: 100,
            scale_hyper: 0.75,
            scale_cond: 0.25,
            sigma: 1.0,
            kmeans_iters: 100,
            kmeans_tol: 1e-8,
        }
    }
}

/// Item clusters and moments; every run draws its own subset of items.
#[derive(Debug, Clone)]
pub struct MovieLensSource {
    pub items: Vec<DVector<f64>>,
    pub users: Vec<DVector<f64>>,
    pub centroids: Vec<DVector<f64>>,
    /// Mean of the item vectors.
    pub mean: DVector<f64>,
    /// Per-coordinate variance of the item vectors.
    pub variance: DVector<f64>,
    pub params: MovieLensParams,
}

impl MovieLensSource {
    /// Clusters the items with k-means seeded by `seed`.
    pub fn new(items: Vec<DVector<f64>>, users: Vec<DVector<f64>>, params: MovieLensParams, seed: u64) -> Result<Self> {
        let dim = items.first().map(|v| v.len()).ok_or_else(|| Error::DegenerateData("no item vectors".into()))?;
        if users.is_empty() {
            return Err(Error::EmptyPool);
        }
        if items.iter().chain(&users).any(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch("embedding vectors differ in length".into()));
        }
        if params.latents == 0 || params.latents > items.len() {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= L <= {} items, got L = {}",
                items.len(),
                params.latents
            )));
        }
        if params.actions == 0 || params.actions > items.len() {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= K <= {} items, got K = {}",
                items.len(),
                params.actions
            )));
        }
        if !(params.scale_hyper > 0.0 && params.scale_cond > 0.0 && params.sigma > 0.0) {
            return Err(Error::InvalidArgument("scales and sigma must be positive".into()));
        }
        let n = items.len() as f64;
        let mean = items.iter().fold(DVector::zeros(dim), |acc, v| acc + v) / n;
        let variance = items
            .iter()
            .fold(DVector::zeros(dim), |acc, v| acc + (v - &mean).map(|e| e * e))
            / n;
        if variance.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::DegenerateData("item vectors have zero variance along a coordinate".into()));
        }
        let clusters = kmeans(&items, params.latents, seed, params.kmeans_iters, params.kmeans_tol)?;
        Ok(Self {
            items,
            users,
            centroids: clusters.centroids,
            mean,
            variance,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `b_ℓ ∝ exp(-‖x - c_ℓ‖²)`, summing to one.
    pub fn mixing_weights(&self, x: &DVector<f64>) -> Vec<f64> {
        let d2: Vec<f64> = self.centroids.iter().map(|c| (x - c).norm_squared()).collect();
        // shifting by the smallest distance leaves the normalized weights unchanged
        let min = d2.iter().copied().fold(f64::INFINITY, f64::min);
        let raw: Vec<f64> = d2.iter().map(|d| (min - d).exp()).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }

    /// Model whose actions are the given items.
    pub fn model_for(&self, subset: &[usize]) -> Result<HierModelSpec> {
        let (l, d) = (self.params.latents, self.dim());
        let mut weights = DMatrix::zeros(subset.len(), l);
        for (row, &item) in subset.iter().enumerate() {
            let x = self
                .items
                .get(item)
                .ok_or(Error::ActionOutOfRange {
                    index: item,
                    count: self.items.len(),
                })?;
            for (c, w) in self.mixing_weights(x).into_iter().enumerate() {
                weights[(row, c)] = w;
            }
        }
        let mu_psi = DVector::from_iterator(l * d, (0..l).flat_map(|_| self.mean.iter().copied()));
        let hyper_diag = DVector::from_iterator(
            l * d,
            (0..l).flat_map(|_| self.variance.iter().map(|v| v * self.params.scale_hyper)),
        );
        let cond = SpdMatrix::from_diagonal(&(&self.variance * self.params.scale_cond))?;
        HierModelSpec::new(
            mu_psi,
            SpdMatrix::from_diagonal(&hyper_diag)?,
            vec![cond; subset.len()],
            MixingStructure::Weights(weights),
            self.params.sigma,
        )
    }

    pub fn context(&self) -> ContextSpec {
        ContextSpec::FixedPool(self.users.clone())
    }

    /// `K` distinct items drawn from the run's instance stream.
    pub fn draw_subset(&self, run_seed: u64) -> Vec<usize> {
        let mut rng = stream(run_seed, StreamRole::Instance);
        rand::seq::index::sample(&mut rng, self.items.len(), self.params.actions).into_vec()
    }
}

impl ProblemSource for MovieLensSource {
    fn instance(&self, run_seed: u64) -> Result<(HierModelSpec, ContextSpec)> {
        Ok((self.model_for(&self.draw_subset(run_seed))?, self.context()))
    }

    /// Weight rows lie on the simplex, so their squared norm is at most one.
    fn bound_inputs(&self, n: usize, delta: f64) -> Result<BoundInputs> {
        let (spec, ctx) = self.instance(0)?;
        Ok(bound_inputs_from_spec(&spec, &ctx, n, delta)?.with_weight_sup(1.0))
    }
}

/// One-shot construction: cluster with `seed`, then draw the subset from it.
pub fn build_movielens_model(
    items: Vec<DVector<f64>>,
    users: Vec<DVector<f64>>,
    params: MovieLensParams,
    seed: u64,
) -> Result<(HierModelSpec, ContextSpec)> {
    MovieLensSource::new(items, users, params, seed)?.instance(seed)
}

/// Synthetic embeddings: items scattered with radius `spread` around
/// `clusters` centers placed `separation` apart along distinct axes (cycling
/// when there are more clusters than coordinates), users standard normal.
pub fn planted_embeddings(
    users: usize,
    items: usize,
    dim: usize,
    clusters: usize,
    separation: f64,
    spread: f64,
    seed: u64,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<DVector<f64>> = (0..clusters)
        .map(|c| {
            let mut v = DVector::zeros(dim);
            v[c % dim] = separation * (1 + c / dim) as f64 / std::f64::consts::SQRT_2;
            v
        })
        .collect();
    let item_vecs = (0..items)
        .map(|j| {
            let noise = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
            &centers[j % clusters] + noise * (spread / (dim as f64).sqrt())
        })
        .collect();
    let user_vecs = (0..users)
        .map(|_| DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    (user_vecs, item_vecs)
}

/// Ratings `uᵀv + noise·ε` for every (user, item) pair, ids starting at 1.
pub fn ratings_from_embeddings(
    users: &[DVector<f64>],
    items: &[DVector<f64>],
    noise: f64,
    seed: u64,
) -> Vec<(u64, u64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(users.len() * items.len());
    for (u, uv) in users.iter().enumerate() {
        for (i, iv) in items.iter().enumerate() {
            let eps: f64 = rng.sample(StandardNormal);
            out.push((u as u64 + 1, i as u64 + 1, uv.dot(iv) + noise * eps));
        }
    }
    out
}
