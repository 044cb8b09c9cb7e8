//! The subcommands, callable without going through the binary.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use hierts_core::checks::{run_suite, CheckOutcome, SuiteOptions};
use hierts_core::data::{
    factorize, kmeans, parse_ratings, planted_embeddings, AlsOptions, MovieLensParams, MovieLensSource,
};
use hierts_core::sim::{sweep, FixedProblem, SweepJob, SyntheticProblem};
use hierts_core::theory::{regret_bound_report, BoundInputs, BoundReport};
use hierts_core::{AggregateCurve, ContextSpec, HierModelSpec, ProblemSource};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::{ExperimentConfig, MovieLensSection, Preset};
use crate::error::{CliError, Result};
use crate::output::{self, Embeddings};

/// One point of an experiment grid.
pub struct Experiment {
    pub label: String,
    pub source: Arc<dyn ProblemSource>,
}

fn synthetic_source(cfg: &ExperimentConfig, actions: usize, dim: usize, latents: usize) -> Result<Arc<dyn ProblemSource>> {
    let m = &cfg.model;
    let ctx = ContextSpec::UniformCube {
        dim,
        low: m.context_low,
        high: m.context_high,
    };
    match cfg.preset {
        Preset::Custom => {
            let rows = m.weights.as_ref().expect("validated");
            let weights = DMatrix::from_fn(actions, latents, |i, l| rows[i][l]);
            let spec = HierModelSpec::isotropic(weights, dim, m.prior_mean, m.hyper_var, m.action_var, m.sigma)?;
            Ok(Arc::new(FixedProblem { spec, ctx }))
        }
        _ => {
            let p = SyntheticProblem {
                actions,
                latents,
                dim,
                mean: m.prior_mean,
                psi_var: m.hyper_var,
                action_var: m.action_var,
                sigma: m.sigma,
                weight_low: m.weight_low,
                weight_high: m.weight_high,
                ctx,
            };
            p.validate()?;
            Ok(Arc::new(p))
        }
    }
}

/// Loads the configured embeddings, or plants them.
pub fn load_embeddings(ml: &MovieLensSection) -> Result<Embeddings> {
    if let Some(p) = &ml.planted {
        let (users, items) = planted_embeddings(p.users, p.items, p.dim, p.clusters, p.separation, p.spread, p.seed);
        return Ok(Embeddings {
            user_ids: (1..=users.len() as u64).collect(),
            users,
            item_ids: (1..=items.len() as u64).collect(),
            items,
        });
    }
    let path = ml.embeddings.as_ref().expect("validated");
    output::read_embeddings(path)
}

fn movielens_source(ml: &MovieLensSection, emb: &Embeddings, actions: usize, latents: usize) -> Result<Arc<dyn ProblemSource>> {
    let params = MovieLensParams {
        latents,
        actions,
        scale_hyper: ml.scale_hyper,
        scale_cond: ml.scale_cond,
        sigma: ml.sigma,
        kmeans_iters: ml.kmeans_iters,
        kmeans_tol: ml.kmeans_tol,
    };
    let source = MovieLensSource::new(emb.items.clone(), emb.users.clone(), params, ml.cluster_seed)?;
    Ok(Arc::new(source))
}

fn or_base(values: &[usize], base: usize) -> Vec<usize> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// The problems of a config: its base point, or with `grid` every point of
/// its `[sweep]` table.
pub fn experiments(cfg: &ExperimentConfig, grid: bool) -> Result<Vec<Experiment>> {
    let sweep = cfg.sweep.clone().filter(|_| grid).unwrap_or_default();
    let mut out = Vec::new();
    match cfg.preset {
        Preset::Movielens => {
            let ml = cfg.movielens.as_ref().expect("validated");
            let emb = load_embeddings(ml)?;
            for &k in &or_base(&sweep.actions, ml.actions) {
                for &l in &or_base(&sweep.latents, ml.latents) {
                    out.push(Experiment {
                        label: format!("K{k}-L{l}"),
                        source: movielens_source(ml, &emb, k, l)?,
                    });
                }
            }
        }
        Preset::Synthetic | Preset::Custom => {
            let m = &cfg.model;
            for &k in &or_base(&sweep.actions, m.actions) {
                for &d in &or_base(&sweep.dim, m.dim) {
                    for &l in &or_base(&sweep.latents, m.latents) {
                        out.push(Experiment {
                            label: format!("K{k}-d{d}-L{l}"),
                            source: synthetic_source(cfg, k, d, l)?,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Result of one experiment of a `run` or `sweep`.
pub struct Outcome {
    pub label: String,
    pub csv: PathBuf,
    pub curves: Result<Vec<AggregateCurve>>,
}

#[derive(Serialize)]
struct ManifestInfo {
    command: String,
    version: String,
    config_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    embeddings_sha256: Option<String>,
    run_seeds: Vec<u64>,
    outputs: Vec<String>,
    failed: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    manifest: ManifestInfo,
    config: &'a ExperimentConfig,
}

pub fn manifest_path(cfg: &ExperimentConfig) -> PathBuf {
    output::with_suffix(&cfg.out, ".manifest.toml")
}

/// Runs the experiments of `cfg` and writes one CSV (and chart) per
/// experiment plus a manifest. `grid` selects sweep behavior.
pub fn run_experiments(cfg: &ExperimentConfig, grid: bool) -> Result<Vec<Outcome>> {
    let command = if grid { "sweep" } else { "run" };
    let experiments = experiments(cfg, grid)?;
    let agents = cfg.agent_kinds()?;
    let jobs: Vec<SweepJob> = experiments
        .iter()
        .map(|e| SweepJob {
            label: e.label.clone(),
            source: Arc::clone(&e.source),
            agents: agents.clone(),
            horizon: cfg.horizon,
            runs: cfg.runs,
            base_seed: cfg.seed,
            jitter: cfg.jitter,
        })
        .collect();
    let results = sweep(&jobs, cfg.parallelism)?;

    let mut outcomes = Vec::new();
    let mut written = Vec::new();
    let mut failed = Vec::new();
    for (e, result) in experiments.into_iter().zip(results) {
        let stem = if grid {
            format!("{}-{}", cfg.out, e.label)
        } else {
            cfg.out.clone()
        };
        let csv = output::with_suffix(&stem, ".csv");
        match &result {
            Ok(curves) => {
                output::write_file(&csv, &output::curves_to_csv(curves)?)?;
                written.push(csv.display().to_string());
                if cfg.svg {
                    let svg = output::with_suffix(&stem, ".svg");
                    output::write_file(&svg, &output::render_svg(curves, &e.label)?)?;
                    written.push(svg.display().to_string());
                }
            }
            Err(_) => failed.push(e.label.clone()),
        }
        outcomes.push(Outcome {
            label: e.label,
            csv,
            curves: result.map_err(CliError::from),
        });
    }

    let config_text = toml::to_string(cfg).map_err(|e| CliError::Input(e.to_string()))?;
    let embeddings_sha256 = match cfg.movielens.as_ref().and_then(|m| m.embeddings.as_ref()) {
        Some(path) => Some(output::sha256_hex(&std::fs::read(path).map_err(|e| {
            CliError::Io(format!("{}: {e}", path.display()))
        })?)),
        None => None,
    };
    let manifest = Manifest {
        manifest: ManifestInfo {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: output::sha256_hex(config_text.as_bytes()),
            embeddings_sha256,
            run_seeds: (0..cfg.runs as u64).map(|r| cfg.seed + r).collect(),
            outputs: written,
            failed,
        },
        config: cfg,
    };
    let text = toml::to_string(&manifest).map_err(|e| CliError::Input(e.to_string()))?;
    output::write_file(&manifest_path(cfg), &format!("# rerun with: hierts {command} <this file>\n{text}"))?;
    Ok(outcomes)
}

/// Bound constants of the config's base problem and the resulting bound.
pub fn bound(cfg: &ExperimentConfig, delta: Option<f64>) -> Result<(BoundInputs, BoundReport)> {
    let exp = experiments(cfg, false)?.pop().expect("one base experiment");
    let delta = delta.unwrap_or(1.0 / cfg.horizon as f64);
    let inputs = exp.source.bound_inputs(cfg.horizon, delta)?;
    let report = regret_bound_report(&inputs);
    Ok((inputs, report))
}

pub fn format_bound(inputs: &BoundInputs, r: &BoundReport) -> String {
    let mut lines = vec![
        format!("n = {}", inputs.n),
        format!("delta = {}", inputs.delta),
        format!("actions = {}", inputs.actions),
        format!("latents = {}", inputs.latents),
        format!("dim = {}", inputs.dim),
        format!("sigma = {}", inputs.sigma),
        format!("lambda_1_0 = {}", inputs.lambda_1_0),
        format!("lambda_d_0 = {}", inputs.lambda_d_0),
        format!("lambda_1_psi = {}", inputs.lambda_1_psi),
        format!("kappa_b = {}", inputs.kappa_b),
        format!("kappa_x = {}", inputs.kappa_x),
    ];
    lines.extend([
        format!("c1 = {}", r.c1),
        format!("c_psi = {}", r.c_psi),
        format!("c2 = {}", r.c2),
        format!("r_action = {}", r.r_action),
        format!("r_latent = {}", r.r_latent),
        format!("main_term = {}", r.main_term),
        format!("delta_term = {}", r.delta_term),
        format!("bound = {}", r.bound),
    ]);
    lines.join("\n") + "\n"
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    pub rank: usize,
    pub clusters: usize,
    pub reg: f64,
    pub sweeps: usize,
    pub seed: u64,
    pub max_malformed: f64,
    /// Actions per run in the generated config; at most 100 by default.
    pub actions: Option<usize>,
    /// Prefix of the embeddings CSV and the generated config.
    pub out: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestSummary {
    pub users: usize,
    pub items: usize,
    pub ratings: usize,
    pub malformed: Vec<usize>,
    pub rmse: f64,
    pub objective: Vec<f64>,
    pub cluster_sizes: Vec<usize>,
    pub embeddings: PathBuf,
    pub config: PathBuf,
}

/// Factorizes a ratings file, clusters the items, and writes the embeddings
/// together with a ready-to-run config.
pub fn ingest(ratings: &Path, opts: &IngestOptions) -> Result<IngestSummary> {
    let file = std::fs::File::open(ratings).map_err(|e| CliError::Io(format!("{}: {e}", ratings.display())))?;
    let ds = parse_ratings(std::io::BufReader::new(file), opts.max_malformed)?;
    let fit = factorize(
        &ds,
        &AlsOptions {
            rank: opts.rank,
            reg: opts.reg,
            sweeps: opts.sweeps,
            seed: opts.seed,
        },
    )?;
    let clusters = kmeans(&fit.items, opts.clusters, opts.seed, 100, 1e-8)?;
    let mut cluster_sizes = vec![0; opts.clusters];
    for &c in &clusters.assignment {
        cluster_sizes[c] += 1;
    }

    let embeddings = output::with_suffix(&opts.out, ".embeddings.csv");
    let emb = Embeddings {
        user_ids: ds.user_ids.clone(),
        users: fit.users.clone(),
        item_ids: ds.item_ids.clone(),
        items: fit.items.clone(),
    };
    output::write_file(&embeddings, &output::embeddings_to_csv(&emb))?;

    let config = output::with_suffix(&opts.out, ".toml");
    let mut cfg = ExperimentConfig {
        preset: Preset::Movielens,
        out: opts.out.clone(),
        ..ExperimentConfig::default()
    };
    cfg.movielens = Some(MovieLensSection {
        embeddings: Some(PathBuf::from(
            embeddings.file_name().expect("prefix has a file name"),
        )),
        latents: opts.clusters,
        actions: opts.actions.unwrap_or(ds.item_count().min(100)),
        cluster_seed: opts.seed,
        ..MovieLensSection::default()
    });
    cfg.validate()?;
    let text = toml::to_string(&cfg).map_err(|e| CliError::Input(e.to_string()))?;
    output::write_file(&config, &text)?;

    let rmse = fit.rmse(&ds);
    Ok(IngestSummary {
        users: ds.user_count(),
        items: ds.item_count(),
        ratings: ds.triples.len(),
        malformed: ds.malformed,
        rmse,
        objective: fit.objective,
        cluster_sizes,
        embeddings,
        config,
    })
}

/// Runs the numerical self-checks. `quick` shrinks every check.
pub fn selftest(seed: u64, quick: bool) -> Result<Vec<CheckOutcome>> {
    let opts = if quick {
        SuiteOptions {
            seed,
            oracle_instances: 40,
            sampling_states: 2,
            sampling_draws: 10_000,
            reduction_instances: 10,
            spectral_instances: 20,
            information_instances: 20,
        }
    } else {
        SuiteOptions {
            seed,
            ..SuiteOptions::default()
        }
    };
    Ok(run_suite(&opts)?)
}
