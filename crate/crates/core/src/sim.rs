//! Episodes, Bayes regret curves and parallel sweeps.
//!
//! Run `r` of an experiment uses the seed `base_seed + r`. Every random
//! quantity of a run comes from its own ChaCha stream keyed by that seed and a
//! [`StreamRole`], so all agents compared on a run face the same weights,
//! environment, contexts and reward noise.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::agents::{Agent, AgentKind};
use crate::error::{Error, Result};
use crate::model::{best_action, sample_context, sample_environment, sample_reward, ContextSpec, EnvDraw, HierModelSpec};
use crate::theory::{bound_inputs_from_spec, BoundInputs};

/// Independent random streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamRole {
    /// Per-run problem construction (mixing weights, action subsets).
    Instance = 0,
    Env = 1,
    Context = 2,
    Reward = 3,
    Agent = 4,
}

pub fn stream(seed: u64, role: StreamRole) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(role as u64);
    rng
}

pub fn run_seed(base_seed: u64, run: usize) -> u64 {
    base_seed.wrapping_add(run as u64)
}

/// Regret of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretTrace {
    pub per_round: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub seed: u64,
}

/// Draws the environment from the seed's stream, then plays `n` rounds.
pub fn run_episode(
    spec: &HierModelSpec,
    ctx: &ContextSpec,
    agent: &mut dyn Agent,
    n: usize,
    seed: u64,
) -> Result<RegretTrace> {
    let env = sample_environment(spec, &mut stream(seed, StreamRole::Env))?;
    run_episode_with_env(&env, spec.sigma(), ctx, agent, n, seed)
}

/// Plays `n` rounds against fixed parameters. Regret is measured on mean
/// rewards.
pub fn run_episode_with_env(
    env: &EnvDraw,
    sigma: f64,
    ctx: &ContextSpec,
    agent: &mut dyn Agent,
    n: usize,
    seed: u64,
) -> Result<RegretTrace> {
    if n == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    ctx.validate()?;
    let mut ctx_rng = stream(seed, StreamRole::Context);
    let mut reward_rng = stream(seed, StreamRole::Reward);
    let mut agent_rng = stream(seed, StreamRole::Agent);
    agent.begin_episode(env);

    let mut per_round = Vec::with_capacity(n);
    let mut cumulative = Vec::with_capacity(n);
    let mut total = 0.0;
    for _ in 0..n {
        let x = sample_context(ctx, &mut ctx_rng)?;
        let action = agent.act(&x, &mut agent_rng)?;
        if action >= env.theta.len() {
            return Err(Error::ActionOutOfRange {
                index: action,
                count: env.theta.len(),
            });
        }
        let (_, best) = best_action(&env.theta, &x);
        let regret = best - env.mean_reward(&x, action);
        let y = sample_reward(&env.theta[action], &x, sigma, &mut reward_rng);
        agent.observe(&x, action, y)?;
        total += regret;
        per_round.push(regret);
        cumulative.push(total);
    }
    Ok(RegretTrace {
        per_round,
        cumulative,
        seed,
    })
}

/// Mean cumulative regret across runs, with standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateCurve {
    pub agent: String,
    pub mean: Vec<f64>,
    /// Sample standard deviation over `sqrt(runs)`; zero for a single run.
    pub stderr: Vec<f64>,
    pub runs: usize,
}

impl AggregateCurve {
    pub fn from_traces(agent: &str, traces: &[RegretTrace]) -> Result<Self> {
        let first = traces
            .first()
            .ok_or_else(|| Error::InvalidArgument("no traces to aggregate".into()))?;
        let n = first.cumulative.len();
        if traces.iter().any(|t| t.cumulative.len() != n) {
            return Err(Error::DimensionMismatch("traces have different horizons".into()));
        }
        let runs = traces.len();
        let r = runs as f64;
        let mut mean = vec![0.0; n];
        let mut stderr = vec![0.0; n];
        for t in 0..n {
            // offset by the first run so identical runs give exactly zero spread
            let x0 = first.cumulative[t];
            let m = x0 + traces.iter().map(|tr| tr.cumulative[t] - x0).sum::<f64>() / r;
            mean[t] = m;
            if runs > 1 {
                let ss = traces.iter().map(|tr| (tr.cumulative[t] - m).powi(2)).sum::<f64>();
                stderr[t] = (ss / (r - 1.0)).sqrt() / r.sqrt();
            }
        }
        Ok(Self {
            agent: agent.to_string(),
            mean,
            stderr,
            runs,
        })
    }

    pub fn horizon(&self) -> usize {
        self.mean.len()
    }

    pub fn final_mean(&self) -> f64 {
        self.mean.last().copied().unwrap_or(0.0)
    }
}

/// Produces the (model, context) pair a run is played on.
pub trait ProblemSource: Send + Sync {
    fn instance(&self, run_seed: u64) -> Result<(HierModelSpec, ContextSpec)>;

    /// Bound constants valid for every instance. The default reads them off
    /// the instance of seed 0, which is exact when instances do not vary.
    fn bound_inputs(&self, n: usize, delta: f64) -> Result<BoundInputs> {
        let (spec, ctx) = self.instance(0)?;
        bound_inputs_from_spec(&spec, &ctx, n, delta)
    }
}

/// The same problem on every run.
#[derive(Debug, Clone)]
pub struct FixedProblem {
    pub spec: HierModelSpec,
    pub ctx: ContextSpec,
}

impl ProblemSource for FixedProblem {
    fn instance(&self, _run_seed: u64) -> Result<(HierModelSpec, ContextSpec)> {
        Ok((self.spec.clone(), self.ctx.clone()))
    }
}

/// Isotropic synthetic problem with weights drawn uniformly per run.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticProblem {
    pub actions: usize,
    pub latents: usize,
    pub dim: usize,
    /// Common entry of `μ_Ψ`.
    pub mean: f64,
    /// `Σ_Ψ = psi_var · I`
    pub psi_var: f64,
    /// `Σ_{0,i} = action_var · I`
    pub action_var: f64,
    pub sigma: f64,
    pub weight_low: f64,
    pub weight_high: f64,
    pub ctx: ContextSpec,
}

impl Default for SyntheticProblem {
    fn default() -> Self {
        Self {
            actions: 20,
            latents: 5,
            dim: 2,
            mean: 0.0,
            psi_var: 3.0,
            action_var: 1.0,
            sigma: 1.0,
            weight_low: -1.0,
            weight_high: 1.0,
            ctx: ContextSpec::UniformCube {
                dim: 2,
                low: -1.0,
                high: 1.0,
            },
        }
    }
}

impl SyntheticProblem {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight_low < self.weight_high) {
            return Err(Error::InvalidArgument("weight range must satisfy low < high".into()));
        }
        if self.ctx.dim() != Some(self.dim) {
            return Err(Error::DimensionMismatch("context dimension differs from model dimension".into()));
        }
        self.ctx.validate()
    }
}

impl ProblemSource for SyntheticProblem {
    fn instance(&self, run_seed: u64) -> Result<(HierModelSpec, ContextSpec)> {
        self.validate()?;
        let mut rng = stream(run_seed, StreamRole::Instance);
        let weights = DMatrix::from_fn(self.actions, self.latents, |_, _| {
            rng.random_range(self.weight_low..self.weight_high)
        });
        let spec = HierModelSpec::isotropic(weights, self.dim, self.mean, self.psi_var, self.action_var, self.sigma)?;
        Ok((spec, self.ctx.clone()))
    }

    /// Uses the largest squared row norm any weight draw can reach,
    /// `L · max(low², high²)`.
    fn bound_inputs(&self, n: usize, delta: f64) -> Result<BoundInputs> {
        let (spec, ctx) = self.instance(0)?;
        let extreme = self.weight_low.abs().max(self.weight_high.abs());
        Ok(bound_inputs_from_spec(&spec, &ctx, n, delta)?.with_weight_sup(self.latents as f64 * extreme * extreme))
    }
}

/// One episode of `kind` on run `run` of `source`.
pub fn run_single(
    source: &dyn ProblemSource,
    kind: AgentKind,
    n: usize,
    base_seed: u64,
    run: usize,
    jitter: f64,
) -> Result<RegretTrace> {
    let seed = run_seed(base_seed, run);
    let (spec, ctx) = source.instance(seed)?;
    let mut agent = kind.build(&spec, jitter)?;
    run_episode(&spec, &ctx, agent.as_mut(), n, seed)
}

/// Serial Bayes regret estimate for one agent.
pub fn bayes_regret(
    source: &dyn ProblemSource,
    kind: AgentKind,
    n: usize,
    runs: usize,
    base_seed: u64,
    jitter: f64,
) -> Result<AggregateCurve> {
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be at least 1".into()));
    }
    let traces = (0..runs)
        .map(|r| run_single(source, kind, n, base_seed, r, jitter))
        .collect::<Result<Vec<_>>>()?;
    AggregateCurve::from_traces(kind.name(), &traces)
}

/// One experiment of a sweep: every agent on the same runs.
#[derive(Clone)]
pub struct SweepJob {
    pub label: String,
    pub source: Arc<dyn ProblemSource>,
    pub agents: Vec<AgentKind>,
    pub horizon: usize,
    pub runs: usize,
    pub base_seed: u64,
    pub jitter: f64,
}

/// Runs every (job, agent, run) unit on a pool of `parallelism` threads.
/// Results keep the job and agent order; a failing job does not affect the
/// others. Output does not depend on `parallelism`.
pub fn sweep(jobs: &[SweepJob], parallelism: usize) -> Result<Vec<Result<Vec<AggregateCurve>>>> {
    if jobs.is_empty() {
        return Ok(Vec::new());
    }
    let units: Vec<(usize, usize, usize)> = jobs
        .iter()
        .enumerate()
        .flat_map(|(j, job)| {
            (0..job.agents.len()).flat_map(move |a| (0..job.runs).map(move |r| (j, a, r)))
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}")))?;
    let traces: Vec<Result<RegretTrace>> = pool.install(|| {
        units
            .par_iter()
            .map(|&(j, a, r)| {
                let job = &jobs[j];
                run_single(job.source.as_ref(), job.agents[a], job.horizon, job.base_seed, r, job.jitter)
            })
            .collect()
    });

    let mut traces = traces.into_iter();
    let mut out = Vec::with_capacity(jobs.len());
    for job in jobs {
        let mut curves = Vec::with_capacity(job.agents.len());
        let mut failure = None;
        if job.runs == 0 {
            failure = Some(Error::InvalidArgument("runs must be at least 1".into()));
        }
        for kind in &job.agents {
            let batch: Vec<Result<RegretTrace>> = traces.by_ref().take(job.runs).collect();
            if failure.is_some() {
                continue;
            }
            match batch.into_iter().collect::<Result<Vec<_>>>() {
                Ok(ts) => match AggregateCurve::from_traces(kind.name(), &ts) {
                    Ok(c) => curves.push(c),
                    Err(e) => failure = Some(e),
                },
                Err(e) => failure = Some(e),
            }
        }
        if job.agents.is_empty() {
            failure = Some(Error::InvalidArgument(format!("job '{}' has no agents", job.label)));
        }
        out.push(match failure {
            Some(e) => Err(e),
            None => Ok(curves),
        });
    }
    Ok(out)
}

/// Deterministic policy used in tests: always plays the action its fixed
/// beliefs rank highest.
#[derive(Debug, Clone)]
pub struct FrozenGreedy {
    pub believed: Vec<DVector<f64>>,
}

impl Agent for FrozenGreedy {
    fn name(&self) -> &str {
        "Greedy"
    }

    fn act(&mut self, x: &DVector<f64>, _rng: &mut dyn rand::RngCore) -> Result<usize> {
        Ok(best_action(&self.believed, x).0)
    }

    fn observe(&mut self, _x: &DVector<f64>, _action: usize, _reward: f64) -> Result<()> {
        Ok(())
    }
}
