//! Shared setup for the benchmarks.

use hierts_core::model::{sample_context, sample_environment};
use hierts_core::sim::SyntheticProblem;
use hierts_core::{Agent, AgentKind, HierModelSpec, HistoryRecord, ProblemSource};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Preset problem instance plus a fixed stream of contexts.
pub struct Workload {
    pub spec: HierModelSpec,
    pub contexts: Vec<DVector<f64>>,
    pub history: Vec<HistoryRecord>,
}

impl Workload {
    /// `warmup` rounds of uniformly random actions with rewards from one
    /// environment draw, and `contexts` further contexts to act on.
    pub fn preset(actions: usize, latents: usize, dim: usize, warmup: usize, contexts: usize) -> Self {
        let problem = SyntheticProblem {
            actions,
            latents,
            dim,
            ..SyntheticProblem::default()
        };
        let (spec, ctx) = problem.instance(0).expect("preset instance");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let env = sample_environment(&spec, &mut rng).expect("environment draw");
        let history = (0..warmup)
            .map(|t| {
                let x = sample_context(&ctx, &mut rng).expect("context");
                let action = t % actions;
                let reward = x.dot(&env.theta[action]);
                HistoryRecord { round: t, x, action, reward }
            })
            .collect();
        let contexts = (0..contexts).map(|_| sample_context(&ctx, &mut rng).expect("context")).collect();
        Self { spec, contexts, history }
    }

    pub fn agent(&self, kind: AgentKind) -> Box<dyn Agent> {
        let mut agent = kind.build(&self.spec, 0.0).expect("agent");
        for r in &self.history {
            agent.observe(&r.x, r.action, r.reward).expect("observe");
        }
        agent
    }
}
