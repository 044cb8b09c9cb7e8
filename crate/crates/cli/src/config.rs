//! Experiment configuration files.
//!
//! Configs are TOML documents. Top-level keys hold the experiment settings;
//! the `[model]`, `[movielens]` and `[sweep]` tables hold problem settings.
//! Every key is optional except where a preset needs it, and unknown keys
//! are rejected. A manifest written by `run` or `sweep` is also accepted: its
//! `[config]` table is the effective configuration of that invocation.

use std::path::{Path, PathBuf};

use hierts_core::AgentKind;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{}{}", .line.map(|l| format!("line {l}: ")).unwrap_or_default(), .message)]
    Parse {
        line: Option<usize>,
        /// The offending key, when the problem is an unknown or misplaced key.
        key: Option<String>,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Weights drawn uniformly per run.
    Synthetic,
    /// Problems built from item and user embeddings.
    Movielens,
    /// Isotropic model with weights given in `[model]`.
    Custom,
}

fn default_horizon() -> usize {
    2000
}
fn default_runs() -> usize {
    20
}
fn default_one() -> usize {
    1
}
fn default_alpha() -> f64 {
    hierts_core::AgentKind::DEFAULT_LINUCB_ALPHA
}
fn default_out() -> String {
    "results/experiment".into()
}
fn default_agents() -> Vec<String> {
    ["G-HierTS", "G-HierTS-Fa", "LinTS", "LinUCB", "HierTS"].map(String::from).to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_preset")]
    pub preset: Preset,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Run `r` uses seed `seed + r`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_one")]
    pub parallelism: usize,
    #[serde(default = "default_agents")]
    pub agents: Vec<String>,
    /// LinUCB confidence width.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Relative diagonal jitter for ill-conditioned covariances.
    #[serde(default)]
    pub jitter: f64,
    /// Output path prefix.
    #[serde(default = "default_out")]
    pub out: String,
    #[serde(default)]
    pub svg: bool,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub movielens: Option<MovieLensSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

fn default_preset() -> Preset {
    Preset::Synthetic
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("every key has a default")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub actions: usize,
    pub latents: usize,
    pub dim: usize,
    pub sigma: f64,
    /// Every entry of the hyper-prior mean.
    pub prior_mean: f64,
    /// Hyper-prior covariance `hyper_var · I`.
    pub hyper_var: f64,
    /// Conditional covariance `action_var · I`.
    pub action_var: f64,
    pub weight_low: f64,
    pub weight_high: f64,
    pub context_low: f64,
    pub context_high: f64,
    /// Fixed `K × L` weights of the custom preset, one row per action.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<Vec<f64>>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            actions: 20,
            latents: 5,
            dim: 2,
            sigma: 1.0,
            prior_mean: 0.0,
            hyper_var: 3.0,
            action_var: 1.0,
            weight_low: -1.0,
            weight_high: 1.0,
            context_low: -1.0,
            context_high: 1.0,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MovieLensSection {
    /// Embeddings CSV written by `ingest`. Relative paths are resolved
    /// against the directory of the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    /// Synthetic embeddings used instead of a file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planted: Option<PlantedSection>,
    pub latents: usize,
    pub actions: usize,
    pub scale_hyper: f64,
    pub scale_cond: f64,
    pub sigma: f64,
    /// Seed of the k-means initialization.
    pub cluster_seed: u64,
    pub kmeans_iters: usize,
    pub kmeans_tol: f64,
}

impl Default for MovieLensSection {
    fn default() -> Self {
        let p = hierts_core::data::MovieLensParams::default();
        Self {
            embeddings: None,
            planted: None,
            latents: p.latents,
            actions: p.actions,
            scale_hyper: p.scale_hyper,
            scale_cond: p.scale_cond,
            sigma: p.sigma,
            cluster_seed: 0,
            kmeans_iters: p.kmeans_iters,
            kmeans_tol: p.kmeans_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantedSection {
    pub users: usize,
    pub items: usize,
    pub dim: usize,
    pub clusters: usize,
    /// Distance scale between cluster centers.
    pub separation: f64,
    /// Radius of each cluster.
    pub spread: f64,
    pub seed: u64,
}

impl Default for PlantedSection {
    fn default() -> Self {
        Self {
            users: 100,
            items: 100,
            dim: 2,
            clusters: 2,
            separation: 10.0,
            spread: 0.1,
            seed: 0,
        }
    }
}

/// Grid swept by `sweep`. An empty list keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub actions: Vec<usize>,
    pub dim: Vec<usize>,
    pub latents: Vec<usize>,
}

/// Values given on the command line, applied over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub horizon: Option<usize>,
    pub parallelism: Option<usize>,
    pub svg: bool,
    pub out: Option<String>,
    pub alpha: Option<f64>,
    pub jitter: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    #[allow(dead_code)]
    manifest: toml::Table,
    config: ExperimentConfig,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn parse_error(text: &str, e: toml::de::Error) -> ConfigError {
    let message = e.message().to_string();
    let key = message
        .strip_prefix("unknown field `")
        .and_then(|rest| rest.split('`').next())
        .map(String::from);
    ConfigError::Parse {
        line: e.span().map(|s| line_of(text, s.start)),
        key,
        message,
    }
}

impl ExperimentConfig {
    /// Parses and validates a config or manifest document.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = toml::from_str(text).map_err(|e| parse_error(text, e))?;
        let cfg = if table.contains_key("manifest") {
            toml::from_str::<ManifestFile>(text).map_err(|e| parse_error(text, e))?.config
        } else {
            toml::from_str::<ExperimentConfig>(text).map_err(|e| parse_error(text, e))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves relative data paths against its directory.
    pub fn load(path: &Path) -> Result<Self, crate::error::CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| crate::error::CliError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(ml) = cfg.movielens.as_mut() {
            if let Some(file) = ml.embeddings.as_mut() {
                if file.is_relative() {
                    *file = path.parent().unwrap_or(Path::new("")).join(&*file);
                }
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.runs {
            self.runs = v;
        }
        if let Some(v) = o.horizon {
            self.horizon = v;
        }
        if let Some(v) = o.parallelism {
            self.parallelism = v;
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = o.alpha {
            self.alpha = v;
        }
        if let Some(v) = o.jitter {
            self.jitter = v;
        }
        self.svg |= o.svg;
        self.validate()
    }

    pub fn agent_kinds(&self) -> Result<Vec<AgentKind>, ConfigError> {
        self.agents
            .iter()
            .map(|name| {
                AgentKind::parse(name, self.alpha).ok_or_else(|| {
                    ConfigError::Validation(format!(
                        "unknown agent `{name}` (expected G-HierTS, G-HierTS-Fa, LinTS, LinUCB, HierTS or IndTS)"
                    ))
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Validation(msg));
        if self.horizon == 0 {
            return fail("horizon must be at least 1".into());
        }
        if self.runs == 0 {
            return fail("runs must be at least 1".into());
        }
        if self.parallelism == 0 {
            return fail("parallelism must be at least 1".into());
        }
        if self.seed > i64::MAX as u64 {
            return fail(format!("seed must not exceed {}", i64::MAX));
        }
        if self.agents.is_empty() {
            return fail("at least one agent is required".into());
        }
        self.agent_kinds()?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return fail(format!("jitter must be nonnegative, got {}", self.jitter));
        }
        if self.out.is_empty() {
            return fail("out must not be empty".into());
        }
        match self.preset {
            Preset::Synthetic | Preset::Custom => self.model.validate(self.preset)?,
            Preset::Movielens => match &self.movielens {
                Some(ml) => ml.validate()?,
                None => return fail("the movielens preset needs a [movielens] table".into()),
            },
        }
        if self.preset != Preset::Movielens && self.movielens.is_some() {
            return fail("a [movielens] table needs preset = \"movielens\"".into());
        }
        if let Some(sweep) = &self.sweep {
            if sweep.actions.iter().chain(&sweep.dim).chain(&sweep.latents).any(|&v| v == 0) {
                return fail("sweep values must be positive".into());
            }
            if self.preset == Preset::Custom && (!sweep.actions.is_empty() || !sweep.latents.is_empty()) {
                return fail("the custom preset fixes its weights, so only dim can be swept".into());
            }
            if self.preset == Preset::Movielens && !sweep.dim.is_empty() {
                return fail("the movielens preset takes its dimension from the embeddings".into());
            }
        }
        Ok(())
    }
}

impl ModelSection {
    fn validate(&self, preset: Preset) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Validation(msg));
        if self.actions == 0 || self.latents == 0 || self.dim == 0 {
            return fail("model.actions, model.latents and model.dim must be positive".into());
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("hyper_var", self.hyper_var),
            ("action_var", self.action_var),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("model.{name} must be positive, got {v}"));
            }
        }
        if !self.prior_mean.is_finite() {
            return fail("model.prior_mean must be finite".into());
        }
        if !(self.weight_low < self.weight_high && self.weight_low.is_finite() && self.weight_high.is_finite()) {
            return fail("model.weight_low must be below model.weight_high".into());
        }
        if !(self.context_low < self.context_high && self.context_low.is_finite() && self.context_high.is_finite()) {
            return fail("model.context_low must be below model.context_high".into());
        }
        match (preset, &self.weights) {
            (Preset::Custom, None) => fail("the custom preset needs model.weights".into()),
            (Preset::Custom, Some(rows)) => {
                if rows.len() != self.actions {
                    return fail(format!("model.weights has {} rows but actions = {}", rows.len(), self.actions));
                }
                if rows.iter().any(|r| r.len() != self.latents) {
                    return fail(format!("every row of model.weights needs latents = {} entries", self.latents));
                }
                if rows.iter().flatten().any(|v| !v.is_finite()) {
                    return fail("model.weights must be finite".into());
                }
                Ok(())
            }
            (_, Some(_)) => fail("model.weights is only used by the custom preset".into()),
            (_, None) => Ok(()),
        }
    }
}

impl MovieLensSection {
    fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Validation(msg));
        match (&self.embeddings, &self.planted) {
            (Some(_), Some(_)) => return fail("set either movielens.embeddings or [movielens.planted], not both".into()),
            (None, None) => return fail("the movielens preset needs movielens.embeddings or [movielens.planted]".into()),
            _ => {}
        }
        if self.latents == 0 || self.actions == 0 {
            return fail("movielens.latents and movielens.actions must be positive".into());
        }
        for (name, v) in [
            ("scale_hyper", self.scale_hyper),
            ("scale_cond", self.scale_cond),
            ("sigma", self.sigma),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("movielens.{name} must be positive, got {v}"));
            }
        }
        if !(self.kmeans_tol >= 0.0) || self.kmeans_iters == 0 {
            return fail("movielens.kmeans_iters must be positive and kmeans_tol nonnegative".into());
        }
        if let Some(p) = &self.planted {
            if p.users == 0 || p.items == 0 || p.dim == 0 || p.clusters == 0 {
                return fail("planted users, items, dim and clusters must be positive".into());
            }
            if !(p.separation >= 0.0 && p.spread >= 0.0) {
                return fail("planted separation and spread must be nonnegative".into());
            }
        }
        Ok(())
    }
}
