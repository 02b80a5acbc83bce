//! Experiment configuration: a flat TOML document with a versioned schema.
//!
//! ```toml
//! schema_version = 1
//! family = ["circle", "torus"]
//! sigma = [1, 2, 4]
//! delta = [0.0, 0.1, 0.2]
//! n_values = [4, 8, 16, 32, 64]
//! trials = 1000
//! realizations = 60
//! ```
//!
//! Every list-valued key also accepts a scalar. Unknown keys are rejected.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use opaug::environments::{EnvConfig, Family};
use opaug::{InducedModel, NormSpec, RewardCovMode};
use serde::Deserialize;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(x) => vec![x],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema_version: u32,
    family: Option<OneOrMany<String>>,
    size: Option<usize>,
    sigma: Option<OneOrMany<usize>>,
    delta: Option<OneOrMany<f64>>,
    gamma: Option<OneOrMany<f64>>,
    graph_seed: Option<OneOrMany<u64>>,
    transition: Option<Vec<Vec<f64>>>,
    reward: Option<Vec<f64>>,
    reward_variance: Option<Vec<f64>>,
    n_values: OneOrMany<u64>,
    norm: Option<String>,
    trials: Option<usize>,
    realizations: Option<usize>,
    seed: Option<u64>,
    output: Option<String>,
    factor_modes: Option<Vec<String>>,
    bootstrap_resamples: Option<usize>,
    reward_cov: Option<String>,
}

/// Norm requested in a config, kept apart from [`NormSpec`] so that the
/// config stays `Copy` and printable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormChoice {
    Residual,
    L2Exact,
    L2PlugIn,
}

impl NormChoice {
    pub fn name(self) -> &'static str {
        match self {
            NormChoice::Residual => "residual",
            NormChoice::L2Exact => "l2_exact",
            NormChoice::L2PlugIn => "l2_plugin",
        }
    }

    pub fn spec(self) -> NormSpec {
        match self {
            NormChoice::Residual => NormSpec::Residual,
            NormChoice::L2Exact => NormSpec::L2Exact,
            NormChoice::L2PlugIn => NormSpec::L2PlugIn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FactorModes {
    pub plugin: bool,
    pub oracle_circ: bool,
    pub oracle_star: bool,
    pub bootstrap: bool,
}

impl FactorModes {
    fn parse(names: &[String]) -> Result<Self, ConfigError> {
        let mut m = FactorModes::default();
        for name in names {
            match name.as_str() {
                "plugin" => m.plugin = true,
                "oracle_circ" => m.oracle_circ = true,
                "oracle_star" => m.oracle_star = true,
                "bootstrap" => m.bootstrap = true,
                other => return Err(ConfigError::Invalid(format!("unknown factor mode {other:?}"))),
            }
        }
        Ok(m)
    }

    pub fn names(&self) -> Vec<&'static str> {
        [
            (self.plugin, "plugin"),
            (self.oracle_circ, "oracle_circ"),
            (self.oracle_star, "oracle_star"),
            (self.bootstrap, "bootstrap"),
        ]
        .into_iter()
        .filter_map(|(on, name)| on.then_some(name))
        .collect()
    }
}

/// A user-supplied `(P, b)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitModel {
    pub transition: Vec<Vec<f64>>,
    pub reward: Vec<f64>,
    pub reward_variance: Option<Vec<f64>>,
}

/// What one configuration cell evaluates.
#[derive(Debug, Clone, PartialEq)]
pub enum Environment {
    Family(EnvConfig),
    Explicit { model: ExplicitModel, gamma: f64 },
}

impl Environment {
    pub fn family_name(&self) -> &'static str {
        match self {
            Environment::Family(c) => c.family.name(),
            Environment::Explicit { .. } => "explicit",
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            Environment::Family(c) => c.gamma,
            Environment::Explicit { gamma, .. } => *gamma,
        }
    }

    pub fn build(&self) -> opaug::Result<InducedModel> {
        match self {
            Environment::Family(c) => c.build(),
            Environment::Explicit { model, gamma } => {
                let s = model.reward.len();
                let rows: Vec<f64> = model.transition.iter().flatten().copied().collect();
                if model.transition.len() != s || rows.len() != s * s {
                    return Err(opaug::Error::Shape(format!("transition must be {s}x{s}")));
                }
                let p = DMatrix::from_row_slice(s, s, &rows);
                let b = DVector::from_column_slice(&model.reward);
                let var = match &model.reward_variance {
                    Some(v) => DVector::from_column_slice(v),
                    None => DVector::zeros(s),
                };
                InducedModel::with_reward_variance(p, b, var, *gamma)
            }
        }
    }
}

/// One point of the experiment grid before the sample size is chosen.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub env: Environment,
    pub n: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub environments: Vec<Environment>,
    pub n_values: Vec<u64>,
    pub norm: NormChoice,
    pub trials: usize,
    pub realizations: usize,
    pub seed: u64,
    pub output: Option<String>,
    pub modes: FactorModes,
    pub bootstrap_resamples: usize,
    pub reward_cov: RewardCovMode,
}

fn default_size(family: Family) -> usize {
    match family {
        Family::Circle => 64,
        Family::Torus => 8,
        Family::RandomDense | Family::RandomSparse => 64,
    }
}

fn check_gamma(g: f64) -> Result<(), ConfigError> {
    if !(g > 0.0 && g < 1.0) {
        return Err(ConfigError::Invalid(format!("gamma {g} must lie in (0, 1)")));
    }
    Ok(())
}

impl Config {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if raw.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Invalid(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                raw.schema_version
            )));
        }
        let gammas = raw.gamma.map(OneOrMany::into_vec).unwrap_or_else(|| vec![0.9]);
        if gammas.is_empty() {
            return Err(ConfigError::Invalid("gamma list is empty".into()));
        }
        for &g in &gammas {
            check_gamma(g)?;
        }
        let environments = if let Some(transition) = raw.transition {
            if let Some(f) = &raw.family {
                let names = f.clone().into_vec();
                if names != ["explicit"] {
                    return Err(ConfigError::Invalid(
                        "`transition` needs family = \"explicit\" or no family".into(),
                    ));
                }
            }
            if raw.sigma.is_some() || raw.delta.is_some() || raw.graph_seed.is_some() || raw.size.is_some() {
                return Err(ConfigError::Invalid(
                    "size, sigma, delta and graph_seed do not apply to an explicit model".into(),
                ));
            }
            let reward = raw
                .reward
                .ok_or_else(|| ConfigError::Invalid("explicit model needs `reward`".into()))?;
            let model = ExplicitModel {
                transition,
                reward,
                reward_variance: raw.reward_variance,
            };
            gammas
                .iter()
                .map(|&gamma| Environment::Explicit {
                    model: model.clone(),
                    gamma,
                })
                .collect()
        } else {
            if raw.reward.is_some() || raw.reward_variance.is_some() {
                return Err(ConfigError::Invalid("`reward` is only valid with `transition`".into()));
            }
            let families = raw
                .family
                .ok_or_else(|| ConfigError::Invalid("either `family` or `transition` is required".into()))?
                .into_vec();
            let sigmas = raw.sigma.map(OneOrMany::into_vec).unwrap_or_else(|| vec![1]);
            let deltas = raw.delta.map(OneOrMany::into_vec).unwrap_or_else(|| vec![0.0]);
            let graph_seeds = raw.graph_seed.map(OneOrMany::into_vec).unwrap_or_else(|| vec![0]);
            if families.is_empty() || sigmas.is_empty() || deltas.is_empty() || graph_seeds.is_empty() {
                return Err(ConfigError::Invalid("family, sigma, delta and graph_seed lists must be nonempty".into()));
            }
            if sigmas.contains(&0) {
                return Err(ConfigError::Invalid("sigma must be at least 1".into()));
            }
            if deltas.iter().any(|&d| !(d >= 0.0 && d.is_finite())) {
                return Err(ConfigError::Invalid("delta must be nonnegative".into()));
            }
            let mut envs = Vec::new();
            for name in &families {
                let family = Family::parse(name)
                    .ok_or_else(|| ConfigError::Invalid(format!("unknown family {name:?}")))?;
                let size = raw.size.unwrap_or_else(|| default_size(family));
                for &gamma in &gammas {
                    match family {
                        Family::Circle | Family::Torus => {
                            for &sigma in &sigmas {
                                for &delta in &deltas {
                                    envs.push(EnvConfig {
                                        family,
                                        size,
                                        sigma,
                                        delta,
                                        gamma,
                                        seed: 0,
                                    });
                                }
                            }
                        }
                        Family::RandomDense | Family::RandomSparse => {
                            for &seed in &graph_seeds {
                                envs.push(EnvConfig {
                                    family,
                                    size,
                                    sigma: 0,
                                    delta: 0.0,
                                    gamma,
                                    seed,
                                });
                            }
                        }
                    }
                }
            }
            envs.into_iter().map(Environment::Family).collect()
        };
        let n_values = raw.n_values.into_vec();
        if n_values.is_empty() || n_values.contains(&0) {
            return Err(ConfigError::Invalid("n_values must be a nonempty list of positive integers".into()));
        }
        let norm = match raw.norm.as_deref().unwrap_or("residual") {
            "residual" => NormChoice::Residual,
            "l2_exact" => NormChoice::L2Exact,
            "l2_plugin" => NormChoice::L2PlugIn,
            other => return Err(ConfigError::Invalid(format!("unknown norm {other:?}"))),
        };
        let trials = raw.trials.unwrap_or(1000);
        if trials < 2 {
            return Err(ConfigError::Invalid("trials must be at least 2".into()));
        }
        let realizations = raw.realizations.unwrap_or(1);
        if realizations == 0 {
            return Err(ConfigError::Invalid("realizations must be positive".into()));
        }
        let modes = FactorModes::parse(
            &raw.factor_modes
                .unwrap_or_else(|| vec!["plugin".into(), "oracle_circ".into(), "oracle_star".into()]),
        )?;
        let bootstrap_resamples = raw.bootstrap_resamples.unwrap_or(200);
        if modes.bootstrap && bootstrap_resamples == 0 {
            return Err(ConfigError::Invalid("bootstrap_resamples must be positive".into()));
        }
        let reward_cov = match raw.reward_cov.as_deref().unwrap_or("oracle") {
            "oracle" => RewardCovMode::Oracle,
            "sample_variance" => RewardCovMode::SampleVariance,
            other => return Err(ConfigError::Invalid(format!("unknown reward_cov {other:?}"))),
        };
        if reward_cov == RewardCovMode::SampleVariance && n_values.contains(&1) {
            return Err(ConfigError::Invalid("reward_cov = \"sample_variance\" needs every n ≥ 2".into()));
        }
        let config = Config {
            environments,
            n_values,
            norm,
            trials,
            realizations,
            seed: raw.seed.unwrap_or(0),
            output: raw.output,
            modes,
            bootstrap_resamples,
            reward_cov,
        };
        for env in &config.environments {
            env.build()
                .map_err(|e| ConfigError::Invalid(format!("{} environment: {e}", env.family_name())))?;
        }
        Ok(config)
    }

    /// Grid cells in output order: environments outermost, then `n`.
    pub fn cells(&self) -> Vec<CellSpec> {
        self.environments
            .iter()
            .flat_map(|env| {
                self.n_values.iter().map(move |&n| CellSpec { env: env.clone(), n })
            })
            .collect()
    }

    /// Resolved settings, one `key = value` per line, for output headers.
    pub fn describe(&self) -> Vec<String> {
        let list = |xs: Vec<String>| xs.join(",");
        vec![
            format!("environments = {}", self.environments.len()),
            format!("n_values = {}", list(self.n_values.iter().map(u64::to_string).collect())),
            format!("norm = {}", self.norm.name()),
            format!("trials = {}", self.trials),
            format!("realizations = {}", self.realizations),
            format!("factor_modes = {}", self.modes.names().join(",")),
            format!("bootstrap_resamples = {}", self.bootstrap_resamples),
            format!(
                "reward_cov = {}",
                match self.reward_cov {
                    RewardCovMode::Oracle => "oracle",
                    RewardCovMode::SampleVariance => "sample_variance",
                }
            ),
        ]
    }
}
