//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{build_gridworld, GridSpec, RandomMdpSpec};
use crate::error::{Error, Result};
use crate::estimation::{MseStudyConfig, SaddleConfig};
use crate::mdp::{occupancy_exact, Mdp, Parameterization, Policy, SoftmaxPolicy, Table};
use crate::optimizer::{FrankWolfeConfig, GradientMode, RateModel};
use crate::rng::{derive_seed, stream, tags};
use crate::utility::{
    entropy_utility, kl_utility, linear_utility, log_barrier_cmdp_utility, min_eigenvalue_utility, LogBarrierUtility, Utility,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum EnvironmentConfig {
    Grid(GridSpec),
    Random(RandomMdpSpec),
}

impl EnvironmentConfig {
    pub fn build(&self) -> Result<Mdp> {
        match self {
            EnvironmentConfig::Grid(g) => build_gridworld(g),
            EnvironmentConfig::Random(r) => r.build(),
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            EnvironmentConfig::Grid(g) => g.gamma,
            EnvironmentConfig::Random(r) => r.gamma,
        }
    }
}

/// Prior for the KL utility: explicit, or the visitation of a random softmax
/// policy with θ ~ N(0, scale²).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum PriorConfig {
    Uniform,
    Explicit { prior: Vec<f64> },
    Reference { seed: u64, scale: f64 },
}

/// Utility choice. Reward and cost tables default to the environment's
/// channels; γ is the environment's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum UtilityConfig {
    Linear {
        #[serde(default)]
        reward: Option<Vec<Vec<f64>>>,
    },
    Entropy,
    Kl {
        #[serde(default = "default_prior")]
        prior: PriorConfig,
    },
    MinEigenvalue {
        /// One feature vector per state-action pair, row-major in (s, a).
        features: Vec<Vec<f64>>,
    },
    LogBarrier {
        budget: f64,
        beta: f64,
        #[serde(default)]
        reward: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        cost: Option<Vec<Vec<f64>>>,
    },
}

fn default_prior() -> PriorConfig {
    PriorConfig::Uniform
}

/// A constructed utility; the log-barrier variant keeps its concrete type for
/// composite gradients.
#[derive(Debug)]
pub enum BuiltUtility {
    Plain(Box<dyn Utility>),
    Barrier(LogBarrierUtility),
}

impl BuiltUtility {
    pub fn as_dyn(&self) -> &dyn Utility {
        match self {
            BuiltUtility::Plain(u) => u.as_ref(),
            BuiltUtility::Barrier(u) => u,
        }
    }

    pub fn barrier(&self) -> Option<&LogBarrierUtility> {
        match self {
            BuiltUtility::Barrier(u) => Some(u),
            BuiltUtility::Plain(_) => None,
        }
    }
}

fn table(rows: &[Vec<f64>], mdp: &Mdp, what: &str) -> Result<Table> {
    let (s, a) = (mdp.num_states(), mdp.num_actions());
    if rows.len() != s || rows.iter().any(|r| r.len() != a) {
        return Err(Error::Config(format!("{what} must be an {s}x{a} table")));
    }
    Ok(DMatrix::from_fn(s, a, |i, j| rows[i][j]))
}

fn channel(explicit: &Option<Vec<Vec<f64>>>, fallback: Option<&Table>, mdp: &Mdp, what: &str) -> Result<Table> {
    match explicit {
        Some(rows) => table(rows, mdp, what),
        None => fallback
            .cloned()
            .ok_or_else(|| Error::Config(format!("environment has no {what} channel; give `{what}` explicitly"))),
    }
}

/// Visitation of a softmax policy with Gaussian parameters.
pub fn reference_visitation(mdp: &Mdp, seed: u64, scale: f64) -> Result<Vec<f64>> {
    let mut rng = stream(derive_seed(seed, tags::MODEL), 1);
    let theta = DMatrix::from_fn(mdp.num_states(), mdp.num_actions(), |_, _| {
        let e: f64 = StandardNormal.sample(&mut rng);
        scale * e
    });
    let occ = occupancy_exact(mdp, SoftmaxPolicy::new(theta)?.policy())?;
    Ok(occ.visitation().iter().copied().collect())
}

impl UtilityConfig {
    pub fn build(&self, mdp: &Mdp) -> Result<BuiltUtility> {
        let gamma = mdp.gamma();
        Ok(match self {
            UtilityConfig::Linear { reward } => {
                BuiltUtility::Plain(Box::new(linear_utility(channel(reward, mdp.reward(), mdp, "reward")?)))
            }
            UtilityConfig::Entropy => BuiltUtility::Plain(Box::new(entropy_utility(gamma)?)),
            UtilityConfig::Kl { prior } => {
                let prior = match prior {
                    PriorConfig::Uniform => vec![1.0 / mdp.num_states() as f64; mdp.num_states()],
                    PriorConfig::Explicit { prior } => prior.clone(),
                    PriorConfig::Reference { seed, scale } => reference_visitation(mdp, *seed, *scale)?,
                };
                BuiltUtility::Plain(Box::new(kl_utility(&prior, gamma)?))
            }
            UtilityConfig::MinEigenvalue { features } => {
                BuiltUtility::Plain(Box::new(min_eigenvalue_utility(features.clone(), mdp.num_states(), mdp.num_actions())?))
            }
            UtilityConfig::LogBarrier { budget, beta, reward, cost } => BuiltUtility::Barrier(log_barrier_cmdp_utility(
                channel(reward, mdp.reward(), mdp, "reward")?,
                channel(cost, mdp.cost(), mdp, "cost")?,
                *budget,
                *beta,
            )?),
        })
    }

    pub fn is_barrier(&self) -> bool {
        matches!(self, UtilityConfig::LogBarrier { .. })
    }
}

/// Starting policy: uniform, or softmax parameters θ ~ N(0, scale²) (for the
/// tabular parameterization, the corresponding softmax probabilities).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum InitConfig {
    #[default]
    Uniform,
    Random { seed: u64, scale: f64 },
}

impl InitConfig {
    pub fn build(&self, kind: Parameterization, mdp: &Mdp) -> Result<Policy> {
        let (s, a) = (mdp.num_states(), mdp.num_actions());
        match *self {
            InitConfig::Uniform => Ok(Policy::uniform(kind, s, a)),
            InitConfig::Random { seed, scale } => {
                let mut rng = stream(derive_seed(seed, tags::MODEL), 2);
                let theta = DMatrix::from_fn(s, a, |_, _| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    scale * e
                });
                let soft = SoftmaxPolicy::new(theta)?;
                Ok(match kind {
                    Parameterization::Softmax => Policy::Softmax(soft),
                    Parameterization::Tabular => Policy::Tabular(soft.policy().clone()),
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    /// Batch size n.
    pub episodes: usize,
    /// Episode horizon K; 0 selects the default for γ.
    pub horizon: usize,
    pub saddle: SaddleConfig,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            episodes: 1_000,
            horizon: 0,
            saddle: SaddleConfig { checkpoint_every: 100, schedule: crate::estimation::StepSchedule::Averaging, ..SaddleConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Step size; `None` selects 1/L̂ from the smoothness estimate.
    pub eta: Option<f64>,
    /// Use the analytic L for the linear tabular case when η is unset.
    pub analytic_smoothness: bool,
    pub smoothness_samples: usize,
    pub gradient: GradientMode,
    pub eval_episodes: usize,
    /// Compute the Frank-Wolfe optimum for the gap column.
    pub oracle: bool,
    pub frank_wolfe: FrankWolfeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1_000,
            eta: None,
            analytic_smoothness: false,
            smoothness_samples: 20,
            gradient: GradientMode::Exact,
            eval_episodes: 20,
            oracle: true,
            frank_wolfe: FrankWolfeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateConfig {
    pub models: Vec<RateModel>,
    /// First iterate included in the fits.
    pub fit_from: usize,
    /// Check the 1/(k+1) bound for the linear tabular case.
    pub check_bound: bool,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self { models: vec![RateModel::Sublinear, RateModel::Linear], fit_from: 10, check_bound: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    EstimateGradient,
    Train,
    MseStudy,
    RateStudy,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::EstimateGradient => "estimate-gradient",
            Command::Train => "train",
            Command::MseStudy => "mse-study",
            Command::RateStudy => "rate-study",
        }
    }
}

/// Sweep axes; the run grid is their Cartesian product. Empty axes keep the
/// base configuration's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub seed: Vec<u64>,
    pub beta: Vec<f64>,
    pub eta: Vec<f64>,
    pub episodes: Vec<usize>,
    pub budget: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub command: Command,
    #[serde(default)]
    pub axes: SweepAxes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvironmentConfig,
    pub utility: UtilityConfig,
    #[serde(default)]
    pub parameterization: Parameterization,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub estimate: EstimateConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub mse: MseStudyConfig,
    #[serde(default)]
    pub rate: RateConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn positive(x: f64, what: &str) -> Result<()> {
    check(x > 0.0 && x.is_finite(), || format!("{what} must be positive and finite, got {x}"))
}

fn check_saddle(s: &SaddleConfig, what: &str) -> Result<()> {
    positive(s.alpha, &format!("{what}.alpha"))?;
    positive(s.beta, &format!("{what}.beta"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Range checks and name resolution; builds the environment and utility
    /// once to catch shape errors.
    pub fn validate(&self) -> Result<()> {
        let gamma = self.environment.gamma();
        check((0.0..1.0).contains(&gamma), || format!("environment.gamma must lie in [0, 1), got {gamma}"))?;
        let mdp = self.environment.build()?;
        self.utility.build(&mdp)?;
        if let InitConfig::Random { scale, .. } = self.init {
            check(scale >= 0.0 && scale.is_finite(), || "init.scale must be non-negative".into())?;
        }
        if let UtilityConfig::Kl { prior: PriorConfig::Reference { scale, .. } } = &self.utility {
            check(*scale >= 0.0 && scale.is_finite(), || "utility.prior.scale must be non-negative".into())?;
        }

        check(self.estimate.episodes > 0, || "estimate.episodes must be positive".into())?;
        check_saddle(&self.estimate.saddle, "estimate.saddle")?;

        let t = &self.train;
        if let Some(eta) = t.eta {
            positive(eta, "train.eta")?;
        }
        check(t.eta.is_some() || t.analytic_smoothness || t.smoothness_samples >= 2, || {
            "train.smoothness_samples must be at least 2 when train.eta is unset".into()
        })?;
        check(t.eval_episodes >= 1, || "train.eval_episodes must be at least 1".into())?;
        match &t.gradient {
            GradientMode::Exact => {}
            GradientMode::Variational { episodes, saddle, .. } => {
                check(*episodes > 0, || "train.gradient.episodes must be positive".into())?;
                check_saddle(saddle, "train.gradient.saddle")?;
            }
            GradientMode::Composite { episodes, .. } => {
                check(*episodes > 0, || "train.gradient.episodes must be positive".into())?;
                check(self.utility.is_barrier(), || "composite gradients need the log_barrier utility".into())?;
            }
        }
        positive(t.frank_wolfe.tol, "train.frank_wolfe.tol")?;

        check(!self.mse.episodes.is_empty() && self.mse.episodes.iter().all(|&n| n > 0), || {
            "mse.episodes must be a non-empty list of positive sizes".into()
        })?;
        check(self.mse.repeats > 0, || "mse.repeats must be positive".into())?;
        check_saddle(&self.mse.saddle, "mse.saddle")?;

        check(!self.rate.models.is_empty(), || "rate.models must not be empty".into())?;

        if let Some(sweep) = &self.sweep {
            let a = &sweep.axes;
            for &b in &a.beta {
                check(b >= 0.0 && b.is_finite(), || format!("sweep beta {b} must be non-negative"))?;
            }
            for &e in &a.eta {
                positive(e, "sweep eta")?;
            }
            check(a.episodes.iter().all(|&n| n > 0), || "sweep episodes must be positive".into())?;
            check((a.beta.is_empty() && a.budget.is_empty()) || self.utility.is_barrier(), || {
                "beta and budget axes need the log_barrier utility".into()
            })?;
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}
