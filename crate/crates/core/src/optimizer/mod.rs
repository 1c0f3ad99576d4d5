//! Projected policy-gradient ascent, smoothness estimation, a Frank-Wolfe
//! oracle for the optimum over the flow polytope, and convergence-rate fits.

mod frank_wolfe;
mod rates;

pub use frank_wolfe::{frank_wolfe_optimum, FrankWolfeConfig, FrankWolfeVariant, PolytopeOptimum};
pub use rates::{rate_fit, scaled_gap_bounded, sublinear_bound, RateFit, RateModel, RateOutcome, ScaledGapCheck};

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{chain_rule_oracle, composite_pg, variational_pg, EpisodeBatch, QSource, SaddleConfig};
use crate::mdp::{
    default_horizon, simplex_project, DifferentiablePolicy, Mdp, Parameterization, Policy, PolicyEvaluator,
    SoftmaxPolicy, Table, TabularPolicy,
};
use crate::rng::{derive_seed, mix64, stream, tags};
use crate::utility::{LogBarrierUtility, Utility};

/// How ascent obtains ∇_θ R at each iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum GradientMode {
    /// Exact chain-rule gradient.
    #[default]
    Exact,
    /// Saddle-point estimate from a fresh batch each iteration.
    Variational {
        episodes: usize,
        /// 0 selects the default horizon.
        #[serde(default)]
        horizon: usize,
        #[serde(default)]
        saddle: SaddleConfig,
    },
    /// Log-barrier objective estimated from two linear gradient estimates.
    Composite {
        episodes: usize,
        #[serde(default)]
        horizon: usize,
        #[serde(default)]
        q_source: QSource,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AscentConfig {
    pub eta: f64,
    pub iterations: usize,
    pub gradient: GradientMode,
    pub seed: u64,
    /// Keep every parameter table, not only the last.
    pub keep_iterates: bool,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self { eta: 0.1, iterations: 100, gradient: GradientMode::Exact, seed: 0, keep_iterates: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AscentRecord {
    pub iteration: usize,
    /// Exact R(π_θ) = F(λ(θ)).
    pub value: f64,
    /// Norm of the gradient used to leave this iterate; NaN at the last one.
    pub grad_norm: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    /// The next iterate left the log-barrier domain; the run ends at the last
    /// interior iterate.
    BarrierExit { iteration: usize },
}

#[derive(Debug, Clone)]
pub struct AscentRun {
    pub records: Vec<AscentRecord>,
    pub iterates: Vec<Table>,
    pub final_policy: Policy,
    pub stop: StopReason,
}

impl AscentRun {
    pub fn values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.value).collect()
    }

    /// F(λ*) − R(θ^k) for every recorded iterate.
    pub fn gaps(&self, optimum: f64) -> Vec<f64> {
        self.records.iter().map(|r| optimum - r.value).collect()
    }
}

/// Projected ascent θ ← Proj_Θ(θ + η ∇_θ R(π_θ)). Tabular iterates are
/// projected per state onto the simplex; softmax iterates are shift-normalized.
pub fn pg_ascent(mdp: &Mdp, init: &Policy, utility: &dyn Utility, config: &AscentConfig) -> Result<AscentRun> {
    if let GradientMode::Composite { .. } = config.gradient {
        return Err(Error::InvalidArgument("composite gradients need `pg_ascent_barrier`".into()));
    }
    ascent_loop(mdp, init, utility, None, config)
}

/// [`pg_ascent`] for the log-barrier objective; allows composite gradients.
pub fn pg_ascent_barrier(mdp: &Mdp, init: &Policy, utility: &LogBarrierUtility, config: &AscentConfig) -> Result<AscentRun> {
    ascent_loop(mdp, init, utility, Some(utility), config)
}

fn ascent_loop(
    mdp: &Mdp,
    init: &Policy,
    utility: &dyn Utility,
    barrier: Option<&LogBarrierUtility>,
    config: &AscentConfig,
) -> Result<AscentRun> {
    if !(config.eta > 0.0) || !config.eta.is_finite() {
        return Err(Error::InvalidArgument(format!("step size {} must be positive", config.eta)));
    }
    let occ = PolicyEvaluator::new(mdp, init.tabular())?.occupancy();
    utility.check_domain(occ.lambda())?;

    let mut policy = match init {
        Policy::Softmax(p) => Policy::Softmax(p.shift_normalized()),
        other => other.clone(),
    };
    let mut value = utility.value(occ.lambda());
    let mut records = Vec::with_capacity(config.iterations + 1);
    let mut iterates = Vec::new();
    if config.keep_iterates {
        iterates.push(policy.params().clone());
    }
    let root = derive_seed(config.seed, tags::ASCENT);
    let mut stop = StopReason::Completed;

    for k in 0..config.iterations {
        let step_seed = mix64(root ^ k as u64);
        let grad = match gradient(mdp, &policy, utility, barrier, &config.gradient, step_seed) {
            Ok(g) => g,
            Err(Error::BarrierViolated { .. }) => {
                stop = StopReason::BarrierExit { iteration: k };
                break;
            }
            Err(e) => return Err(e),
        };
        let grad_norm = grad.norm();
        if !grad_norm.is_finite() {
            return Err(Error::Diverged { iteration: k, detail: format!("gradient norm {grad_norm}") });
        }
        records.push(AscentRecord { iteration: k, value, grad_norm, eta: config.eta });

        let next = step(&policy, &grad, config.eta).ok_or_else(|| Error::Diverged {
            iteration: k + 1,
            detail: format!("non-finite parameters after a step of norm {}", grad_norm * config.eta),
        })?;
        let next_occ = PolicyEvaluator::new(mdp, next.tabular())?.occupancy();
        if utility.check_domain(next_occ.lambda()).is_err() {
            stop = StopReason::BarrierExit { iteration: k + 1 };
            records.pop();
            break;
        }
        policy = next;
        value = utility.value(next_occ.lambda());
        if !value.is_finite() {
            return Err(Error::Diverged { iteration: k + 1, detail: "non-finite objective".into() });
        }
        if config.keep_iterates {
            iterates.push(policy.params().clone());
        }
    }
    records.push(AscentRecord { iteration: records.len(), value, grad_norm: f64::NAN, eta: config.eta });
    if !config.keep_iterates {
        iterates.push(policy.params().clone());
    }
    Ok(AscentRun { records, iterates, final_policy: policy, stop })
}

fn gradient(
    mdp: &Mdp,
    policy: &Policy,
    utility: &dyn Utility,
    barrier: Option<&LogBarrierUtility>,
    mode: &GradientMode,
    seed: u64,
) -> Result<Table> {
    match mode {
        GradientMode::Exact => chain_rule_oracle(mdp, policy, utility),
        GradientMode::Variational { episodes, horizon, saddle } => {
            let horizon = if *horizon == 0 { default_horizon(mdp.gamma()) } else { *horizon };
            let batch = EpisodeBatch::generate(mdp, policy.tabular(), *episodes, horizon, seed)?;
            Ok(variational_pg(mdp, &batch, utility, policy, saddle, seed)?.x)
        }
        GradientMode::Composite { episodes, horizon, q_source } => {
            let barrier = barrier.ok_or_else(|| Error::InvalidArgument("composite gradients need the log-barrier utility".into()))?;
            let horizon = if *horizon == 0 { default_horizon(mdp.gamma()) } else { *horizon };
            let batch = EpisodeBatch::generate(mdp, policy.tabular(), *episodes, horizon, seed)?;
            composite_pg(mdp, &batch, barrier, policy, *q_source, seed)
        }
    }
}

/// One projected step; `None` when the parameters become non-finite.
fn step(policy: &Policy, grad: &Table, eta: f64) -> Option<Policy> {
    match policy {
        Policy::Tabular(p) => {
            let moved = p.probs() + grad * eta;
            if moved.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let mut out = moved.clone();
            for s in 0..moved.nrows() {
                let row: Vec<f64> = moved.row(s).iter().copied().collect();
                for (a, v) in simplex_project(&row).into_iter().enumerate() {
                    out[(s, a)] = v;
                }
            }
            Some(Policy::Tabular(TabularPolicy::new_unchecked(out)))
        }
        Policy::Softmax(p) => {
            let next = SoftmaxPolicy::new(p.theta() + grad * eta).ok()?;
            let next = next.shift_normalized();
            next.policy().probs().iter().all(|v| v.is_finite()).then_some(Policy::Softmax(next))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Smoothness {
    /// 2 × the largest sampled difference quotient.
    pub estimate: f64,
    pub max_quotient: f64,
    /// 2γA/(1−γ)³ for the linear utility under the tabular parameterization.
    pub analytic: Option<f64>,
    /// Pairs actually compared (pairs outside a barrier domain are skipped).
    pub pairs: usize,
}

/// Empirical Lipschitz constant of θ ↦ ∇_θ R(π_θ) from random nearby
/// parameter pairs.
pub fn estimate_smoothness(mdp: &Mdp, utility: &dyn Utility, kind: Parameterization, samples: usize, seed: u64) -> Result<Smoothness> {
    if samples < 2 {
        return Err(Error::InvalidArgument("smoothness estimation needs at least 2 samples".into()));
    }
    let (n, na) = (mdp.num_states(), mdp.num_actions());
    let mut rng = stream(derive_seed(seed, tags::SMOOTHNESS), 0);
    let mut normal = |scale: f64| -> Table {
        DMatrix::from_fn(n, na, |_, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            scale * e
        })
    };
    let mut max_quotient: f64 = 0.0;
    let mut pairs = 0;
    for _ in 0..samples {
        let base = normal(1.0);
        let dir = normal(1.0);
        let radius = 0.05;
        let (a, b) = match kind {
            Parameterization::Softmax => {
                let a = SoftmaxPolicy::new(base).expect("finite");
                let b = SoftmaxPolicy::new(a.theta() + &dir * (radius / dir.norm())).expect("finite");
                (Policy::Softmax(a), Policy::Softmax(b))
            }
            Parameterization::Tabular => {
                // Interior policy, displaced along a direction with zero row sums.
                let probs = SoftmaxPolicy::new(base).expect("finite").policy().probs().map(|p| 0.5 * p + 0.5 / na as f64);
                let mut d = dir;
                for s in 0..n {
                    let mean = d.row(s).mean();
                    d.row_mut(s).add_scalar_mut(-mean);
                }
                let floor = probs.min();
                let scale = (radius / d.norm().max(f64::MIN_POSITIVE)).min(0.5 * floor / d.amax().max(f64::MIN_POSITIVE));
                let moved = &probs + &d * scale;
                (Policy::Tabular(TabularPolicy::new_unchecked(probs)), Policy::Tabular(TabularPolicy::new_unchecked(moved)))
            }
        };
        let (ga, gb) = match (chain_rule_oracle(mdp, &a, utility), chain_rule_oracle(mdp, &b, utility)) {
            (Ok(ga), Ok(gb)) => (ga, gb),
            (Err(Error::BarrierViolated { .. }), _) | (_, Err(Error::BarrierViolated { .. })) => continue,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        let dist = (a.params() - b.params()).norm();
        if dist > 0.0 {
            max_quotient = max_quotient.max((ga - gb).norm() / dist);
            pairs += 1;
        }
    }
    let gamma = mdp.gamma();
    let analytic = (utility.name() == "linear" && kind == Parameterization::Tabular)
        .then(|| 2.0 * gamma * na as f64 / (1.0 - gamma).powi(3));
    Ok(Smoothness { estimate: 2.0 * max_quotient, max_quotient, analytic, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::random_mdp;
    use crate::mdp::{occupancy_exact, value_iteration};
    use crate::utility::{entropy_utility, linear_utility};

    fn exact_value(mdp: &Mdp, policy: &TabularPolicy, utility: &dyn Utility) -> Result<f64> {
        let occ = PolicyEvaluator::new(mdp, policy)?.occupancy();
        Ok(utility.value(occ.lambda()))
    }

    fn two_state() -> Mdp {
        let p0 = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]);
        let p1 = DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 0.6, 0.4]);
        Mdp::new(vec![p0, p1], nalgebra::DVector::from_vec(vec![0.5, 0.5]), 0.9)
            .unwrap()
            .with_reward(DMatrix::from_row_slice(2, 2, &[0.0, 0.3, 1.0, 0.2]))
            .unwrap()
    }

    #[test]
    fn linear_ascent_reaches_value_iteration_optimum() {
        let m = two_state();
        let r = m.reward().unwrap().clone();
        let vi = value_iteration(&m, &r, 1e-12, None).unwrap();
        let best = m.initial().dot(&vi.values);
        let u = linear_utility(r);
        for kind in [Parameterization::Tabular, Parameterization::Softmax] {
            // softmax ascent on a linear objective converges only at rate 1/k
            let (eta, tol) = if kind == Parameterization::Tabular { (0.05, 1e-6) } else { (1.0, 1e-4) };
            let cfg = AscentConfig { eta, iterations: 20_000, ..Default::default() };
            let run = pg_ascent(&m, &Policy::uniform(kind, 2, 2), &u, &cfg).unwrap();
            let last = run.records.last().unwrap().value;
            assert!((best - last).abs() < tol, "{kind:?}: {last} vs {best}");
        }
    }

    #[test]
    fn single_state_entropy_is_stationary() {
        let m = Mdp::new(vec![DMatrix::from_element(1, 1, 1.0); 3], nalgebra::DVector::from_element(1, 1.0), 0.9).unwrap();
        let u = entropy_utility(0.9).unwrap();
        let run = pg_ascent(&m, &Policy::uniform(Parameterization::Softmax, 1, 3), &u, &AscentConfig { iterations: 10, ..Default::default() }).unwrap();
        assert!(run.values().iter().all(|&v| v.abs() < 1e-12));
        assert!(run.records[..10].iter().all(|r| r.grad_norm < 1e-12));
    }

    #[test]
    fn tabular_iterates_stay_on_simplex_and_ascend() {
        let m = random_mdp(5, 3, 0.9, 3, 1.0).unwrap();
        let u = entropy_utility(0.9).unwrap();
        let sm = estimate_smoothness(&m, &u, Parameterization::Tabular, 30, 0).unwrap();
        let cfg = AscentConfig { eta: 1.0 / sm.estimate, iterations: 200, keep_iterates: true, ..Default::default() };
        let run = pg_ascent(&m, &Policy::uniform(Parameterization::Tabular, 5, 3), &u, &cfg).unwrap();
        for it in &run.iterates {
            for row in it.row_iter() {
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
        for w in run.values().windows(2) {
            assert!(w[1] >= w[0] - 1e-10);
        }
    }

    #[test]
    fn zero_utility_has_zero_smoothness() {
        let m = random_mdp(3, 2, 0.9, 1, 1.0).unwrap();
        let u = linear_utility(DMatrix::zeros(3, 2));
        let sm = estimate_smoothness(&m, &u, Parameterization::Softmax, 10, 0).unwrap();
        assert_eq!(sm.estimate, 0.0);
    }

    #[test]
    fn analytic_smoothness_for_linear_tabular() {
        let m = random_mdp(3, 4, 0.9, 1, 1.0).unwrap();
        let u = linear_utility(m.reward().unwrap().clone());
        let sm = estimate_smoothness(&m, &u, Parameterization::Tabular, 10, 0).unwrap();
        assert!((sm.analytic.unwrap() - 7200.0).abs() < 1e-9);
        assert!(sm.estimate <= 7200.0);
        assert!(sm.estimate >= 2.0 * sm.max_quotient - 1e-12);
        assert!(estimate_smoothness(&m, &u, Parameterization::Tabular, 1, 0).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let m = random_mdp(3, 2, 0.9, 1, 1.0).unwrap();
        let u = linear_utility(DMatrix::from_element(3, 2, 1e300));
        let err = pg_ascent(&m, &Policy::Softmax(SoftmaxPolicy::new(DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 0.0, 2.0, 1.0, 0.0])).unwrap()), &u, &AscentConfig { eta: 1e10, iterations: 5, ..Default::default() });
        assert!(matches!(err, Err(Error::Diverged { .. })), "{err:?}");
    }

    #[test]
    fn barrier_exit_keeps_last_interior_iterate() {
        let m = random_mdp(3, 2, 0.9, 4, 1.0).unwrap();
        // Reward pushes towards the cost channel; a huge step must hit the barrier.
        let c = m.cost().unwrap().clone();
        let start = Policy::uniform(Parameterization::Softmax, 3, 2);
        let occ = occupancy_exact(&m, start.tabular()).unwrap();
        let budget = c.dot(occ.lambda()) + 0.05;
        let u = crate::utility::log_barrier_cmdp_utility(&c * 10.0, c, budget, 1e-6).unwrap();
        let run = pg_ascent_barrier(&m, &start, &u, &AscentConfig { eta: 50.0, iterations: 50, ..Default::default() }).unwrap();
        assert!(matches!(run.stop, StopReason::BarrierExit { .. }));
        let last = occupancy_exact(&m, run.final_policy.tabular()).unwrap();
        assert!(u.check_domain(last.lambda()).is_ok());
        assert!(run.records.iter().all(|r| r.value.is_finite()));
    }

    #[test]
    fn composite_mode_requires_barrier_entry_point() {
        let m = random_mdp(3, 2, 0.9, 1, 1.0).unwrap();
        let u = linear_utility(m.reward().unwrap().clone());
        let cfg = AscentConfig { gradient: GradientMode::Composite { episodes: 5, horizon: 10, q_source: QSource::Exact }, ..Default::default() };
        assert!(pg_ascent(&m, &Policy::uniform(Parameterization::Softmax, 3, 2), &u, &cfg).is_err());
    }

    #[test]
    fn zero_iterations_record_initial_metrics() {
        let m = random_mdp(3, 2, 0.9, 1, 1.0).unwrap();
        let u = linear_utility(m.reward().unwrap().clone());
        let run = pg_ascent(&m, &Policy::uniform(Parameterization::Softmax, 3, 2), &u, &AscentConfig { iterations: 0, ..Default::default() }).unwrap();
        assert_eq!(run.records.len(), 1);
        let expect = exact_value(&m, &TabularPolicy::uniform(3, 2), &u).unwrap();
        assert!((run.records[0].value - expect).abs() < 1e-12);
    }
}
