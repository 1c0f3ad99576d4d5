//! Finite discounted MDPs, tabular policies, exact occupancy/value solves and
//! episode sampling.

mod exact;
mod policy;
mod sampling;
mod simplex;

pub use exact::{
    default_horizon, exact_policy_gradient, extract_policy, flow_residual, occupancy_exact,
    q_values_exact, value_exact, value_iteration, OccupancyMeasure, PolicyEvaluator,
    ValueIterationResult,
};
pub use policy::{
    softmax_jacobian, DifferentiablePolicy, Parameterization, Policy, SoftmaxPolicy,
    TabularPolicy,
};
pub use sampling::{sample_episode, Step, Terminal, Trajectory};
pub use simplex::simplex_project;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

/// An S×A table indexed `(state, action)`.
pub type Table = DMatrix<f64>;

pub(crate) const STOCHASTIC_TOL: f64 = 1e-12;

/// A finite MDP with per-action transition kernels, an initial distribution,
/// a discount factor and optional reward and cost channels.
#[derive(Debug, Clone)]
pub struct Mdp {
    num_states: usize,
    num_actions: usize,
    transitions: Vec<DMatrix<f64>>,
    initial: DVector<f64>,
    gamma: f64,
    reward: Option<Table>,
    cost: Option<Table>,
    terminal: Vec<bool>,
    // Nonzero successors of each (s, a) as (next, probability, cumulative), index s * A + a.
    successors: Vec<Vec<(usize, f64, f64)>>,
    initial_cdf: Vec<f64>,
}

impl Mdp {
    /// Builds an MDP from `transitions[a]` (S×S, row-stochastic), the initial
    /// distribution and the discount.
    pub fn new(transitions: Vec<DMatrix<f64>>, initial: DVector<f64>, gamma: f64) -> Result<Self> {
        let num_actions = transitions.len();
        if num_actions == 0 {
            return Err(Error::InvalidModel("at least one action is required".into()));
        }
        let num_states = initial.len();
        if num_states == 0 {
            return Err(Error::InvalidModel("at least one state is required".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidModel(format!("discount {gamma} not in (0, 1)")));
        }
        for (a, p) in transitions.iter().enumerate() {
            if p.nrows() != num_states || p.ncols() != num_states {
                return Err(Error::dim(format!(
                    "P_{a} is {}x{}, expected {num_states}x{num_states}",
                    p.nrows(),
                    p.ncols()
                )));
            }
            for i in 0..num_states {
                let row = p.row(i);
                if row.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                    return Err(Error::InvalidModel(format!("P_{a} row {i} has a negative or non-finite entry")));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(Error::InvalidModel(format!("P_{a} row {i} sums to {sum}")));
                }
            }
        }
        check_distribution(initial.as_slice(), "initial distribution")?;

        let mut successors = Vec::with_capacity(num_states * num_actions);
        for s in 0..num_states {
            for p in &transitions {
                let mut acc = 0.0;
                let mut list = Vec::new();
                for j in 0..num_states {
                    let q = p[(s, j)];
                    if q > 0.0 {
                        acc += q;
                        list.push((j, q, acc));
                    }
                }
                successors.push(list);
            }
        }
        let initial_cdf = cumulative(initial.as_slice());

        Ok(Self {
            num_states,
            num_actions,
            transitions,
            initial,
            gamma,
            reward: None,
            cost: None,
            terminal: vec![false; num_states],
            successors,
            initial_cdf,
        })
    }

    pub fn with_reward(mut self, reward: Table) -> Result<Self> {
        self.check_table(&reward, "reward")?;
        self.reward = Some(reward);
        Ok(self)
    }

    pub fn with_cost(mut self, cost: Table) -> Result<Self> {
        self.check_table(&cost, "cost")?;
        self.cost = Some(cost);
        Ok(self)
    }

    /// Marks absorbing states at which episode sampling stops early.
    pub fn with_terminals(mut self, terminal: Vec<bool>) -> Result<Self> {
        if terminal.len() != self.num_states {
            return Err(Error::dim("terminal mask length must equal S"));
        }
        for (s, _) in terminal.iter().enumerate().filter(|(_, &t)| t) {
            for (a, p) in self.transitions.iter().enumerate() {
                if (p[(s, s)] - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(Error::InvalidModel(format!(
                        "terminal state {s} is not absorbing under action {a}"
                    )));
                }
            }
        }
        self.terminal = terminal;
        Ok(self)
    }

    /// Replaces the initial distribution.
    pub fn with_initial(mut self, initial: DVector<f64>) -> Result<Self> {
        if initial.len() != self.num_states {
            return Err(Error::dim("initial distribution length must equal S"));
        }
        check_distribution(initial.as_slice(), "initial distribution")?;
        self.initial_cdf = cumulative(initial.as_slice());
        self.initial = initial;
        Ok(self)
    }

    fn check_table(&self, t: &Table, what: &str) -> Result<()> {
        if t.nrows() != self.num_states || t.ncols() != self.num_actions {
            return Err(Error::dim(format!(
                "{what} table is {}x{}, expected {}x{}",
                t.nrows(),
                t.ncols(),
                self.num_states,
                self.num_actions
            )));
        }
        if t.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidModel(format!("{what} table has non-finite entries")));
        }
        Ok(())
    }

    pub(crate) fn check_shape(&self, t: &Table, what: &str) -> Result<()> {
        if t.nrows() != self.num_states || t.ncols() != self.num_actions {
            return Err(Error::dim(format!(
                "{what} is {}x{}, expected {}x{}",
                t.nrows(),
                t.ncols(),
                self.num_states,
                self.num_actions
            )));
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transition(&self, action: usize) -> &DMatrix<f64> {
        &self.transitions[action]
    }

    pub fn initial(&self) -> &DVector<f64> {
        &self.initial
    }

    pub fn reward(&self) -> Option<&Table> {
        self.reward.as_ref()
    }

    pub fn cost(&self) -> Option<&Table> {
        self.cost.as_ref()
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn terminals(&self) -> &[bool] {
        &self.terminal
    }

    /// P_π(i, j) = Σ_a π(a|i) P_a(i, j).
    pub fn policy_transition(&self, policy: &TabularPolicy) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.num_states, self.num_states);
        for (a, pa) in self.transitions.iter().enumerate() {
            for i in 0..self.num_states {
                let w = policy.prob(i, a);
                if w != 0.0 {
                    for j in 0..self.num_states {
                        p[(i, j)] += w * pa[(i, j)];
                    }
                }
            }
        }
        p
    }

    pub(crate) fn check_policy(&self, policy: &TabularPolicy) -> Result<()> {
        if policy.num_states() != self.num_states || policy.num_actions() != self.num_actions {
            return Err(Error::dim(format!(
                "policy is {}x{}, MDP is {}x{}",
                policy.num_states(),
                policy.num_actions(),
                self.num_states,
                self.num_actions
            )));
        }
        Ok(())
    }

    pub(crate) fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_cdf(&self.initial_cdf, rng)
    }

    pub(crate) fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        let list = &self.successors[s * self.num_actions + a];
        let u: f64 = rng.random::<f64>() * list.last().map_or(1.0, |x| x.2);
        list.iter().find(|x| u < x.2).or(list.last()).map(|x| x.0).unwrap_or(s)
    }

    /// Nonzero transition probabilities out of `(s, a)`.
    pub fn successors(&self, s: usize, a: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.successors[s * self.num_actions + a].iter().map(|&(j, p, _)| (j, p))
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidModel(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::InvalidModel(format!("{what} sums to {sum}")));
    }
    Ok(())
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    p.iter()
        .scan(0.0, |acc, &x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

pub(crate) fn sample_cdf<R: Rng + ?Sized>(cdf: &[f64], rng: &mut R) -> usize {
    let total = *cdf.last().unwrap_or(&1.0);
    let u: f64 = rng.random::<f64>() * total;
    // Skip zero-probability entries whose cumulative value equals the previous one.
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

/// Categorical draw from unnormalized nonnegative weights.
pub(crate) fn sample_weights<R: Rng + ?Sized>(weights: impl Iterator<Item = f64> + Clone, rng: &mut R) -> usize {
    let total: f64 = weights.clone().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, w) in weights.enumerate() {
        if w > 0.0 {
            last_positive = i;
            acc += w;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}
