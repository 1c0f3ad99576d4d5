use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sample_weights, Table, STOCHASTIC_TOL};
use crate::error::{Error, Result};

/// A stationary stochastic policy π(a|s) stored as an S×A table.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    probs: Table,
}

impl TabularPolicy {
    pub fn new(probs: Table) -> Result<Self> {
        if probs.nrows() == 0 || probs.ncols() == 0 {
            return Err(Error::InvalidPolicy("empty policy table".into()));
        }
        for s in 0..probs.nrows() {
            let row = probs.row(s);
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidPolicy(format!("row {s} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidPolicy(format!("row {s} sums to {sum}")));
            }
        }
        Ok(Self { probs })
    }

    pub(crate) fn new_unchecked(probs: Table) -> Self {
        Self { probs }
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            probs: DMatrix::from_element(num_states, num_actions, 1.0 / num_actions as f64),
        }
    }

    /// The deterministic policy choosing `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], num_actions: usize) -> Result<Self> {
        let mut probs = DMatrix::zeros(actions.len(), num_actions);
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(Error::InvalidPolicy(format!("action {a} out of range at state {s}")));
            }
            probs[(s, a)] = 1.0;
        }
        Ok(Self { probs })
    }

    pub fn num_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn num_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn probs(&self) -> &Table {
        &self.probs
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[(s, a)]
    }

    pub fn into_table(self) -> Table {
        self.probs
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        let row = self.probs.row(s);
        sample_weights(row.iter().copied(), rng)
    }

    /// Σ_a π(a|s) z(s, a) for every state.
    pub fn expect_rows(&self, z: &Table) -> Vec<f64> {
        (0..self.num_states())
            .map(|s| self.probs.row(s).dot(&z.row(s)))
            .collect()
    }
}

/// Softmax policy π_θ(a|s) = exp(θ_sa) / Σ_a' exp(θ_sa').
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    theta: Table,
    probs: TabularPolicy,
}

impl SoftmaxPolicy {
    pub fn new(theta: Table) -> Result<Self> {
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidPolicy("softmax parameters must be finite".into()));
        }
        if theta.nrows() == 0 || theta.ncols() == 0 {
            return Err(Error::InvalidPolicy("empty parameter table".into()));
        }
        let probs = TabularPolicy::new_unchecked(softmax_rows(&theta));
        Ok(Self { theta, probs })
    }

    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self::new(DMatrix::zeros(num_states, num_actions)).expect("zero parameters are valid")
    }

    pub fn theta(&self) -> &Table {
        &self.theta
    }

    pub fn policy(&self) -> &TabularPolicy {
        &self.probs
    }

    /// Subtracts each state's mean parameter; the policy is unchanged.
    pub fn shift_normalized(&self) -> Self {
        let mut theta = self.theta.clone();
        for s in 0..theta.nrows() {
            let mean = theta.row(s).mean();
            theta.row_mut(s).add_scalar_mut(-mean);
        }
        Self::new(theta).expect("shifted parameters stay finite")
    }
}

fn softmax_rows(theta: &Table) -> Table {
    let mut out = theta.clone();
    for s in 0..theta.nrows() {
        let max = theta.row(s).max();
        let mut row = out.row_mut(s);
        row.apply(|x| *x = (*x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// ∂π(a|s)/∂θ_{s'a'} as an A×(S·A) table; column index is `s' * A + a'`.
/// Only the columns of state `s` are nonzero.
pub fn softmax_jacobian(policy: &SoftmaxPolicy, s: usize) -> Result<DMatrix<f64>> {
    let num_states = policy.theta.nrows();
    let num_actions = policy.theta.ncols();
    if s >= num_states {
        return Err(Error::StateOutOfRange { state: s, num_states });
    }
    let mut jac = DMatrix::zeros(num_actions, num_states * num_actions);
    for a in 0..num_actions {
        let pa = policy.probs.prob(s, a);
        for b in 0..num_actions {
            let delta = if a == b { 1.0 } else { 0.0 };
            jac[(a, s * num_actions + b)] = pa * (delta - policy.probs.prob(s, b));
        }
    }
    Ok(jac)
}

/// A policy whose action probabilities are differentiable in an S×A
/// parameter table.
pub trait DifferentiablePolicy {
    fn tabular(&self) -> &TabularPolicy;

    fn params(&self) -> &Table;

    /// `out[s, ·] += scale · Σ_a weights[a] ∇_θ π(a|s)`.
    ///
    /// Every supported parameterization only touches row `s` of the
    /// parameter table.
    fn add_score_contraction(&self, s: usize, weights: &[f64], scale: f64, out: &mut Table);
}

impl DifferentiablePolicy for TabularPolicy {
    fn tabular(&self) -> &TabularPolicy {
        self
    }

    fn params(&self) -> &Table {
        &self.probs
    }

    fn add_score_contraction(&self, s: usize, weights: &[f64], scale: f64, out: &mut Table) {
        for (a, w) in weights.iter().enumerate() {
            out[(s, a)] += scale * w;
        }
    }
}

impl DifferentiablePolicy for SoftmaxPolicy {
    fn tabular(&self) -> &TabularPolicy {
        &self.probs
    }

    fn params(&self) -> &Table {
        &self.theta
    }

    fn add_score_contraction(&self, s: usize, weights: &[f64], scale: f64, out: &mut Table) {
        let row = self.probs.probs.row(s);
        let mean: f64 = row.iter().zip(weights).map(|(p, w)| p * w).sum();
        for (a, w) in weights.iter().enumerate() {
            out[(s, a)] += scale * row[a] * (w - mean);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Direct parameters θ = π, constrained to the per-state simplex.
    Tabular,
    #[default]
    Softmax,
}

/// A policy in either supported parameterization.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Tabular(TabularPolicy),
    Softmax(SoftmaxPolicy),
}

impl Policy {
    /// The uniform policy in the given parameterization.
    pub fn uniform(kind: Parameterization, num_states: usize, num_actions: usize) -> Self {
        match kind {
            Parameterization::Tabular => Policy::Tabular(TabularPolicy::uniform(num_states, num_actions)),
            Parameterization::Softmax => Policy::Softmax(SoftmaxPolicy::zeros(num_states, num_actions)),
        }
    }

    pub fn from_params(kind: Parameterization, params: Table) -> Result<Self> {
        Ok(match kind {
            Parameterization::Tabular => Policy::Tabular(TabularPolicy::new(params)?),
            Parameterization::Softmax => Policy::Softmax(SoftmaxPolicy::new(params)?),
        })
    }

    pub fn kind(&self) -> Parameterization {
        match self {
            Policy::Tabular(_) => Parameterization::Tabular,
            Policy::Softmax(_) => Parameterization::Softmax,
        }
    }
}

impl DifferentiablePolicy for Policy {
    fn tabular(&self) -> &TabularPolicy {
        match self {
            Policy::Tabular(p) => p,
            Policy::Softmax(p) => p.policy(),
        }
    }

    fn params(&self) -> &Table {
        match self {
            Policy::Tabular(p) => p.params(),
            Policy::Softmax(p) => p.params(),
        }
    }

    fn add_score_contraction(&self, s: usize, weights: &[f64], scale: f64, out: &mut Table) {
        match self {
            Policy::Tabular(p) => p.add_score_contraction(s, weights, scale, out),
            Policy::Softmax(p) => p.add_score_contraction(s, weights, scale, out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand_distr::{Distribution, StandardNormal};

    fn random_theta(s: usize, a: usize, seed: u64) -> Table {
        let mut rng = stream(seed, 0);
        DMatrix::from_fn(s, a, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn uniform_two_action_jacobian_is_quarter() {
        let p = SoftmaxPolicy::zeros(1, 2);
        let j = softmax_jacobian(&p, 0).unwrap();
        assert_eq!(j[(0, 0)], 0.25);
        assert_eq!(j[(0, 1)], -0.25);
        assert_eq!(j[(1, 0)], -0.25);
        assert_eq!(j[(1, 1)], 0.25);
    }

    #[test]
    fn jacobian_columns_sum_to_zero_over_actions() {
        let p = SoftmaxPolicy::new(random_theta(3, 4, 11)).unwrap();
        for s in 0..3 {
            let j = softmax_jacobian(&p, s).unwrap();
            for c in 0..j.ncols() {
                assert!(j.column(c).sum().abs() < 1e-15);
            }
            // ...and each action row sums to zero over the state's parameters
            for a in 0..4 {
                assert!(j.row(a).sum().abs() < 1e-15);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let theta = random_theta(3, 3, 5);
        let p = SoftmaxPolicy::new(theta.clone()).unwrap();
        let h = 1e-6;
        for s in 0..3 {
            let j = softmax_jacobian(&p, s).unwrap();
            let mut fd = DMatrix::zeros(3, 9);
            for col in 0..9 {
                let (ss, aa) = (col / 3, col % 3);
                let mut tp = theta.clone();
                tp[(ss, aa)] += h;
                let mut tm = theta.clone();
                tm[(ss, aa)] -= h;
                let pp = SoftmaxPolicy::new(tp).unwrap();
                let pm = SoftmaxPolicy::new(tm).unwrap();
                for a in 0..3 {
                    fd[(a, col)] = (pp.policy().prob(s, a) - pm.policy().prob(s, a)) / (2.0 * h);
                }
            }
            let rel = (&j - &fd).norm() / j.norm();
            assert!(rel < 1e-5, "rel err {rel}");
        }
    }

    #[test]
    fn jacobian_rejects_bad_state() {
        let p = SoftmaxPolicy::zeros(2, 2);
        assert!(matches!(softmax_jacobian(&p, 2), Err(Error::StateOutOfRange { .. })));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let theta = random_theta(4, 3, 2);
        let p = SoftmaxPolicy::new(theta.clone()).unwrap();
        let mut shifted = theta;
        shifted.row_mut(2).add_scalar_mut(17.0);
        let q = SoftmaxPolicy::new(shifted).unwrap();
        assert!((p.policy().probs() - q.policy().probs()).amax() < 1e-14);
        let n = q.shift_normalized();
        assert!(n.theta().row(2).sum().abs() < 1e-12);
        assert!((n.policy().probs() - p.policy().probs()).amax() < 1e-14);
    }

    #[test]
    fn score_contraction_matches_jacobian() {
        let p = SoftmaxPolicy::new(random_theta(2, 3, 9)).unwrap();
        let w = [0.3, -1.2, 2.0];
        let mut out = DMatrix::zeros(2, 3);
        p.add_score_contraction(1, &w, 1.0, &mut out);
        let j = softmax_jacobian(&p, 1).unwrap();
        for b in 0..3 {
            let expect: f64 = (0..3).map(|a| w[a] * j[(a, 3 + b)]).sum();
            assert!((out[(1, b)] - expect).abs() < 1e-15);
            assert_eq!(out[(0, b)], 0.0);
        }
    }

    #[test]
    fn tabular_validation() {
        assert!(TabularPolicy::new(DMatrix::from_row_slice(1, 2, &[0.7, 0.4])).is_err());
        assert!(TabularPolicy::new(DMatrix::from_row_slice(1, 2, &[1.1, -0.1])).is_err());
        assert!(TabularPolicy::deterministic(&[0, 3], 2).is_err());
    }
}
