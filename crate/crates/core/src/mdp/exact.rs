use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, LU, Dyn};

use super::{DifferentiablePolicy, Mdp, Table, TabularPolicy};
use crate::error::{Error, Result};

/// Discounted state-action occupancy measure λ_sa = Σ_t γ^t P(s_t = s, a_t = a).
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasure {
    lambda: Table,
    gamma: f64,
}

impl OccupancyMeasure {
    /// Wraps a nonnegative table. Flow conservation is not checked here; see
    /// [`flow_residual`].
    pub fn new(lambda: Table, gamma: f64) -> Result<Self> {
        if lambda.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidArgument("occupancy entries must be finite and nonnegative".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidArgument(format!("discount {gamma} not in (0, 1)")));
        }
        Ok(Self { lambda, gamma })
    }

    pub fn lambda(&self) -> &Table {
        &self.lambda
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn into_table(self) -> Table {
        self.lambda
    }

    /// μ̃_s = Σ_a λ_sa.
    pub fn state_occupancy(&self) -> DVector<f64> {
        DVector::from_iterator(self.lambda.nrows(), self.lambda.row_iter().map(|r| r.sum()))
    }

    /// d_s = (1 − γ) Σ_a λ_sa, a probability vector.
    pub fn visitation(&self) -> DVector<f64> {
        self.state_occupancy() * (1.0 - self.gamma)
    }

    pub fn mass(&self) -> f64 {
        self.lambda.sum()
    }
}

/// L1 norm of the flow-conservation residual μ̃_j − γ Σ_{i,a} P_a(i,j) λ_ia − ξ_j.
pub fn flow_residual(mdp: &Mdp, lambda: &Table) -> f64 {
    let n = mdp.num_states();
    let mut inflow = DVector::<f64>::zeros(n);
    for a in 0..mdp.num_actions() {
        let col = lambda.column(a);
        inflow += mdp.transition(a).tr_mul(&col);
    }
    let mut res = 0.0;
    for j in 0..n {
        let mu_j: f64 = lambda.row(j).sum();
        res += (mu_j - mdp.gamma() * inflow[j] - mdp.initial()[j]).abs();
    }
    res
}

/// Cached exact evaluation of one policy: LU factorizations of
/// `I − γ P_π` and its transpose.
#[derive(Debug)]
pub struct PolicyEvaluator {
    gamma: f64,
    num_states: usize,
    num_actions: usize,
    policy: TabularPolicy,
    transitions: Vec<DMatrix<f64>>,
    values_lu: LU<f64, Dyn, Dyn>,
    state_occupancy: DVector<f64>,
    // Row (s * A + a) holds γ Σ_k P_a(s, k) (I − γP_π)^{-1}(k, ·).
    next_value_op: OnceLock<DMatrix<f64>>,
}

impl PolicyEvaluator {
    pub fn new(mdp: &Mdp, policy: &TabularPolicy) -> Result<Self> {
        mdp.check_policy(policy)?;
        let n = mdp.num_states();
        let p_pi = mdp.policy_transition(policy);
        let system = DMatrix::identity(n, n) - &p_pi * mdp.gamma();
        let occupancy_lu = system.transpose().lu();
        let state_occupancy = occupancy_lu
            .solve(mdp.initial())
            .ok_or_else(|| Error::Singular("I - γ P_π^T is singular".into()))?;
        if state_occupancy.iter().any(|x| !x.is_finite()) {
            return Err(Error::Singular("non-finite occupancy".into()));
        }
        let values_lu = system.lu();
        if !values_lu.is_invertible() {
            return Err(Error::Singular("I - γ P_π is singular".into()));
        }
        Ok(Self {
            gamma: mdp.gamma(),
            num_states: n,
            num_actions: mdp.num_actions(),
            policy: policy.clone(),
            transitions: (0..mdp.num_actions()).map(|a| mdp.transition(a).clone()).collect(),
            values_lu,
            state_occupancy,
            next_value_op: OnceLock::new(),
        })
    }

    pub fn policy(&self) -> &TabularPolicy {
        &self.policy
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// μ̃ solving (I − γ P_πᵀ) μ̃ = ξ.
    pub fn state_occupancy(&self) -> &DVector<f64> {
        &self.state_occupancy
    }

    pub fn occupancy(&self) -> OccupancyMeasure {
        let mut lambda = self.policy.probs().clone();
        for s in 0..self.num_states {
            // clamp roundoff below zero
            let mu = self.state_occupancy[s].max(0.0);
            lambda.row_mut(s).scale_mut(mu);
        }
        OccupancyMeasure { lambda, gamma: self.gamma }
    }

    /// ⟨λ^π, z⟩.
    pub fn value(&self, z: &Table) -> f64 {
        let z_pi = self.policy.expect_rows(z);
        z_pi.iter().zip(self.state_occupancy.iter()).map(|(a, b)| a * b).sum()
    }

    /// V solving (I − γ P_π) V = z_π.
    pub fn state_values(&self, z: &Table) -> DVector<f64> {
        let z_pi = DVector::from_vec(self.policy.expect_rows(z));
        self.values_lu.solve(&z_pi).expect("factorization checked invertible")
    }

    /// Q = z + γ P V.
    pub fn q_values(&self, z: &Table) -> Table {
        let v = self.state_values(z);
        let mut q = z.clone();
        for a in 0..self.num_actions {
            let pv = &self.transitions[a] * &v;
            for s in 0..self.num_states {
                q[(s, a)] += self.gamma * pv[s];
            }
        }
        q
    }

    fn next_value_op(&self) -> &DMatrix<f64> {
        self.next_value_op.get_or_init(|| {
            let inv = self
                .values_lu
                .try_inverse()
                .expect("factorization checked invertible");
            let mut op = DMatrix::zeros(self.num_states * self.num_actions, self.num_states);
            for a in 0..self.num_actions {
                let block = &self.transitions[a] * &inv * self.gamma;
                for s in 0..self.num_states {
                    op.row_mut(s * self.num_actions + a).copy_from(&block.row(s));
                }
            }
            op
        })
    }

    /// Q(s, ·; z) given the precomputed policy expectation `z_pi` of `z`.
    /// Costs O(S·A) after a one-time O(S³·A) setup.
    pub fn q_row_into(&self, s: usize, z: &Table, z_pi: &DVector<f64>, out: &mut [f64]) {
        let op = self.next_value_op();
        for (a, o) in out.iter_mut().enumerate().take(self.num_actions) {
            *o = z[(s, a)] + op.row(s * self.num_actions + a).transpose().dot(z_pi);
        }
    }

    /// Σ_s μ̃_s Σ_a Q(s, a; z) ∇_θ π(a|s).
    pub fn policy_gradient<P: DifferentiablePolicy + ?Sized>(&self, policy: &P, z: &Table) -> Table {
        let q = self.q_values(z);
        let mut grad = DMatrix::zeros(self.num_states, self.num_actions);
        let mut row = vec![0.0; self.num_actions];
        for s in 0..self.num_states {
            for (a, r) in row.iter_mut().enumerate() {
                *r = q[(s, a)];
            }
            policy.add_score_contraction(s, &row, self.state_occupancy[s], &mut grad);
        }
        grad
    }
}

pub fn occupancy_exact(mdp: &Mdp, policy: &TabularPolicy) -> Result<OccupancyMeasure> {
    Ok(PolicyEvaluator::new(mdp, policy)?.occupancy())
}

/// π(a|s) = λ_sa / Σ_a' λ_sa'.
pub fn extract_policy(lambda: &OccupancyMeasure) -> Result<TabularPolicy> {
    let mut probs = lambda.lambda().clone();
    for s in 0..probs.nrows() {
        let total: f64 = probs.row(s).sum();
        if !(total > 0.0) {
            return Err(Error::UnreachableState(s));
        }
        probs.row_mut(s).unscale_mut(total);
    }
    Ok(TabularPolicy::new_unchecked(probs))
}

pub fn value_exact(mdp: &Mdp, policy: &TabularPolicy, z: &Table) -> Result<f64> {
    mdp.check_shape(z, "z")?;
    Ok(PolicyEvaluator::new(mdp, policy)?.value(z))
}

pub fn q_values_exact(mdp: &Mdp, policy: &TabularPolicy, z: &Table) -> Result<Table> {
    mdp.check_shape(z, "z")?;
    Ok(PolicyEvaluator::new(mdp, policy)?.q_values(z))
}

/// Closed-form policy gradient Σ_s μ̃_s Σ_a Q(s,a;z) ∇_θ π_θ(a|s).
pub fn exact_policy_gradient<P: DifferentiablePolicy + ?Sized>(mdp: &Mdp, policy: &P, z: &Table) -> Result<Table> {
    mdp.check_shape(z, "z")?;
    mdp.check_shape(policy.params(), "policy parameters")?;
    Ok(PolicyEvaluator::new(mdp, policy.tabular())?.policy_gradient(policy, z))
}

/// Truncation horizon K with γ^K / (1 − γ) < 1e-6.
pub fn default_horizon(gamma: f64) -> usize {
    ((1e-6 * (1.0 - gamma)).ln() / gamma.ln()).ceil().max(1.0) as usize
}

#[derive(Debug, Clone)]
pub struct ValueIterationResult {
    pub values: DVector<f64>,
    pub greedy: Vec<usize>,
    pub iterations: usize,
}

/// Value iteration for the reward table `reward`, stopped once the sup-norm
/// error bound of the iterate falls below `tol`. `warm` seeds the iterate.
pub fn value_iteration(mdp: &Mdp, reward: &Table, tol: f64, warm: Option<&DVector<f64>>) -> Result<ValueIterationResult> {
    mdp.check_shape(reward, "reward")?;
    let n = mdp.num_states();
    let na = mdp.num_actions();
    let gamma = mdp.gamma();
    let mut v = match warm {
        Some(w) if w.len() == n => w.clone(),
        _ => DVector::zeros(n),
    };
    let mut next = DVector::zeros(n);
    let mut greedy = vec![0usize; n];
    let threshold = tol * (1.0 - gamma) / gamma;
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut delta: f64 = 0.0;
        for s in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut best_a = 0;
            for a in 0..na {
                let q = reward[(s, a)] + gamma * mdp.successors(s, a).map(|(j, p)| p * v[j]).sum::<f64>();
                if q > best {
                    best = q;
                    best_a = a;
                }
            }
            next[s] = best;
            greedy[s] = best_a;
            delta = delta.max((best - v[s]).abs());
        }
        std::mem::swap(&mut v, &mut next);
        if delta <= threshold || iterations >= 1_000_000 {
            break;
        }
    }
    Ok(ValueIterationResult { values: v, greedy, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{Policy, SoftmaxPolicy};
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn one_state(gamma: f64) -> Mdp {
        Mdp::new(vec![DMatrix::identity(1, 1)], DVector::from_element(1, 1.0), gamma).unwrap()
    }

    fn swap_chain(gamma: f64) -> Mdp {
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        Mdp::new(vec![p], DVector::from_vec(vec![1.0, 0.0]), gamma).unwrap()
    }

    // Dense random model local to these tests; the public generator lives in `env`.
    fn random_model(n: usize, na: usize, gamma: f64, seed: u64) -> Mdp {
        let mut rng = stream(seed, 0);
        let mut norm_row = |len: usize| {
            let v: Vec<f64> = (0..len).map(|_| rng.random::<f64>() + 0.05).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let ps = (0..na)
            .map(|_| {
                let rows: Vec<f64> = (0..n).flat_map(|_| norm_row(n)).collect();
                DMatrix::from_row_slice(n, n, &rows)
            })
            .collect();
        let xi = DVector::from_vec(norm_row(n));
        Mdp::new(ps, xi, gamma).unwrap()
    }

    fn random_table(n: usize, na: usize, seed: u64) -> Table {
        let mut rng = stream(seed, 1);
        DMatrix::from_fn(n, na, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn single_state_mass_is_geometric() {
        let m = one_state(0.5);
        let occ = occupancy_exact(&m, &TabularPolicy::uniform(1, 1)).unwrap();
        assert!((occ.lambda()[(0, 0)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn swap_chain_splits_even_and_odd_steps() {
        let m = swap_chain(0.5);
        let occ = occupancy_exact(&m, &TabularPolicy::uniform(2, 1)).unwrap();
        assert!((occ.lambda()[(0, 0)] - 4.0 / 3.0).abs() < 1e-14);
        assert!((occ.lambda()[(1, 0)] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn flow_and_mass_invariants() {
        for seed in 0..10 {
            let m = random_model(6, 3, 0.9, seed);
            let pi = SoftmaxPolicy::new(random_table(6, 3, seed + 100)).unwrap();
            let occ = occupancy_exact(&m, pi.policy()).unwrap();
            assert!(flow_residual(&m, occ.lambda()) < 1e-9);
            assert!((occ.mass() - 10.0).abs() < 1e-9);
            assert!(occ.lambda().iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn extract_policy_normalizes_rows() {
        let occ = OccupancyMeasure::new(DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 2.0, 2.0]), 0.9).unwrap();
        let pi = extract_policy(&occ).unwrap();
        assert_eq!(pi.prob(0, 0), 0.75);
        assert_eq!(pi.prob(0, 1), 0.25);
        assert_eq!(pi.prob(1, 0), 0.5);
        let zero = OccupancyMeasure::new(DMatrix::from_row_slice(2, 1, &[1.0, 0.0]), 0.9).unwrap();
        assert!(matches!(extract_policy(&zero), Err(Error::UnreachableState(1))));
    }

    #[test]
    fn extract_inverts_occupancy() {
        let m = random_model(5, 3, 0.9, 3);
        let pi = SoftmaxPolicy::new(random_table(5, 3, 4)).unwrap();
        let back = extract_policy(&occupancy_exact(&m, pi.policy()).unwrap()).unwrap();
        assert!((back.probs() - pi.policy().probs()).amax() < 1e-12);
    }

    #[test]
    fn constant_reward_values() {
        let m = random_model(4, 2, 0.9, 8);
        let pi = TabularPolicy::uniform(4, 2);
        let ones = DMatrix::from_element(4, 2, 1.0);
        assert!((value_exact(&m, &pi, &ones).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(value_exact(&m, &pi, &DMatrix::zeros(4, 2)).unwrap(), 0.0);
        let q = q_values_exact(&m, &pi, &ones).unwrap();
        assert!(q.iter().all(|&x| (x - 10.0).abs() < 1e-12));
        assert!(value_exact(&m, &pi, &DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn absorbing_zero_state_has_q_equal_z() {
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let m = Mdp::new(vec![p.clone(), p], DVector::from_vec(vec![1.0, 0.0]), 0.9).unwrap();
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 0.0]);
        let q = q_values_exact(&m, &TabularPolicy::uniform(2, 2), &z).unwrap();
        assert_eq!(q[(1, 0)], 0.0);
        assert_eq!(q[(1, 1)], 0.0);
        assert!((q[(0, 1)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn bellman_consistency() {
        let m = random_model(6, 3, 0.95, 21);
        let pi = SoftmaxPolicy::new(random_table(6, 3, 22)).unwrap();
        let z = random_table(6, 3, 23);
        let q = q_values_exact(&m, pi.policy(), &z).unwrap();
        for s in 0..6 {
            for a in 0..3 {
                let mut rhs = z[(s, a)];
                for j in 0..6 {
                    let vj: f64 = (0..3).map(|b| pi.policy().prob(j, b) * q[(j, b)]).sum();
                    rhs += 0.95 * m.transition(a)[(s, j)] * vj;
                }
                assert!((q[(s, a)] - rhs).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn q_row_matches_full_q() {
        let m = random_model(5, 3, 0.9, 31);
        let pi = SoftmaxPolicy::new(random_table(5, 3, 32)).unwrap();
        let z = random_table(5, 3, 33);
        let ev = PolicyEvaluator::new(&m, pi.policy()).unwrap();
        let q = ev.q_values(&z);
        let z_pi = DVector::from_vec(pi.policy().expect_rows(&z));
        let mut row = vec![0.0; 3];
        for s in 0..5 {
            ev.q_row_into(s, &z, &z_pi, &mut row);
            for a in 0..3 {
                assert!((row[a] - q[(s, a)]).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn zero_z_gives_zero_gradient() {
        let m = random_model(4, 3, 0.9, 5);
        let pi = Policy::Softmax(SoftmaxPolicy::new(random_table(4, 3, 6)).unwrap());
        let g = exact_policy_gradient(&m, &pi, &DMatrix::zeros(4, 3)).unwrap();
        assert_eq!(g.amax(), 0.0);
    }

    #[test]
    fn single_state_softmax_gradient_is_jacobian_row() {
        // One state, self loop: V = Σ_a π(a) z_a / (1 − γ), so ∇_θ V = (z_a* / (1-γ)) ∇π(a*).
        let m = Mdp::new(vec![DMatrix::identity(1, 1); 3], DVector::from_element(1, 1.0), 0.8).unwrap();
        let theta = DMatrix::from_row_slice(1, 3, &[0.2, -0.5, 1.0]);
        let pi = SoftmaxPolicy::new(theta).unwrap();
        let z = DMatrix::from_row_slice(1, 3, &[0.0, 2.0, 0.0]);
        let g = exact_policy_gradient(&m, &pi, &z).unwrap();
        let j = crate::mdp::softmax_jacobian(&pi, 0).unwrap();
        for b in 0..3 {
            assert!((g[(0, b)] - 2.0 / 0.2 * j[(1, b)]).abs() < 1e-12);
        }
    }

    fn fd_gradient(m: &Mdp, theta: &Table, z: &Table, h: f64) -> Table {
        DMatrix::from_fn(theta.nrows(), theta.ncols(), |s, a| {
            let mut tp = theta.clone();
            tp[(s, a)] += h;
            let mut tm = theta.clone();
            tm[(s, a)] -= h;
            let vp = value_exact(m, SoftmaxPolicy::new(tp).unwrap().policy(), z).unwrap();
            let vm = value_exact(m, SoftmaxPolicy::new(tm).unwrap().policy(), z).unwrap();
            (vp - vm) / (2.0 * h)
        })
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let m = random_model(5, 3, 0.9, 40 + seed);
            let theta = random_table(5, 3, 50 + seed);
            let z = random_table(5, 3, 60 + seed);
            let g = exact_policy_gradient(&m, &SoftmaxPolicy::new(theta.clone()).unwrap(), &z).unwrap();
            let fd = fd_gradient(&m, &theta, &z, 1e-5);
            let rel = (&g - &fd).norm() / fd.norm();
            assert!(rel < 1e-6, "seed {seed}: rel err {rel}");
        }
    }

    #[test]
    fn tabular_gradient_matches_directional_finite_differences() {
        // Directions tangent to the simplex keep every perturbed row a valid policy.
        let m = random_model(4, 3, 0.9, 70);
        let base = SoftmaxPolicy::new(random_table(4, 3, 71)).unwrap().policy().clone();
        let z = random_table(4, 3, 72);
        let g = exact_policy_gradient(&m, &base, &z).unwrap();
        let mut rng = stream(73, 0);
        for _ in 0..5 {
            let mut dir: Table = DMatrix::from_fn(4, 3, |_, _| { let e: f64 = StandardNormal.sample(&mut rng); e });
            for s in 0..4 {
                let mean = dir.row(s).mean();
                dir.row_mut(s).add_scalar_mut(-mean);
            }
            let h = 1e-5;
            let vp = value_exact(&m, &TabularPolicy::new(base.probs() + &dir * h).unwrap(), &z).unwrap();
            let vm = value_exact(&m, &TabularPolicy::new(base.probs() - &dir * h).unwrap(), &z).unwrap();
            let fd = (vp - vm) / (2.0 * h);
            let analytic = g.dot(&dir);
            assert!((fd - analytic).abs() <= 1e-6 * analytic.abs().max(1e-3));
        }
    }

    #[test]
    fn horizon_bounds_truncation_bias() {
        for &g in &[0.5, 0.9, 0.99] {
            let k = default_horizon(g);
            assert!(g.powi(k as i32) / (1.0 - g) < 1e-6);
            assert!(g.powi(k as i32 - 1) / (1.0 - g) >= 1e-6);
        }
    }

    #[test]
    fn value_iteration_matches_exact_greedy_value() {
        let m = random_model(5, 3, 0.9, 80);
        let r = random_table(5, 3, 81);
        let vi = value_iteration(&m, &r, 1e-10, None).unwrap();
        let pi = TabularPolicy::deterministic(&vi.greedy, 3).unwrap();
        let ev = PolicyEvaluator::new(&m, &pi).unwrap();
        let v = ev.state_values(&r);
        assert!((v - &vi.values).amax() < 1e-9);
        // No deterministic policy beats the greedy one.
        let mut rng = stream(82, 0);
        for _ in 0..50 {
            let acts: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
            let other = PolicyEvaluator::new(&m, &TabularPolicy::deterministic(&acts, 3).unwrap())
                .unwrap()
                .state_values(&r);
            assert!(other.iter().zip(vi.values.iter()).all(|(o, b)| *o <= b + 1e-9));
        }
    }
}
