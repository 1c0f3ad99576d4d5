//! Concave utilities F(λ) of the occupancy measure and their Fenchel duals
//! F*(z) = inf_λ ⟨λ, z⟩ − F(λ).
//!
//! Every utility is maximized. Values outside a utility's domain (a violated
//! log barrier, an off-domain dual point) are reported as `f64::NEG_INFINITY`.

use std::fmt::Debug;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::mdp::Table;
use crate::rng::{derive_seed, stream, tags};

/// Lower clamp applied inside logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

const COLLINEAR_TOL: f64 = 1e-9;
const EIGEN_GROUP_TOL: f64 = 1e-9;

pub trait Utility: Send + Sync + Debug {
    fn name(&self) -> &'static str;

    /// F(λ).
    fn value(&self, lambda: &Table) -> f64;

    /// An element of the superdifferential of F at λ (∇F where differentiable).
    fn grad(&self, lambda: &Table) -> Table;

    /// Bound on ‖∇F(λ)‖∞ over {‖λ‖₁ ≤ 2/(1−γ)}.
    fn ell_f(&self) -> f64;

    /// Strong-concavity modulus; 0 for merely concave utilities.
    fn strong_concavity(&self) -> f64 {
        0.0
    }

    /// The Fenchel dual, when available in closed form.
    fn dual(&self) -> Option<&dyn FenchelDual> {
        None
    }

    /// Errors when λ lies outside the utility's domain.
    fn check_domain(&self, _lambda: &Table) -> Result<()> {
        Ok(())
    }
}

/// Closed-form Fenchel dual of a utility.
pub trait FenchelDual: Send + Sync + Debug {
    /// F*(z), `NEG_INFINITY` off the dual domain.
    fn conjugate(&self, z: &Table) -> f64;

    /// Gradient of F* with respect to its free coordinates. For duals whose
    /// domain is restricted to state-constant tables, entry (s, a) holds the
    /// derivative along the whole row s.
    fn conjugate_grad(&self, z: &Table) -> Table;

    /// When the dual domain is a single ray, the saddle point pins z here.
    fn pinned(&self) -> Option<&Table> {
        None
    }

    /// Whether the dual domain is {z : z_sa = z_sa' for all a, a'}.
    fn state_constant(&self) -> bool {
        false
    }
}

fn dot(a: &Table, b: &Table) -> f64 {
    a.dot(b)
}

fn state_marginal(lambda: &Table, gamma: f64) -> Vec<f64> {
    lambda.row_iter().map(|r| (1.0 - gamma) * r.sum()).collect()
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// F(λ) = ⟨r, λ⟩.
#[derive(Debug, Clone)]
pub struct LinearUtility {
    reward: Table,
}

pub fn linear_utility(reward: Table) -> LinearUtility {
    LinearUtility { reward }
}

impl LinearUtility {
    pub fn reward(&self) -> &Table {
        &self.reward
    }
}

impl Utility for LinearUtility {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn value(&self, lambda: &Table) -> f64 {
        dot(&self.reward, lambda)
    }

    fn grad(&self, _lambda: &Table) -> Table {
        self.reward.clone()
    }

    fn ell_f(&self) -> f64 {
        self.reward.amax()
    }

    fn dual(&self) -> Option<&dyn FenchelDual> {
        Some(self)
    }
}

impl FenchelDual for LinearUtility {
    /// 0 when z is a nonnegative multiple of r, −∞ otherwise.
    fn conjugate(&self, z: &Table) -> f64 {
        let rr = self.reward.norm_squared();
        let scale_tol = COLLINEAR_TOL * z.amax().max(1.0);
        if rr == 0.0 {
            return if z.amax() <= scale_tol { 0.0 } else { f64::NEG_INFINITY };
        }
        let c = dot(z, &self.reward) / rr;
        if c < -COLLINEAR_TOL || (z - &self.reward * c).amax() > scale_tol {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    }

    fn conjugate_grad(&self, z: &Table) -> Table {
        DMatrix::zeros(z.nrows(), z.ncols())
    }

    fn pinned(&self) -> Option<&Table> {
        Some(&self.reward)
    }
}

/// Entropy of the normalized state visitation, −Σ_s λ̄_s log λ̄_s with
/// λ̄_s = (1−γ) Σ_a λ_sa.
#[derive(Debug, Clone)]
pub struct EntropyUtility {
    gamma: f64,
    strong_concavity: f64,
}

pub fn entropy_utility(gamma: f64) -> Result<EntropyUtility> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("discount {gamma} not in (0, 1)")));
    }
    Ok(EntropyUtility { gamma, strong_concavity: 0.0 })
}

impl EntropyUtility {
    pub fn with_strong_concavity(mut self, mu: f64) -> Self {
        self.strong_concavity = mu;
        self
    }
}

impl Utility for EntropyUtility {
    fn name(&self) -> &'static str {
        "entropy"
    }

    fn value(&self, lambda: &Table) -> f64 {
        -state_marginal(lambda, self.gamma).into_iter().map(xlogx).sum::<f64>()
    }

    fn grad(&self, lambda: &Table) -> Table {
        let bar = state_marginal(lambda, self.gamma);
        DMatrix::from_fn(lambda.nrows(), lambda.ncols(), |s, _| {
            -(1.0 - self.gamma) * (bar[s].max(LOG_CLAMP).ln() + 1.0)
        })
    }

    fn ell_f(&self) -> f64 {
        (1.0 - self.gamma) * (LOG_CLAMP.ln().abs() + 1.0)
    }

    fn strong_concavity(&self) -> f64 {
        self.strong_concavity
    }

    fn dual(&self) -> Option<&dyn FenchelDual> {
        Some(self)
    }
}

impl FenchelDual for EntropyUtility {
    /// F*(z) = −Σ_sa exp(−z_sa/(1−γ) − 1).
    fn conjugate(&self, z: &Table) -> f64 {
        let k = 1.0 - self.gamma;
        -z.iter().map(|&x| (-x / k - 1.0).exp()).sum::<f64>()
    }

    fn conjugate_grad(&self, z: &Table) -> Table {
        let k = 1.0 - self.gamma;
        z.map(|x| (-x / k - 1.0).exp() / k)
    }
}

/// Negative KL divergence of the state visitation from a prior,
/// −Σ_s λ̄_s log(λ̄_s / μ̄_s).
#[derive(Debug, Clone)]
pub struct KlUtility {
    prior: Vec<f64>,
    gamma: f64,
    strong_concavity: f64,
}

pub fn kl_utility(prior: &[f64], gamma: f64) -> Result<KlUtility> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("discount {gamma} not in (0, 1)")));
    }
    if prior.is_empty() || prior.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(Error::InvalidArgument("KL prior must be strictly positive".into()));
    }
    let total: f64 = prior.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("KL prior sums to {total}")));
    }
    // λ̄_s ≤ 1 on the polytope, so KL is 1-strongly convex in λ̄ there; in λ
    // coordinates that is (1−γ)² per unit of squared L1 distance.
    Ok(KlUtility { prior: prior.to_vec(), gamma, strong_concavity: (1.0 - gamma).powi(2) })
}

impl KlUtility {
    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn with_strong_concavity(mut self, mu: f64) -> Self {
        self.strong_concavity = mu;
        self
    }
}

impl Utility for KlUtility {
    fn name(&self) -> &'static str {
        "kl"
    }

    fn value(&self, lambda: &Table) -> f64 {
        let bar = state_marginal(lambda, self.gamma);
        -bar.iter()
            .zip(&self.prior)
            .map(|(&b, &m)| if b > 0.0 { b * (b / m).ln() } else { 0.0 })
            .sum::<f64>()
    }

    fn grad(&self, lambda: &Table) -> Table {
        let bar = state_marginal(lambda, self.gamma);
        DMatrix::from_fn(lambda.nrows(), lambda.ncols(), |s, _| {
            -(1.0 - self.gamma) * ((bar[s].max(LOG_CLAMP) / self.prior[s]).ln() + 1.0)
        })
    }

    fn ell_f(&self) -> f64 {
        let min = self.prior.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = self.prior.iter().cloned().fold(0.0, f64::max);
        let low = (LOG_CLAMP / max).ln() + 1.0;
        let high = (2.0 / min).ln() + 1.0;
        (1.0 - self.gamma) * low.abs().max(high.abs())
    }

    fn strong_concavity(&self) -> f64 {
        self.strong_concavity
    }

    fn dual(&self) -> Option<&dyn FenchelDual> {
        Some(self)
    }
}

impl FenchelDual for KlUtility {
    /// −Σ_s μ̄_s exp(−z_s/(1−γ) − 1) on state-constant z, −∞ elsewhere.
    fn conjugate(&self, z: &Table) -> f64 {
        let k = 1.0 - self.gamma;
        let mut total = 0.0;
        for (s, row) in z.row_iter().enumerate() {
            let z0 = row[0];
            if row.iter().any(|&x| (x - z0).abs() > COLLINEAR_TOL) {
                return f64::NEG_INFINITY;
            }
            total -= self.prior[s] * (-z0 / k - 1.0).exp();
        }
        total
    }

    fn conjugate_grad(&self, z: &Table) -> Table {
        let k = 1.0 - self.gamma;
        DMatrix::from_fn(z.nrows(), z.ncols(), |s, _| {
            self.prior[s] * (-z[(s, 0)] / k - 1.0).exp() / k
        })
    }

    fn state_constant(&self) -> bool {
        true
    }
}

/// Smallest eigenvalue of Σ_sa λ_sa φ(s,a) φ(s,a)ᵀ.
#[derive(Debug, Clone)]
pub struct MinEigenvalueUtility {
    features: Vec<DVector<f64>>,
    num_states: usize,
    num_actions: usize,
}

/// `features[s * A + a]` is φ(s, a).
pub fn min_eigenvalue_utility(features: Vec<Vec<f64>>, num_states: usize, num_actions: usize) -> Result<MinEigenvalueUtility> {
    if features.len() != num_states * num_actions {
        return Err(Error::dim(format!(
            "expected {} feature vectors, got {}",
            num_states * num_actions,
            features.len()
        )));
    }
    let dim = features.first().map_or(0, |f| f.len());
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::InvalidArgument("features must share a positive dimension".into()));
    }
    if features.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("features must be finite".into()));
    }
    Ok(MinEigenvalueUtility {
        features: features.into_iter().map(DVector::from_vec).collect(),
        num_states,
        num_actions,
    })
}

impl MinEigenvalueUtility {
    pub fn covariance(&self, lambda: &Table) -> DMatrix<f64> {
        let dim = self.features[0].len();
        let mut cov = DMatrix::zeros(dim, dim);
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let w = lambda[(s, a)];
                if w != 0.0 {
                    let phi = &self.features[s * self.num_actions + a];
                    cov.ger(w, phi, phi, 1.0);
                }
            }
        }
        cov
    }
}

impl Utility for MinEigenvalueUtility {
    fn name(&self) -> &'static str {
        "min_eigenvalue"
    }

    fn value(&self, lambda: &Table) -> f64 {
        SymmetricEigen::new(self.covariance(lambda)).eigenvalues.min()
    }

    /// Average of r^(i)_sa = (φ(s,a)ᵀ v_i)² over an orthonormal basis of the
    /// minimal eigenspace.
    fn grad(&self, lambda: &Table) -> Table {
        let eig = SymmetricEigen::new(self.covariance(lambda));
        let min = eig.eigenvalues.min();
        let scale = eig.eigenvalues.amax().max(1.0);
        let basis: Vec<usize> = (0..eig.eigenvalues.len())
            .filter(|&i| eig.eigenvalues[i] - min <= EIGEN_GROUP_TOL * scale)
            .collect();
        let k = basis.len() as f64;
        DMatrix::from_fn(self.num_states, self.num_actions, |s, a| {
            let phi = &self.features[s * self.num_actions + a];
            basis
                .iter()
                .map(|&i| phi.dot(&eig.eigenvectors.column(i)).powi(2))
                .sum::<f64>()
                / k
        })
    }

    fn ell_f(&self) -> f64 {
        self.features.iter().map(|f| f.norm_squared()).fold(0.0, f64::max)
    }
}

/// ⟨r, λ⟩ + β log(C − ⟨c, λ⟩).
#[derive(Debug, Clone)]
pub struct LogBarrierUtility {
    reward: Table,
    cost: Table,
    budget: f64,
    beta: f64,
}

pub fn log_barrier_cmdp_utility(reward: Table, cost: Table, budget: f64, beta: f64) -> Result<LogBarrierUtility> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument("barrier weight must be finite and nonnegative".into()));
    }
    if !budget.is_finite() {
        return Err(Error::InvalidArgument("budget must be finite".into()));
    }
    if reward.shape() != cost.shape() {
        return Err(Error::dim("reward and cost tables differ in shape"));
    }
    Ok(LogBarrierUtility { reward, cost, budget, beta })
}

impl LogBarrierUtility {
    pub fn reward(&self) -> &Table {
        &self.reward
    }

    pub fn cost(&self) -> &Table {
        &self.cost
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Objective value from the two linear values V(r) and V(c).
    pub fn compose(&self, reward_value: f64, cost_value: f64) -> f64 {
        if self.beta == 0.0 {
            return reward_value;
        }
        let slack = self.budget - cost_value;
        if slack > 0.0 {
            reward_value + self.beta * slack.ln()
        } else {
            f64::NEG_INFINITY
        }
    }
}

impl Utility for LogBarrierUtility {
    fn name(&self) -> &'static str {
        "log_barrier"
    }

    fn value(&self, lambda: &Table) -> f64 {
        self.compose(dot(&self.reward, lambda), dot(&self.cost, lambda))
    }

    fn grad(&self, lambda: &Table) -> Table {
        if self.beta == 0.0 {
            return self.reward.clone();
        }
        let slack = self.budget - dot(&self.cost, lambda);
        &self.reward - &self.cost * (self.beta / slack)
    }

    fn ell_f(&self) -> f64 {
        if self.beta == 0.0 {
            self.reward.amax()
        } else {
            f64::INFINITY
        }
    }

    fn check_domain(&self, lambda: &Table) -> Result<()> {
        let cost = dot(&self.cost, lambda);
        if self.beta > 0.0 && cost >= self.budget {
            return Err(Error::BarrierViolated { cost, budget: self.budget });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DualGapConfig {
    pub starts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for DualGapConfig {
    fn default() -> Self {
        Self { starts: 4, max_iters: 20_000, seed: 0 }
    }
}

/// |F(λ) − inf_z {⟨λ, z⟩ − F*(z)}|, the infimum approximated by multi-start
/// Barzilai–Borwein descent started at z₀ = ∇F(λ) and perturbations of it.
pub fn dual_gap_check(utility: &dyn Utility, lambda: &Table, config: DualGapConfig) -> Result<f64> {
    let dual = utility.dual().ok_or_else(|| Error::DualFree(utility.name().to_string()))?;
    let f = utility.value(lambda);
    if let Some(z) = dual.pinned() {
        return Ok((f - (dot(lambda, z) - dual.conjugate(z))).abs());
    }
    let (rows, cols) = lambda.shape();
    let state_constant = dual.state_constant();
    // Free coordinates: one per state for state-constant duals, one per entry otherwise.
    let expand = |x: &DVector<f64>| -> Table {
        if state_constant {
            DMatrix::from_fn(rows, cols, |s, _| x[s])
        } else {
            DMatrix::from_column_slice(rows, cols, x.as_slice())
        }
    };
    let objective = |x: &DVector<f64>| -> (f64, DVector<f64>) {
        let z = expand(x);
        let h = dot(lambda, &z) - dual.conjugate(&z);
        let g = dual.conjugate_grad(&z);
        let grad = if state_constant {
            DVector::from_fn(rows, |s, _| lambda.row(s).sum() - g[(s, 0)])
        } else {
            DVector::from_column_slice((lambda - g).as_slice())
        };
        (h, grad)
    };
    let z0 = utility.grad(lambda);
    let x0 = if state_constant {
        DVector::from_fn(rows, |s, _| z0.row(s).mean())
    } else {
        DVector::from_column_slice(z0.as_slice())
    };

    let mut rng = stream(derive_seed(config.seed, tags::MULTISTART), 0);
    let mut best = f64::INFINITY;
    for start in 0..config.starts.max(1) {
        let mut x = x0.clone();
        if start > 0 {
            let spread = 0.5 * utility.ell_f().min(10.0);
            x.iter_mut().for_each(|v| { let e: f64 = StandardNormal.sample(&mut rng); *v += spread * e });
        }
        best = best.min(bb_minimize(&objective, x, config.max_iters));
    }
    Ok((f - best).abs())
}

/// Barzilai–Borwein gradient descent with Armijo backtracking on a convex
/// objective. Returns the best value found.
fn bb_minimize(objective: &dyn Fn(&DVector<f64>) -> (f64, DVector<f64>), mut x: DVector<f64>, max_iters: usize) -> f64 {
    let (mut h, mut g) = objective(&x);
    let mut step = 1.0 / g.amax().max(1.0);
    for _ in 0..max_iters {
        if g.amax() < 1e-13 || !h.is_finite() {
            break;
        }
        let mut t = step;
        let (x_new, h_new, g_new) = loop {
            let cand = &x - &g * t;
            let (hc, gc) = objective(&cand);
            if hc.is_finite() && hc <= h - 1e-4 * t * g.norm_squared() {
                break (cand, hc, gc);
            }
            t *= 0.5;
            if t < 1e-300 {
                return h;
            }
        };
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        step = if sy > 0.0 { s.norm_squared() / sy } else { t * 2.0 };
        x = x_new;
        h = h_new;
        g = g_new;
    }
    h
}
