//! Monte Carlo policy-gradient estimators.
//!
//! Episodes are truncated at horizon K. An episode that enters an absorbing
//! terminal state stops recording there; estimators account for the time it
//! would have spent in that state up to K analytically, in expectation over
//! the policy's action distribution at the terminal.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    sample_cdf, sample_episode, DifferentiablePolicy, Mdp, PolicyEvaluator, Table, TabularPolicy,
    Trajectory,
};
use crate::rng::{derive_seed, mix64, stream, tags};
use crate::utility::{LogBarrierUtility, Utility};

/// n episodes of horizon K drawn from one policy.
#[derive(Debug, Clone)]
pub struct EpisodeBatch {
    trajectories: Vec<Trajectory>,
    horizon: usize,
    policy: TabularPolicy,
    gamma: f64,
    seed: u64,
}

impl EpisodeBatch {
    /// Episode i uses stream i of the seed's episode family, so the batch does
    /// not depend on how generation is scheduled across threads.
    pub fn generate(mdp: &Mdp, policy: &TabularPolicy, episodes: usize, horizon: usize, seed: u64) -> Result<Self> {
        if episodes == 0 {
            return Err(Error::EmptyBatch);
        }
        let root = derive_seed(seed, tags::EPISODES);
        let trajectories = (0..episodes as u64)
            .into_par_iter()
            .map(|i| sample_episode(mdp, policy, horizon, &mut stream(root, i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { trajectories, horizon, policy: policy.clone(), gamma: mdp.gamma(), seed })
    }

    pub fn from_trajectories(trajectories: Vec<Trajectory>, policy: TabularPolicy, gamma: f64, seed: u64) -> Result<Self> {
        let horizon = trajectories.first().ok_or(Error::EmptyBatch)?.horizon();
        if trajectories.iter().any(|t| t.horizon() != horizon) {
            return Err(Error::InvalidArgument("trajectories disagree on the horizon".into()));
        }
        Ok(Self { trajectories, horizon, policy, gamma, seed })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn policy(&self) -> &TabularPolicy {
        &self.policy
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Σ_{k=from}^{K} γ^k.
    fn tail_weight(&self, from: usize) -> f64 {
        geometric_sum(self.gamma, from, self.horizon)
    }

    fn check(&self, rows: usize, cols: usize) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if self.policy.num_states() != rows || self.policy.num_actions() != cols {
            return Err(Error::dim(format!(
                "table is {rows}x{cols}, batch policy is {}x{}",
                self.policy.num_states(),
                self.policy.num_actions()
            )));
        }
        Ok(())
    }

    fn check_policy(&self, policy: &TabularPolicy) -> Result<()> {
        self.check(policy.num_states(), policy.num_actions())?;
        if (policy.probs() - self.policy.probs()).amax() > 1e-12 {
            return Err(Error::InvalidPolicy("policy differs from the one that generated the batch".into()));
        }
        Ok(())
    }
}

fn geometric_sum(gamma: f64, from: usize, to: usize) -> f64 {
    if from > to {
        return 0.0;
    }
    (gamma.powi(from as i32) - gamma.powi(to as i32 + 1)) / (1.0 - gamma)
}

/// Per-episode Σ_k γ^k z(s_k, a_k), including the terminal tail.
pub fn episode_values(batch: &EpisodeBatch, z: &Table) -> Result<Vec<f64>> {
    batch.check(z.nrows(), z.ncols())?;
    let gamma = batch.gamma;
    Ok(batch
        .trajectories
        .iter()
        .map(|traj| {
            let mut total = 0.0;
            let mut disc = 1.0;
            for st in traj.steps() {
                total += disc * z[(st.state, st.action)];
                disc *= gamma;
            }
            if let Some(t) = traj.terminal() {
                let zbar: f64 = (0..z.ncols()).map(|a| batch.policy.prob(t.state, a) * z[(t.state, a)]).sum();
                total += batch.tail_weight(t.time) * zbar;
            }
            total
        })
        .collect())
}

/// (1/n) Σ_i Σ_k γ^k z(s_k^i, a_k^i).
pub fn empirical_value(batch: &EpisodeBatch, z: &Table) -> Result<f64> {
    let values = episode_values(batch, z)?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Discounted empirical state-action visit counts, the K-truncated estimate
/// of λ.
pub fn empirical_occupancy(batch: &EpisodeBatch) -> Result<Table> {
    let (s_count, a_count) = (batch.policy.num_states(), batch.policy.num_actions());
    batch.check(s_count, a_count)?;
    let mut lambda = DMatrix::zeros(s_count, a_count);
    let scale = 1.0 / batch.len() as f64;
    for traj in &batch.trajectories {
        let mut disc = scale;
        for st in traj.steps() {
            lambda[(st.state, st.action)] += disc;
            disc *= batch.gamma;
        }
        if let Some(t) = traj.terminal() {
            let w = scale * batch.tail_weight(t.time);
            for a in 0..a_count {
                lambda[(t.state, a)] += w * batch.policy.prob(t.state, a);
            }
        }
    }
    Ok(lambda)
}

/// Where the Q values inside a gradient estimate come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum QSource {
    /// Exact linear solve under the model.
    #[default]
    Exact,
    /// A fresh truncated rollout from each (s, a); `horizon` 0 means the
    /// default horizon for the discount.
    Rollout {
        #[serde(default)]
        horizon: usize,
    },
}

/// Q(s, a; z) ≈ z(s, a) + Σ_{j=1}^{H} γ^j z(s_j, a_j) along one rollout.
fn rollout_q_row<R: Rng + ?Sized>(mdp: &Mdp, policy: &TabularPolicy, z: &Table, s: usize, horizon: usize, rng: &mut R, out: &mut [f64]) {
    let gamma = mdp.gamma();
    for (a, o) in out.iter_mut().enumerate() {
        let mut total = z[(s, a)];
        let mut state = mdp.sample_next(s, a, rng);
        let mut disc = gamma;
        for j in 1..=horizon {
            if mdp.is_terminal(state) {
                let zbar: f64 = (0..z.ncols()).map(|b| policy.prob(state, b) * z[(state, b)]).sum();
                total += geometric_sum(gamma, j, horizon) * zbar;
                break;
            }
            let action = policy.sample_action(state, rng);
            total += disc * z[(state, action)];
            disc *= gamma;
            state = mdp.sample_next(state, action, rng);
        }
        *o = total;
    }
}

fn rollout_horizon(horizon: usize, gamma: f64) -> usize {
    if horizon == 0 {
        crate::mdp::default_horizon(gamma)
    } else {
        horizon
    }
}

/// (1/n) Σ_i Σ_k γ^k Σ_a Q(s_k, a; z) ∇_θ π(a|s_k).
pub fn empirical_pg<P>(mdp: &Mdp, batch: &EpisodeBatch, z: &Table, policy: &P, q_source: QSource, seed: u64) -> Result<Table>
where
    P: DifferentiablePolicy + Sync + ?Sized,
{
    batch.check_policy(policy.tabular())?;
    let (s_count, a_count) = (z.nrows(), z.ncols());
    let scale = 1.0 / batch.len() as f64;
    let gamma = batch.gamma;
    let pi = policy.tabular();

    let exact_q = match q_source {
        QSource::Exact => Some(PolicyEvaluator::new(mdp, pi)?.q_values(z)),
        QSource::Rollout { .. } => None,
    };
    let root = derive_seed(seed, tags::ROLLOUT);
    let per_episode: Vec<Table> = batch
        .trajectories
        .par_iter()
        .enumerate()
        .map(|(i, traj)| {
            let mut rng = stream(root, i as u64);
            let mut out = DMatrix::zeros(s_count, a_count);
            let mut row = vec![0.0; a_count];
            let fill = |s: usize, row: &mut [f64], rng: &mut _| match (&exact_q, q_source) {
                (Some(q), _) => row.iter_mut().enumerate().for_each(|(a, r)| *r = q[(s, a)]),
                (None, QSource::Rollout { horizon }) => {
                    rollout_q_row(mdp, pi, z, s, rollout_horizon(horizon, gamma), rng, row)
                }
                (None, QSource::Exact) => unreachable!(),
            };
            let mut disc = scale;
            for st in traj.steps() {
                fill(st.state, &mut row, &mut rng);
                policy.add_score_contraction(st.state, &row, disc, &mut out);
                disc *= gamma;
            }
            if let Some(t) = traj.terminal() {
                fill(t.state, &mut row, &mut rng);
                policy.add_score_contraction(t.state, &row, scale * batch.tail_weight(t.time), &mut out);
            }
            out
        })
        .collect();
    // Sequential reduction keeps the result independent of thread scheduling.
    Ok(per_episode.into_iter().fold(DMatrix::zeros(s_count, a_count), |acc, g| acc + g))
}

/// The cumulative-return estimator: `empirical_pg` with z = r.
pub fn reinforce_pg<P>(mdp: &Mdp, batch: &EpisodeBatch, reward: &Table, policy: &P, q_source: QSource, seed: u64) -> Result<Table>
where
    P: DifferentiablePolicy + Sync + ?Sized,
{
    empirical_pg(mdp, batch, reward, policy, q_source, seed)
}

/// Step-size schedules for the saddle-point iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    /// α_t = α, β_t = β.
    #[default]
    Constant,
    /// α_t = α/√(t+1), β_t = β/√(t+1).
    RobbinsMonro,
    /// α_t = α, β_t = 1/(t+1): x is the running mean of the per-sample terms.
    Averaging,
}

impl StepSchedule {
    pub fn steps(self, alpha: f64, beta: f64, t: usize) -> (f64, f64) {
        match self {
            StepSchedule::Constant => (alpha, beta),
            StepSchedule::RobbinsMonro => {
                let d = ((t + 1) as f64).sqrt();
                (alpha / d, beta / d)
            }
            StepSchedule::Averaging => (alpha, 1.0 / (t + 1) as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaddleConfig {
    pub iterations: usize,
    pub alpha: f64,
    pub beta: f64,
    pub schedule: StepSchedule,
    pub q_source: QSource,
    /// Start z at ∇F of the batch's empirical occupancy instead of 0.
    pub warm_start: bool,
    /// Report to the observer every this many iterations; 0 reports only the
    /// first and last iterate.
    pub checkpoint_every: usize,
}

impl Default for SaddleConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            alpha: 0.01,
            beta: 0.1,
            schedule: StepSchedule::Constant,
            q_source: QSource::Exact,
            warm_start: true,
            checkpoint_every: 0,
        }
    }
}

/// Primal-dual iterate (x, z) of the saddle-point estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleState {
    pub z: Table,
    pub x: Table,
    pub iteration: usize,
    pub ell_f: f64,
}

/// Variational policy-gradient estimate from a batch, by stochastic
/// primal-dual iteration on the Fenchel saddle problem. Returns the final
/// state; `x` estimates ∇_θ R(π_θ).
pub fn variational_pg<P>(
    mdp: &Mdp,
    batch: &EpisodeBatch,
    utility: &dyn Utility,
    policy: &P,
    config: &SaddleConfig,
    seed: u64,
) -> Result<SaddleState>
where
    P: DifferentiablePolicy + Sync + ?Sized,
{
    variational_pg_observed(mdp, batch, utility, policy, config, seed, &mut |_| {})
}

/// As [`variational_pg`], calling `observe` on checkpointed iterates.
pub fn variational_pg_observed<P>(
    mdp: &Mdp,
    batch: &EpisodeBatch,
    utility: &dyn Utility,
    policy: &P,
    config: &SaddleConfig,
    seed: u64,
    observe: &mut dyn FnMut(&SaddleState),
) -> Result<SaddleState>
where
    P: DifferentiablePolicy + Sync + ?Sized,
{
    let dual = utility.dual().ok_or_else(|| Error::DualFree(utility.name().to_string()))?;
    let pi = policy.tabular();
    batch.check_policy(pi)?;
    let (s_count, a_count) = (pi.num_states(), pi.num_actions());
    let gamma = batch.gamma;
    let horizon = batch.horizon;
    let ell_f = utility.ell_f();

    let evaluator = match config.q_source {
        QSource::Exact => Some(PolicyEvaluator::new(mdp, pi)?),
        QSource::Rollout { .. } => None,
    };

    let z0 = if let Some(r) = dual.pinned() {
        r.clone()
    } else if config.warm_start {
        utility.grad(&empirical_occupancy(batch)?)
    } else {
        DMatrix::zeros(s_count, a_count)
    };
    let mut state = SaddleState {
        z: z0.map(|v| v.clamp(-ell_f, ell_f)),
        x: DMatrix::zeros(policy.params().nrows(), policy.params().ncols()),
        iteration: 0,
        ell_f,
    };
    if dual.pinned().is_some() {
        state.z = z0;
    }
    observe(&state);

    // k ∝ γ^k on [0, K].
    let time_cdf: Vec<f64> = (0..=horizon)
        .scan(0.0, |acc, k| {
            *acc += gamma.powi(k as i32);
            Some(*acc)
        })
        .collect();
    let sample_scale = geometric_sum(gamma, 0, horizon);
    let n = batch.len();
    let mut rng = stream(derive_seed(seed, tags::SADDLE), 0);
    let mut q_row = vec![0.0; a_count];
    let mut term = DMatrix::zeros(state.x.nrows(), state.x.ncols());
    let indicator_scale = 1.0 / (1.0 - gamma);
    let q_horizon = match config.q_source {
        QSource::Rollout { horizon } => rollout_horizon(horizon, gamma),
        QSource::Exact => 0,
    };

    for t in 0..config.iterations {
        let (alpha, beta) = config.schedule.steps(config.alpha, config.beta, t);
        let episode = &batch.trajectories[rng.random_range(0..n)];
        let k = sample_cdf(&time_cdf, &mut rng);
        let (s, a) = match episode.steps().get(k) {
            Some(st) => (st.state, st.action),
            None => {
                let terminal = episode.terminal().expect("short episodes end in a terminal");
                (terminal.state, pi.sample_action(terminal.state, &mut rng))
            }
        };

        // x ← x + β (Σ_a Q(s, a; z) ∇π(a|s) − x), Q at the current z.
        match &evaluator {
            Some(ev) => {
                let z_pi = DVector::from_vec(pi.expect_rows(&state.z));
                ev.q_row_into(s, &state.z, &z_pi, &mut q_row);
            }
            None => rollout_q_row(mdp, pi, &state.z, s, q_horizon, &mut rng, &mut q_row),
        }
        term.fill(0.0);
        policy.add_score_contraction(s, &q_row, sample_scale, &mut term);
        state.x *= 1.0 - beta;
        state.x += &term * beta;

        // z ← clip(z − α/(1−γ) 1_{s,a} + α ∇F*(z)).
        if dual.pinned().is_none() {
            let g = dual.conjugate_grad(&state.z);
            state.z += g * alpha;
            if dual.state_constant() {
                state.z.row_mut(s).add_scalar_mut(-alpha * indicator_scale);
            } else {
                state.z[(s, a)] -= alpha * indicator_scale;
            }
            state.z.apply(|v| *v = v.clamp(-ell_f, ell_f));
        }
        state.iteration = t + 1;
        if !state.x.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { iteration: t + 1, detail: "non-finite gradient estimate".into() });
        }
        if config.checkpoint_every > 0 && (t + 1) % config.checkpoint_every == 0 && t + 1 != config.iterations {
            observe(&state);
        }
    }
    if config.iterations > 0 {
        observe(&state);
    }
    Ok(state)
}

/// Exact ∇_θ F(λ(θ)) by the chain rule: the policy gradient with reward
/// ∇F(λ(θ)).
pub fn chain_rule_oracle<P>(mdp: &Mdp, policy: &P, utility: &dyn Utility) -> Result<Table>
where
    P: DifferentiablePolicy + ?Sized,
{
    let ev = PolicyEvaluator::new(mdp, policy.tabular())?;
    let occ = ev.occupancy();
    utility.check_domain(occ.lambda())?;
    let z = utility.grad(occ.lambda());
    Ok(ev.policy_gradient(policy, &z))
}

/// ∇V(r) − β ∇V(c) / (C − V(c)) with exact values and gradients.
pub fn composite_pg_exact<P>(mdp: &Mdp, policy: &P, utility: &LogBarrierUtility) -> Result<Table>
where
    P: DifferentiablePolicy + ?Sized,
{
    let ev = PolicyEvaluator::new(mdp, policy.tabular())?;
    let grad_r = ev.policy_gradient(policy, utility.reward());
    if utility.beta() == 0.0 {
        return Ok(grad_r);
    }
    let cost = ev.value(utility.cost());
    if cost >= utility.budget() {
        return Err(Error::BarrierViolated { cost, budget: utility.budget() });
    }
    let grad_c = ev.policy_gradient(policy, utility.cost());
    Ok(grad_r - grad_c * (utility.beta() / (utility.budget() - cost)))
}

/// ∇V(r) − β ∇V(c) / (C − V(c)) with every term estimated from the batch.
pub fn composite_pg<P>(mdp: &Mdp, batch: &EpisodeBatch, utility: &LogBarrierUtility, policy: &P, q_source: QSource, seed: u64) -> Result<Table>
where
    P: DifferentiablePolicy + Sync + ?Sized,
{
    let grad_r = empirical_pg(mdp, batch, utility.reward(), policy, q_source, seed)?;
    if utility.beta() == 0.0 {
        return Ok(grad_r);
    }
    let cost = empirical_value(batch, utility.cost())?;
    if cost >= utility.budget() {
        return Err(Error::BarrierViolated { cost, budget: utility.budget() });
    }
    let grad_c = empirical_pg(mdp, batch, utility.cost(), policy, q_source, mix64(seed))?;
    Ok(grad_r - grad_c * (utility.beta() / (utility.budget() - cost)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MseStudyConfig {
    pub episodes: Vec<usize>,
    pub repeats: usize,
    /// Episode horizon; 0 means the default horizon for the discount.
    pub horizon: usize,
    /// Saddle iterations per episode in the batch (T = this · n).
    pub iterations_per_episode: usize,
    pub saddle: SaddleConfig,
}

impl Default for MseStudyConfig {
    fn default() -> Self {
        Self {
            episodes: vec![100, 1_000, 10_000],
            repeats: 10,
            horizon: 0,
            iterations_per_episode: 20,
            saddle: SaddleConfig { schedule: StepSchedule::Averaging, ..SaddleConfig::default() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MseRow {
    pub episodes: usize,
    pub mse: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MseStudy {
    pub rows: Vec<MseRow>,
    /// Least-squares slope of log MSE on log n; `None` with fewer than two n.
    pub slope: Option<f64>,
    /// Set when a slope rests on a single repeat per n.
    pub low_confidence: bool,
}

/// Mean-squared error of the saddle-point estimator against the chain-rule
/// oracle, for each batch size in `config.episodes`.
pub fn estimator_mse_study<P>(mdp: &Mdp, policy: &P, utility: &dyn Utility, config: &MseStudyConfig, seed: u64) -> Result<MseStudy>
where
    P: DifferentiablePolicy + Sync + ?Sized,
{
    if config.repeats == 0 || config.episodes.is_empty() {
        return Err(Error::InvalidArgument("MSE study needs at least one batch size and one repeat".into()));
    }
    if utility.dual().is_none() {
        return Err(Error::DualFree(utility.name().to_string()));
    }
    let oracle = chain_rule_oracle(mdp, policy, utility)?;
    let horizon = rollout_horizon(config.horizon, mdp.gamma());
    let root = derive_seed(seed, tags::REPEAT);
    let mut rows = Vec::with_capacity(config.episodes.len());
    for (ni, &n) in config.episodes.iter().enumerate() {
        let errors = (0..config.repeats)
            .into_par_iter()
            .map(|rep| {
                let run_seed = mix64(root ^ mix64(((ni as u64) << 32) | rep as u64));
                let batch = EpisodeBatch::generate(mdp, policy.tabular(), n, horizon, run_seed)?;
                let saddle = SaddleConfig { iterations: config.iterations_per_episode * n, ..config.saddle };
                let est = variational_pg(mdp, &batch, utility, policy, &saddle, run_seed)?;
                Ok((est.x - &oracle).norm_squared())
            })
            .collect::<Result<Vec<f64>>>()?;
        let m = errors.len() as f64;
        let mse = errors.iter().sum::<f64>() / m;
        let stderr = if errors.len() > 1 {
            (errors.iter().map(|e| (e - mse).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt()
        } else {
            f64::NAN
        };
        rows.push(MseRow { episodes: n, mse, stderr });
    }
    let slope = if rows.len() >= 2 {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| ((r.episodes as f64).ln(), r.mse.ln())).collect();
        Some(least_squares(&pts).0)
    } else {
        None
    };
    Ok(MseStudy { rows, slope, low_confidence: slope.is_some() && config.repeats < 2 })
}

/// Ordinary least-squares fit y = slope·x + intercept; returns
/// (slope, intercept, residual sum of squares).
pub fn least_squares(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let rss = points.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum();
    (slope, intercept, rss)
}

/// ⟨a, b⟩ / (‖a‖‖b‖), 0 when either is zero.
pub fn cosine_similarity(a: &Table, b: &Table) -> f64 {
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        0.0
    } else {
        a.dot(b) / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_gridworld, random_mdp, GridSpec};
    use crate::mdp::{exact_policy_gradient, SoftmaxPolicy, Step, Terminal};
    use crate::utility::{entropy_utility, kl_utility, linear_utility, log_barrier_cmdp_utility};
    use rand_distr::{Distribution, StandardNormal};

    fn random_theta(s: usize, a: usize, seed: u64) -> Table {
        let mut rng = stream(seed, 11);
        DMatrix::from_fn(s, a, |_, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            e
        })
    }

    /// Σ_{k=0}^{K} γ^k Pr(s_k = s, a_k = a) by forward propagation of the
    /// state distribution.
    fn truncated_occupancy(m: &Mdp, pi: &TabularPolicy, horizon: usize) -> Table {
        let (n, na) = (m.num_states(), m.num_actions());
        let mut dist: Vec<f64> = m.initial().iter().copied().collect();
        let mut lambda = DMatrix::zeros(n, na);
        let mut disc = 1.0;
        for _ in 0..=horizon {
            let mut next = vec![0.0; n];
            for s in 0..n {
                for a in 0..na {
                    let w = dist[s] * pi.prob(s, a);
                    lambda[(s, a)] += disc * w;
                    for j in 0..n {
                        next[j] += w * m.transition(a)[(s, j)];
                    }
                }
            }
            dist = next;
            disc *= m.gamma();
        }
        lambda
    }

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    #[test]
    fn constant_z_gives_geometric_sum() {
        let m = random_mdp(4, 2, 0.9, 1, 1.0).unwrap();
        let pi = TabularPolicy::uniform(4, 2);
        let batch = EpisodeBatch::generate(&m, &pi, 20, 30, 3).unwrap();
        let v = empirical_value(&batch, &DMatrix::from_element(4, 2, 1.0)).unwrap();
        assert!((v - (1.0 - 0.9f64.powi(31)) / 0.1).abs() < 1e-12);
        assert_eq!(empirical_value(&batch, &DMatrix::zeros(4, 2)).unwrap(), 0.0);
    }

    #[test]
    fn terminal_tail_keeps_constant_z_sum() {
        let mut spec = GridSpec::new("SG", 0.9);
        spec.slippery = false;
        let m = build_gridworld(&spec).unwrap();
        let pi = TabularPolicy::uniform(2, 4);
        let batch = EpisodeBatch::generate(&m, &pi, 50, 20, 0).unwrap();
        assert!(batch.trajectories().iter().any(|t| t.terminal().is_some()));
        let v = empirical_value(&batch, &DMatrix::from_element(2, 4, 1.0)).unwrap();
        assert!((v - (1.0 - 0.9f64.powi(21)) / 0.1).abs() < 1e-12);
        let occ = empirical_occupancy(&batch).unwrap();
        assert!((occ.sum() - v).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let m = random_mdp(2, 2, 0.9, 1, 1.0).unwrap();
        assert!(matches!(
            EpisodeBatch::generate(&m, &TabularPolicy::uniform(2, 2), 0, 5, 0),
            Err(Error::EmptyBatch)
        ));
        assert!(matches!(
            EpisodeBatch::from_trajectories(vec![], TabularPolicy::uniform(2, 2), 0.9, 0),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn batch_is_reproducible() {
        let m = random_mdp(5, 3, 0.9, 2, 1.0).unwrap();
        let pi = TabularPolicy::uniform(5, 3);
        let a = EpisodeBatch::generate(&m, &pi, 40, 25, 7).unwrap();
        let b = EpisodeBatch::generate(&m, &pi, 40, 25, 7).unwrap();
        assert_eq!(a.trajectories(), b.trajectories());
    }

    #[test]
    fn empirical_value_is_unbiased_for_truncated_value() {
        let m = random_mdp(4, 3, 0.8, 5, 1.0).unwrap();
        let pi = SoftmaxPolicy::new(random_theta(4, 3, 1)).unwrap();
        let z = random_theta(4, 3, 2);
        let horizon = 40;
        let exact = truncated_occupancy(&m, pi.policy(), horizon).dot(&z);
        let batch = EpisodeBatch::generate(&m, pi.policy(), 20_000, horizon, 9).unwrap();
        let (mean, se) = mean_and_se(&episode_values(&batch, &z).unwrap());
        assert!((mean - exact).abs() < 4.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn hand_computed_two_state_gradient() {
        // Two states, two actions; action 0 stays, action 1 switches.
        let stay = DMatrix::identity(2, 2);
        let switch = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let m = Mdp::new(vec![stay, switch], DVector::from_vec(vec![1.0, 0.0]), 0.5).unwrap();
        let pi = TabularPolicy::new(DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5])).unwrap();
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let steps = vec![
            Step { state: 0, action: 1, time: 0 },
            Step { state: 1, action: 0, time: 1 },
        ];
        let traj = Trajectory::new(steps, 1, None).unwrap();
        let batch = EpisodeBatch::from_trajectories(vec![traj], pi.clone(), 0.5, 0).unwrap();
        let g = empirical_pg(&m, &batch, &z, &pi, QSource::Exact, 0).unwrap();
        // Tabular: ∇_θ π(a|s) is the indicator, so the estimate is Σ_k γ^k Q(s_k, ·).
        let q = crate::mdp::q_values_exact(&m, &pi, &z).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[q[(0, 0)], q[(0, 1)], 0.5 * q[(1, 0)], 0.5 * q[(1, 1)]]);
        assert!((&g - &expect).amax() < 1e-12);
        // Under the uniform policy V = (1.25, 1.75) solves V = z_π + γ P_π V.
        assert!((q[(0, 0)] - (1.0 + 0.5 * 1.25)).abs() < 1e-12);
        assert!((q[(1, 1)] - (2.0 + 0.5 * 1.25)).abs() < 1e-12);
    }

    #[test]
    fn empirical_pg_zero_reward_is_zero() {
        let m = random_mdp(3, 2, 0.9, 8, 1.0).unwrap();
        let pi = SoftmaxPolicy::zeros(3, 2);
        let batch = EpisodeBatch::generate(&m, pi.policy(), 10, 20, 0).unwrap();
        let g = reinforce_pg(&m, &batch, &DMatrix::zeros(3, 2), &pi, QSource::Exact, 0).unwrap();
        assert_eq!(g, DMatrix::zeros(3, 2));
    }

    #[test]
    fn reinforce_is_unbiased_for_truncated_gradient() {
        let m = random_mdp(3, 2, 0.8, 6, 1.0).unwrap();
        let pi = SoftmaxPolicy::new(random_theta(3, 2, 4)).unwrap();
        let r = m.reward().unwrap().clone();
        let horizon = 60;
        let exact = exact_policy_gradient(&m, &pi, &r).unwrap();
        // Per-episode estimates from single-episode batches.
        let batch = EpisodeBatch::generate(&m, pi.policy(), 20_000, horizon, 5).unwrap();
        let singles: Vec<Table> = batch
            .trajectories()
            .iter()
            .map(|t| {
                let b = EpisodeBatch::from_trajectories(vec![t.clone()], pi.policy().clone(), 0.8, 0).unwrap();
                reinforce_pg(&m, &b, &r, &pi, QSource::Exact, 0).unwrap()
            })
            .collect();
        for s in 0..3 {
            for a in 0..2 {
                let xs: Vec<f64> = singles.iter().map(|g| g[(s, a)]).collect();
                let (mean, se) = mean_and_se(&xs);
                // truncation at K = 60 with γ = 0.8 is below 1e-5
                assert!((mean - exact[(s, a)]).abs() < 4.0 * se + 1e-5, "({s},{a}) {mean} vs {}", exact[(s, a)]);
            }
        }
    }

    #[test]
    fn rollout_q_agrees_with_exact_q_on_average() {
        let m = random_mdp(3, 2, 0.7, 10, 1.0).unwrap();
        let pi = SoftmaxPolicy::new(random_theta(3, 2, 6)).unwrap();
        let r = m.reward().unwrap().clone();
        let batch = EpisodeBatch::generate(&m, pi.policy(), 4000, 40, 1).unwrap();
        let exact_q = reinforce_pg(&m, &batch, &r, &pi, QSource::Exact, 0).unwrap();
        let rollout = reinforce_pg(&m, &batch, &r, &pi, QSource::Rollout { horizon: 0 }, 0).unwrap();
        assert!((&exact_q - &rollout).norm() / exact_q.norm() < 0.05);
    }

    #[test]
    fn linear_saddle_equals_running_average_of_reinforce_terms() {
        let m = random_mdp(4, 2, 0.9, 3, 1.0).unwrap();
        let pi = SoftmaxPolicy::new(random_theta(4, 2, 8)).unwrap();
        let r = m.reward().unwrap().clone();
        let u = linear_utility(r.clone());
        let batch = EpisodeBatch::generate(&m, pi.policy(), 1000, 100, 2).unwrap();
        let cfg = SaddleConfig { iterations: 20_000, schedule: StepSchedule::Averaging, ..SaddleConfig::default() };
        let est = variational_pg(&m, &batch, &u, &pi, &cfg, 4).unwrap();
        assert_eq!(est.z, r);
        let reinforce = reinforce_pg(&m, &batch, &r, &pi, QSource::Exact, 0).unwrap();
        assert!(cosine_similarity(&est.x, &reinforce) > 0.99);
    }

    #[test]
    fn frozen_dual_at_zero_gives_zero_estimate() {
        let m = random_mdp(3, 2, 0.9, 4, 1.0).unwrap();
        let pi = SoftmaxPolicy::new(random_theta(3, 2, 9)).unwrap();
        let u = entropy_utility(0.9).unwrap();
        let batch = EpisodeBatch::generate(&m, pi.policy(), 50, 50, 2).unwrap();
        let cfg = SaddleConfig { alpha: 0.0, warm_start: false, iterations: 500, ..SaddleConfig::default() };
        let est = variational_pg(&m, &batch, &u, &pi, &cfg, 1).unwrap();
        assert_eq!(est.z, DMatrix::zeros(3, 2));
        assert!(est.x.amax() < 1e-15);
    }

    #[test]
    fn dual_iterate_stays_in_box() {
        let m = random_mdp(4, 3, 0.9, 12, 1.0).unwrap();
        let pi = SoftmaxPolicy::new(random_theta(4, 3, 10)).unwrap();
        let u = entropy_utility(0.9).unwrap();
        let batch = EpisodeBatch::generate(&m, pi.policy(), 100, 80, 2).unwrap();
        let cfg = SaddleConfig { alpha: 0.5, iterations: 2000, checkpoint_every: 1, ..SaddleConfig::default() };
        let mut seen = 0;
        variational_pg_observed(&m, &batch, &u, &pi, &cfg, 0, &mut |st| {
            assert!(st.z.amax() <= st.ell_f + 1e-15);
            seen += 1;
        })
        .unwrap();
        assert_eq!(seen, 2001);
    }

    #[test]
    fn kl_dual_iterate_stays_state_constant() {
        let m = random_mdp(4, 3, 0.9, 13, 1.0).unwrap();
        let pi = SoftmaxPolicy::zeros(4, 3);
        let u = kl_utility(&[0.1, 0.2, 0.3, 0.4], 0.9).unwrap();
        let batch = EpisodeBatch::generate(&m, pi.policy(), 100, 80, 2).unwrap();
        let est = variational_pg(&m, &batch, &u, &pi, &SaddleConfig { iterations: 3000, ..Default::default() }, 0).unwrap();
        for row in est.z.row_iter() {
            assert!(row.iter().all(|&v| (v - row[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn dual_free_utility_is_rejected() {
        let m = random_mdp(2, 2, 0.9, 1, 1.0).unwrap();
        let pi = SoftmaxPolicy::zeros(2, 2);
        let batch = EpisodeBatch::generate(&m, pi.policy(), 5, 10, 0).unwrap();
        let u = log_barrier_cmdp_utility(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2), 1.0, 1.0).unwrap();
        assert!(matches!(
            variational_pg(&m, &batch, &u, &pi, &SaddleConfig::default(), 0),
            Err(Error::DualFree(_))
        ));
    }

    #[test]
    fn mismatched_policy_is_rejected() {
        let m = random_mdp(2, 2, 0.9, 1, 1.0).unwrap();
        let batch = EpisodeBatch::generate(&m, &TabularPolicy::uniform(2, 2), 5, 10, 0).unwrap();
        let other = SoftmaxPolicy::new(random_theta(2, 2, 3)).unwrap();
        let r = DMatrix::zeros(2, 2);
        assert!(reinforce_pg(&m, &batch, &r, &other, QSource::Exact, 0).is_err());
    }

    #[test]
    fn chain_rule_matches_finite_differences() {
        for seed in 0..5 {
            let m = random_mdp(4, 3, 0.9, 100 + seed, 1.0).unwrap();
            let theta = random_theta(4, 3, 200 + seed);
            let u = entropy_utility(0.9).unwrap();
            let g = chain_rule_oracle(&m, &SoftmaxPolicy::new(theta.clone()).unwrap(), &u).unwrap();
            let f = |t: &Table| {
                let occ = crate::mdp::occupancy_exact(&m, SoftmaxPolicy::new(t.clone()).unwrap().policy()).unwrap();
                u.value(occ.lambda())
            };
            let h = 1e-5;
            let fd = DMatrix::from_fn(4, 3, |s, a| {
                let mut p = theta.clone();
                p[(s, a)] += h;
                let mut q = theta.clone();
                q[(s, a)] -= h;
                (f(&p) - f(&q)) / (2.0 * h)
            });
            assert!((&g - &fd).norm() / fd.norm() < 1e-5);
        }
    }

    #[test]
    fn composite_reduces_to_reinforce() {
        let m = random_mdp(3, 2, 0.9, 14, 1.0).unwrap();
        let pi = SoftmaxPolicy::new(random_theta(3, 2, 1)).unwrap();
        let r = m.reward().unwrap().clone();
        let batch = EpisodeBatch::generate(&m, pi.policy(), 30, 40, 2).unwrap();
        let reinforce = reinforce_pg(&m, &batch, &r, &pi, QSource::Exact, 0).unwrap();
        let zero_beta = log_barrier_cmdp_utility(r.clone(), m.cost().unwrap().clone(), 100.0, 0.0).unwrap();
        assert_eq!(composite_pg(&m, &batch, &zero_beta, &pi, QSource::Exact, 0).unwrap(), reinforce);
        let zero_cost = log_barrier_cmdp_utility(r.clone(), DMatrix::zeros(3, 2), 1.0, 2.0).unwrap();
        let g = composite_pg(&m, &batch, &zero_cost, &pi, QSource::Exact, 0).unwrap();
        assert!((&g - &reinforce).amax() < 1e-15);
    }

    #[test]
    fn composite_exact_matches_finite_differences_and_oracle() {
        let m = random_mdp(4, 2, 0.9, 15, 1.0).unwrap();
        let theta = random_theta(4, 2, 5);
        let u = log_barrier_cmdp_utility(m.reward().unwrap().clone(), m.cost().unwrap().clone(), 8.0, 1.5).unwrap();
        let pi = SoftmaxPolicy::new(theta.clone()).unwrap();
        let g = composite_pg_exact(&m, &pi, &u).unwrap();
        let oracle = chain_rule_oracle(&m, &pi, &u).unwrap();
        assert!((&g - &oracle).amax() < 1e-12);
        let f = |t: &Table| {
            let p = SoftmaxPolicy::new(t.clone()).unwrap();
            let vr = crate::mdp::value_exact(&m, p.policy(), u.reward()).unwrap();
            let vc = crate::mdp::value_exact(&m, p.policy(), u.cost()).unwrap();
            u.compose(vr, vc)
        };
        let h = 1e-5;
        let fd = DMatrix::from_fn(4, 2, |s, a| {
            let mut p = theta.clone();
            p[(s, a)] += h;
            let mut q = theta.clone();
            q[(s, a)] -= h;
            (f(&p) - f(&q)) / (2.0 * h)
        });
        assert!((&g - &fd).norm() / fd.norm() < 1e-5);
    }

    #[test]
    fn composite_flags_violated_barrier() {
        let m = random_mdp(3, 2, 0.9, 16, 1.0).unwrap();
        let pi = SoftmaxPolicy::zeros(3, 2);
        let u = log_barrier_cmdp_utility(m.reward().unwrap().clone(), DMatrix::from_element(3, 2, 1.0), 5.0, 1.0).unwrap();
        assert!(matches!(composite_pg_exact(&m, &pi, &u), Err(Error::BarrierViolated { .. })));
        assert!(matches!(chain_rule_oracle(&m, &pi, &u), Err(Error::BarrierViolated { .. })));
        let batch = EpisodeBatch::generate(&m, pi.policy(), 10, 50, 0).unwrap();
        assert!(matches!(composite_pg(&m, &batch, &u, &pi, QSource::Exact, 0), Err(Error::BarrierViolated { .. })));
    }

    #[test]
    fn least_squares_recovers_line() {
        let pts: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 3.0 - 2.0 * i as f64)).collect();
        let (slope, intercept, rss) = least_squares(&pts);
        assert!((slope + 2.0).abs() < 1e-12 && (intercept - 3.0).abs() < 1e-12 && rss < 1e-20);
    }

    #[test]
    fn mse_study_single_repeat_is_low_confidence() {
        let m = random_mdp(3, 2, 0.9, 17, 1.0).unwrap();
        let pi = SoftmaxPolicy::zeros(3, 2);
        let u = linear_utility(m.reward().unwrap().clone());
        let cfg = MseStudyConfig { episodes: vec![10, 40], repeats: 1, iterations_per_episode: 5, ..Default::default() };
        let study = estimator_mse_study(&m, &pi, &u, &cfg, 0).unwrap();
        assert!(study.slope.is_some() && study.low_confidence);
        let single = MseStudyConfig { episodes: vec![10], ..cfg };
        assert!(estimator_mse_study(&m, &pi, &u, &single, 0).unwrap().slope.is_none());
    }

    #[test]
    fn terminal_steps_are_consistent() {
        let t = Trajectory::new(vec![Step { state: 0, action: 0, time: 0 }], 5, Some(Terminal { state: 1, time: 1 })).unwrap();
        let b = EpisodeBatch::from_trajectories(vec![t], TabularPolicy::uniform(2, 1), 0.5, 0).unwrap();
        let z = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        // 1 + 2 Σ_{k=1}^{5} 0.5^k
        assert!((empirical_value(&b, &z).unwrap() - (1.0 + 2.0 * (1.0 - 0.5f64.powi(5)))).abs() < 1e-12);
    }
}
