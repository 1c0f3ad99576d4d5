use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{value_iteration, Mdp, OccupancyMeasure, PolicyEvaluator, Table, TabularPolicy};
use crate::utility::Utility;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FrankWolfeVariant {
    /// Step 2/(t+2) toward the linear-maximization vertex.
    Vanilla,
    /// Away steps over the active vertex set with exact line search.
    #[default]
    AwayStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrankWolfeConfig {
    pub iterations: usize,
    pub tol: f64,
    pub variant: FrankWolfeVariant,
    /// Accuracy of the value-iteration linear subproblem.
    pub vi_tol: f64,
}

impl Default for FrankWolfeConfig {
    fn default() -> Self {
        Self { iterations: 20_000, tol: 1e-8, variant: FrankWolfeVariant::AwayStep, vi_tol: 1e-10 }
    }
}

#[derive(Debug, Clone)]
pub struct PolytopeOptimum {
    pub lambda_star: OccupancyMeasure,
    pub value: f64,
    /// Duality gap max_v ⟨∇F(λ*), v − λ*⟩, an upper bound on F(opt) − F(λ*).
    pub certificate: f64,
    pub iterations: usize,
    /// False when the iteration budget ran out before the gap reached `tol`.
    pub converged: bool,
}

struct Vertex {
    actions: Vec<usize>,
    lambda: Table,
    weight: f64,
}

fn vertex(mdp: &Mdp, actions: Vec<usize>) -> Result<Vertex> {
    let policy = TabularPolicy::deterministic(&actions, mdp.num_actions())?;
    let lambda = PolicyEvaluator::new(mdp, &policy)?.occupancy().into_table();
    Ok(Vertex { actions, lambda, weight: 0.0 })
}

/// Maximizes φ(s) = F(λ + s·d) over [0, s_max] by bisection on the
/// directional derivative; points where F is not finite count as overshoot.
fn line_search(utility: &dyn Utility, lambda: &Table, d: &Table, s_max: f64) -> f64 {
    let ok = |s: f64| {
        let p = lambda + d * s;
        let v = utility.value(&p);
        v.is_finite() && utility.grad(&p).dot(d) >= 0.0
    };
    if ok(s_max) {
        return s_max;
    }
    let (mut lo, mut hi) = (0.0, s_max);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Maximizes a concave utility over the flow polytope by Frank-Wolfe. The
/// linear subproblem max_v ⟨∇F(λ), v⟩ is an MDP with reward ∇F(λ), solved by
/// value iteration; its vertex is the occupancy of the greedy policy.
pub fn frank_wolfe_optimum(mdp: &Mdp, utility: &dyn Utility, config: &FrankWolfeConfig) -> Result<PolytopeOptimum> {
    let gamma = mdp.gamma();
    let lmo = |g: &Table, warm: Option<&nalgebra::DVector<f64>>| value_iteration(mdp, g, config.vi_tol, warm);

    let uniform = PolicyEvaluator::new(mdp, &TabularPolicy::uniform(mdp.num_states(), mdp.num_actions()))?.occupancy();
    let first = lmo(&utility.grad(uniform.lambda()), None)?;
    let mut start = vertex(mdp, first.greedy)?;
    if !utility.value(&start.lambda).is_finite() {
        let cost = mdp
            .cost()
            .ok_or_else(|| Error::InvalidArgument("no feasible starting vertex for the utility".into()))?;
        start = vertex(mdp, lmo(&(-cost), None)?.greedy)?;
        if !utility.value(&start.lambda).is_finite() {
            return Err(Error::InvalidArgument("no feasible starting vertex for the utility".into()));
        }
    }
    start.weight = 1.0;
    let mut lambda = start.lambda.clone();
    let mut active = vec![start];
    let mut warm = Some(first.values);
    let mut certificate = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    for t in 0..config.iterations {
        let g = utility.grad(&lambda);
        let vi = lmo(&g, warm.as_ref())?;
        warm = Some(vi.values.clone());
        let fw = vertex(mdp, vi.greedy)?;
        let gap = g.dot(&(&fw.lambda - &lambda));
        certificate = gap;
        iterations = t;
        if gap <= config.tol {
            converged = true;
            break;
        }
        match config.variant {
            FrankWolfeVariant::Vanilla => {
                let s = 2.0 / (t as f64 + 2.0);
                lambda = &lambda * (1.0 - s) + &fw.lambda * s;
            }
            FrankWolfeVariant::AwayStep => {
                let (away_idx, away_score) = active
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (i, g.dot(&v.lambda)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("active set is never empty");
                let away_gap = g.dot(&lambda) - away_score;
                if gap >= away_gap || active.len() == 1 {
                    let d = &fw.lambda - &lambda;
                    let s = line_search(utility, &lambda, &d, 1.0);
                    for v in active.iter_mut() {
                        v.weight *= 1.0 - s;
                    }
                    match active.iter_mut().find(|v| v.actions == fw.actions) {
                        Some(v) => v.weight += s,
                        None => active.push(Vertex { weight: s, ..fw }),
                    }
                } else {
                    let w = active[away_idx].weight;
                    let s_max = w / (1.0 - w);
                    let d = &lambda - &active[away_idx].lambda;
                    let s = line_search(utility, &lambda, &d, s_max);
                    for v in active.iter_mut() {
                        v.weight *= 1.0 + s;
                    }
                    active[away_idx].weight -= s;
                    if s >= s_max {
                        active[away_idx].weight = 0.0;
                    }
                }
                active.retain(|v| v.weight > 1e-14);
                let total: f64 = active.iter().map(|v| v.weight).sum();
                lambda = active.iter().fold(Table::zeros(lambda.nrows(), lambda.ncols()), |acc, v| acc + &v.lambda * (v.weight / total));
            }
        }
        iterations = t + 1;
    }
    if !converged {
        let g = utility.grad(&lambda);
        let vi = lmo(&g, warm.as_ref())?;
        let fw = vertex(mdp, vi.greedy)?;
        certificate = g.dot(&(&fw.lambda - &lambda));
        converged = certificate <= config.tol;
        if !converged {
            log::warn!("Frank-Wolfe stopped after {iterations} iterations with gap {certificate:e}");
        }
    }
    let value = utility.value(&lambda);
    Ok(PolytopeOptimum { lambda_star: OccupancyMeasure::new(lambda.map(|x| x.max(0.0)), gamma)?, value, certificate, iterations, converged })
}
