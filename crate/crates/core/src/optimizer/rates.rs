use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::least_squares;
use crate::mdp::Mdp;

/// Gaps at or below this are treated as converged.
const GAP_FLOOR: f64 = 1e-12;
const MIN_POINTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateModel {
    /// log gap against log(k+1).
    Sublinear,
    /// log gap against k.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub model: RateModel,
    pub slope: f64,
    pub intercept: f64,
    /// Two standard errors of the slope.
    pub slope_band: f64,
    /// Contraction ratio exp(slope) for the linear model.
    pub rho: Option<f64>,
    /// Mean squared residual in log-gap units.
    pub residual: f64,
    pub first: usize,
    pub last: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum RateOutcome {
    Fit(RateFit),
    /// Fewer than a handful of positive gaps remain past `from`.
    EarlyConvergence { iteration: usize },
}

/// Fits a rate model to `gaps[k]` for k ≥ `from`, up to the first gap at or
/// below the convergence floor.
pub fn rate_fit(gaps: &[f64], model: RateModel, from: usize) -> Result<RateOutcome> {
    if gaps.len() < 50 {
        return Err(Error::InvalidArgument(format!("rate fit needs at least 50 iterates, got {}", gaps.len())));
    }
    let floor = GAP_FLOOR * gaps[0].abs().max(1.0);
    let end = (from..gaps.len()).find(|&k| !(gaps[k] > floor)).unwrap_or(gaps.len());
    if end < from + MIN_POINTS {
        return Ok(RateOutcome::EarlyConvergence { iteration: end });
    }
    let points: Vec<(f64, f64)> = (from..end)
        .map(|k| {
            let x = match model {
                RateModel::Sublinear => ((k + 1) as f64).ln(),
                RateModel::Linear => k as f64,
            };
            (x, gaps[k].ln())
        })
        .collect();
    let (slope, intercept, rss) = least_squares(&points);
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope_band = if n > 2.0 && sxx > 0.0 { 2.0 * (rss / (n - 2.0) / sxx).sqrt() } else { f64::NAN };
    Ok(RateOutcome::Fit(RateFit {
        model,
        slope,
        intercept,
        slope_band,
        rho: (model == RateModel::Linear).then(|| slope.exp()),
        residual: rss / n,
        first: from,
        last: end - 1,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScaledGapCheck {
    /// max gap(k)·(k+1) over k ∈ [from, 10·from).
    pub leading: f64,
    /// max gap(k)·(k+1) over k ≥ 10·from.
    pub trailing: f64,
    pub bounded: bool,
}

/// Checks that gap(k)·(k+1) does not grow: its maximum past 10·from stays
/// within twice its maximum over [from, 10·from).
pub fn scaled_gap_bounded(gaps: &[f64], from: usize) -> ScaledGapCheck {
    let scaled = |k: usize| gaps[k] * (k + 1) as f64;
    let split = (10 * from).min(gaps.len());
    let leading = (from..split).map(scaled).fold(f64::NEG_INFINITY, f64::max);
    let trailing = (split..gaps.len()).map(scaled).fold(f64::NEG_INFINITY, f64::max);
    ScaledGapCheck { leading, trailing, bounded: leading.is_finite() && trailing <= 2.0 * leading.max(0.0) }
}

/// The constant C in gap(k) ≤ C/(k+1): 20·L·|S|/(1−γ)² · ‖d*/ξ‖∞², with d*
/// the optimal policy's normalized state visitation.
pub fn sublinear_bound(mdp: &Mdp, smoothness: f64, visitation: &[f64]) -> f64 {
    let gamma = mdp.gamma();
    let ratio = visitation
        .iter()
        .zip(mdp.initial().iter())
        .map(|(&d, &x)| if x > 0.0 { d / x } else if d > 0.0 { f64::INFINITY } else { 0.0 })
        .fold(0.0, f64::max);
    20.0 * smoothness * mdp.num_states() as f64 / (1.0 - gamma).powi(2) * ratio * ratio
}
