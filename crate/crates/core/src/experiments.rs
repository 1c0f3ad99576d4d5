//! Experiment commands: each reads an [`ExperimentConfig`], writes CSV and
//! JSON artifacts into an output directory and returns a summary.
//!
//! Artifacts, by command:
//!
//! | command | files |
//! |---|---|
//! | estimate-gradient | `gradient.csv` (t, cosine_similarity_vs_oracle, l2_error), `summary.json` |
//! | train | `train.csv` (k, R_exact, gap_vs_oracle, grad_norm, eval_reward, eval_cost), `occupancy.csv`, `summary.json` |
//! | mse-study | `mse.csv` (n, mse, stderr), `summary.json` |
//! | rate-study | `gaps.csv` (k, gap, scaled_gap, bound), `occupancy.csv`, `summary.json` |
//! | sweep | `run_NNN/` per grid point, `sweep.csv`, `sweep.json` |
//!
//! `occupancy.csv` holds the S×A occupancy table row-major after two header
//! lines: `# states=S,actions=A` and `# gamma=γ`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Command, ExperimentConfig, UtilityConfig};
use crate::error::{Error, Result};
use crate::estimation::{
    chain_rule_oracle, cosine_similarity, empirical_value, estimator_mse_study, reinforce_pg, variational_pg_observed, EpisodeBatch,
};
use crate::mdp::{
    default_horizon, occupancy_exact, DifferentiablePolicy, Mdp, OccupancyMeasure, Parameterization, Policy, Table, TabularPolicy,
};
use crate::optimizer::{
    estimate_smoothness, frank_wolfe_optimum, pg_ascent, pg_ascent_barrier, rate_fit, scaled_gap_bounded, sublinear_bound, AscentConfig,
    AscentRun, PolytopeOptimum, RateOutcome, ScaledGapCheck, StopReason,
};
use crate::rng::{derive_seed, mix64, tags};

/// Environment variable capping the number of concurrent sweep runs.
pub const THREADS_ENV: &str = "GUPG_THREADS";

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes an occupancy table with its two-line header.
pub fn write_occupancy(path: &Path, occ: &OccupancyMeasure) -> Result<()> {
    let lambda = occ.lambda();
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "# states={},actions={}", lambda.nrows(), lambda.ncols())?;
    writeln!(f, "# gamma={}", occ.gamma())?;
    for row in lambda.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", cells.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Entropy of the normalized state visitation.
pub fn visitation_entropy(occ: &OccupancyMeasure) -> f64 {
    -occ.visitation().iter().filter(|&&d| d > 0.0).map(|d| d * d.ln()).sum::<f64>()
}

/// Mean discounted reward and cost over `episodes` sampled episodes.
pub fn evaluate(mdp: &Mdp, policy: &TabularPolicy, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    let batch = EpisodeBatch::generate(mdp, policy, episodes, default_horizon(mdp.gamma()), seed)?;
    let channel = |t: Option<&Table>| t.map_or(Ok(f64::NAN), |t| empirical_value(&batch, t));
    Ok((channel(mdp.reward())?, channel(mdp.cost())?))
}

struct Setup {
    mdp: Mdp,
    utility: crate::config::BuiltUtility,
    init: Policy,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let mdp = cfg.environment.build()?;
    let utility = cfg.utility.build(&mdp)?;
    let init = cfg.init.build(cfg.parameterization, &mdp)?;
    Ok(Setup { mdp, utility, init })
}

#[derive(Debug, Clone, Serialize)]
struct GradientRow {
    t: usize,
    cosine_similarity_vs_oracle: f64,
    l2_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateSummary {
    pub utility: String,
    pub episodes: usize,
    pub horizon: usize,
    pub iterations: usize,
    pub oracle_norm: f64,
    pub cosine_similarity_vs_oracle: f64,
    pub l2_error: f64,
    /// Linear utility only: cosine between the saddle-point and REINFORCE
    /// estimates on the same batch.
    pub cosine_vs_reinforce: Option<f64>,
    pub reinforce_cosine_vs_oracle: Option<f64>,
}

/// Saddle-point gradient estimate at the initial policy, tracked against the
/// chain-rule oracle. Log-barrier utilities use the composite estimator and
/// produce a single row.
pub fn estimate_gradient(cfg: &ExperimentConfig, out: &Path) -> Result<EstimateSummary> {
    fs::create_dir_all(out)?;
    let Setup { mdp, utility, init } = setup(cfg)?;
    let u = utility.as_dyn();
    let est = &cfg.estimate;
    let horizon = if est.horizon == 0 { default_horizon(mdp.gamma()) } else { est.horizon };
    let batch = EpisodeBatch::generate(&mdp, init.tabular(), est.episodes, horizon, cfg.seed)?;
    let oracle = chain_rule_oracle(&mdp, &init, u)?;
    let row = |t: usize, x: &Table| GradientRow { t, cosine_similarity_vs_oracle: cosine_similarity(x, &oracle), l2_error: (x - &oracle).norm() };

    let mut rows = Vec::new();
    let (estimate, iterations) = match utility.barrier() {
        Some(b) => {
            let x = crate::estimation::composite_pg(&mdp, &batch, b, &init, est.saddle.q_source, mix64(cfg.seed))?;
            rows.push(row(0, &x));
            (x, 0)
        }
        None => {
            let state = variational_pg_observed(&mdp, &batch, u, &init, &est.saddle, cfg.seed, &mut |s| rows.push(row(s.iteration, &s.x)))?;
            (state.x, state.iteration)
        }
    };
    write_csv(&out.join("gradient.csv"), &rows)?;

    let (cosine_vs_reinforce, reinforce_cosine_vs_oracle) = match &cfg.utility {
        UtilityConfig::Linear { .. } => {
            let r = chain_reward(&cfg.utility, &mdp)?;
            let g = reinforce_pg(&mdp, &batch, &r, &init, est.saddle.q_source, mix64(cfg.seed ^ 0x5eed))?;
            (Some(cosine_similarity(&estimate, &g)), Some(cosine_similarity(&g, &oracle)))
        }
        _ => (None, None),
    };
    let summary = EstimateSummary {
        utility: u.name().to_string(),
        episodes: est.episodes,
        horizon,
        iterations,
        oracle_norm: oracle.norm(),
        cosine_similarity_vs_oracle: cosine_similarity(&estimate, &oracle),
        l2_error: (&estimate - &oracle).norm(),
        cosine_vs_reinforce,
        reinforce_cosine_vs_oracle,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn chain_reward(u: &UtilityConfig, mdp: &Mdp) -> Result<Table> {
    match u {
        UtilityConfig::Linear { reward: Some(rows) } => Ok(Table::from_fn(mdp.num_states(), mdp.num_actions(), |i, j| rows[i][j])),
        _ => mdp.reward().cloned().ok_or_else(|| Error::Config("no reward channel".into())),
    }
}

struct Ascent {
    run: AscentRun,
    eta: f64,
    smoothness: Option<f64>,
    optimum: Option<PolytopeOptimum>,
}

fn ascend(cfg: &ExperimentConfig, s: &Setup) -> Result<Ascent> {
    let t = &cfg.train;
    let u = s.utility.as_dyn();
    let (eta, smoothness) = match t.eta {
        Some(eta) => (eta, None),
        None => {
            let linear_tabular = matches!(cfg.utility, UtilityConfig::Linear { .. }) && cfg.parameterization == Parameterization::Tabular;
            let l = if t.analytic_smoothness && linear_tabular {
                let g = s.mdp.gamma();
                2.0 * g * s.mdp.num_actions() as f64 / (1.0 - g).powi(3)
            } else {
                estimate_smoothness(&s.mdp, u, cfg.parameterization, t.smoothness_samples, cfg.seed)?.estimate
            };
            if !(l > 0.0) {
                return Err(Error::Config("smoothness estimate is zero; set train.eta explicitly".into()));
            }
            (1.0 / l, Some(l))
        }
    };
    let optimum = if t.oracle { Some(frank_wolfe_optimum(&s.mdp, u, &t.frank_wolfe)?) } else { None };
    let acfg = AscentConfig { eta, iterations: t.iterations, gradient: t.gradient.clone(), seed: cfg.seed, keep_iterates: true };
    let run = match s.utility.barrier() {
        Some(b) => pg_ascent_barrier(&s.mdp, &s.init, b, &acfg)?,
        None => pg_ascent(&s.mdp, &s.init, u, &acfg)?,
    };
    Ok(Ascent { run, eta, smoothness, optimum })
}

#[derive(Debug, Clone, Serialize)]
struct TrainRow {
    k: usize,
    #[serde(rename = "R_exact")]
    r_exact: f64,
    gap_vs_oracle: f64,
    grad_norm: f64,
    eval_reward: f64,
    eval_cost: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub utility: String,
    pub eta: f64,
    pub smoothness: Option<f64>,
    pub iterations: usize,
    pub stop: StopReason,
    pub optimum_value: Option<f64>,
    pub optimum_certificate: Option<f64>,
    pub initial_value: f64,
    pub final_value: f64,
    pub final_gap: Option<f64>,
    pub final_eval_reward: f64,
    pub final_eval_cost: f64,
    pub final_visitation_entropy: f64,
    pub uniform_visitation_entropy: f64,
}

/// Policy-gradient ascent with per-iterate exact metrics and sampled
/// evaluation.
pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainSummary> {
    fs::create_dir_all(out)?;
    let s = setup(cfg)?;
    let Ascent { run, eta, smoothness, optimum } = ascend(cfg, &s)?;
    let eval_root = derive_seed(cfg.seed, tags::EVAL);
    let opt_value = optimum.as_ref().map(|o| o.value);

    let rows: Vec<TrainRow> = run
        .records
        .par_iter()
        .zip(run.iterates.par_iter())
        .map(|(rec, params)| {
            let policy = Policy::from_params(cfg.parameterization, params.clone())?;
            let (eval_reward, eval_cost) = evaluate(&s.mdp, policy.tabular(), cfg.train.eval_episodes, mix64(eval_root ^ rec.iteration as u64))?;
            Ok(TrainRow {
                k: rec.iteration,
                r_exact: rec.value,
                gap_vs_oracle: opt_value.map_or(f64::NAN, |v| v - rec.value),
                grad_norm: rec.grad_norm,
                eval_reward,
                eval_cost,
            })
        })
        .collect::<Result<_>>()?;
    write_csv(&out.join("train.csv"), &rows)?;

    let final_occ = occupancy_exact(&s.mdp, run.final_policy.tabular())?;
    write_occupancy(&out.join("occupancy.csv"), &final_occ)?;
    let uniform_occ = occupancy_exact(&s.mdp, &TabularPolicy::uniform(s.mdp.num_states(), s.mdp.num_actions()))?;
    let last = rows.last().expect("at least the initial record");
    let summary = TrainSummary {
        utility: s.utility.as_dyn().name().to_string(),
        eta,
        smoothness,
        iterations: last.k,
        stop: run.stop,
        optimum_value: opt_value,
        optimum_certificate: optimum.as_ref().map(|o| o.certificate),
        initial_value: rows[0].r_exact,
        final_value: last.r_exact,
        final_gap: opt_value.map(|v| v - last.r_exact),
        final_eval_reward: last.eval_reward,
        final_eval_cost: last.eval_cost,
        final_visitation_entropy: visitation_entropy(&final_occ),
        uniform_visitation_entropy: visitation_entropy(&uniform_occ),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
struct MseCsvRow {
    n: usize,
    mse: f64,
    stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MseSummary {
    pub utility: String,
    pub slope: Option<f64>,
    pub low_confidence: bool,
    pub note: Option<String>,
}

/// Estimator MSE against the oracle as a function of the batch size.
pub fn mse_study(cfg: &ExperimentConfig, out: &Path) -> Result<MseSummary> {
    fs::create_dir_all(out)?;
    let s = setup(cfg)?;
    let study = estimator_mse_study(&s.mdp, &s.init, s.utility.as_dyn(), &cfg.mse, cfg.seed)?;
    let rows: Vec<MseCsvRow> = study.rows.iter().map(|r| MseCsvRow { n: r.episodes, mse: r.mse, stderr: r.stderr }).collect();
    write_csv(&out.join("mse.csv"), &rows)?;
    let note = study.slope.is_none().then(|| "insufficient points for a slope: need at least two batch sizes".to_string());
    let summary = MseSummary { utility: s.utility.as_dyn().name().to_string(), slope: study.slope, low_confidence: study.low_confidence, note };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
struct GapRow {
    k: usize,
    gap: f64,
    scaled_gap: f64,
    bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundCheck {
    pub smoothness: f64,
    pub constant: f64,
    pub holds: bool,
    /// Largest gap(k)·(k+1)/C over k ≥ 1.
    pub worst_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RateSummary {
    pub utility: String,
    pub eta: f64,
    pub optimum_value: f64,
    pub optimum_certificate: f64,
    pub final_gap: f64,
    pub fits: Vec<RateOutcome>,
    pub scaled_gap: ScaledGapCheck,
    pub bound: Option<BoundCheck>,
}

/// Ascent against the Frank-Wolfe optimum, with rate fits of the gap series.
pub fn rate_study(cfg: &ExperimentConfig, out: &Path) -> Result<RateSummary> {
    fs::create_dir_all(out)?;
    let mut cfg = cfg.clone();
    cfg.train.oracle = true;
    let s = setup(&cfg)?;
    let Ascent { run, eta, optimum, .. } = ascend(&cfg, &s)?;
    let optimum = optimum.expect("oracle requested");
    let gaps = run.gaps(optimum.value);

    let bound = if cfg.rate.check_bound {
        let g = s.mdp.gamma();
        let l = 2.0 * g * s.mdp.num_actions() as f64 / (1.0 - g).powi(3);
        let d: Vec<f64> = optimum.lambda_star.visitation().iter().copied().collect();
        let c = sublinear_bound(&s.mdp, l, &d);
        let worst = gaps.iter().enumerate().skip(1).map(|(k, &gp)| gp * (k + 1) as f64 / c).fold(f64::NEG_INFINITY, f64::max);
        Some(BoundCheck { smoothness: l, constant: c, holds: worst <= 1.0, worst_ratio: worst })
    } else {
        None
    };
    let rows: Vec<GapRow> = gaps
        .iter()
        .enumerate()
        .map(|(k, &gap)| GapRow { k, gap, scaled_gap: gap * (k + 1) as f64, bound: bound.as_ref().map_or(f64::NAN, |b| b.constant / (k + 1) as f64) })
        .collect();
    write_csv(&out.join("gaps.csv"), &rows)?;
    write_occupancy(&out.join("occupancy.csv"), &occupancy_exact(&s.mdp, run.final_policy.tabular())?)?;

    let fits = cfg.rate.models.iter().map(|&m| rate_fit(&gaps, m, cfg.rate.fit_from)).collect::<Result<_>>()?;
    let summary = RateSummary {
        utility: s.utility.as_dyn().name().to_string(),
        eta,
        optimum_value: optimum.value,
        optimum_certificate: optimum.certificate,
        final_gap: *gaps.last().expect("non-empty"),
        fits,
        scaled_gap: scaled_gap_bounded(&gaps, cfg.rate.fit_from),
        bound,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Runs one command and returns its summary as JSON.
pub fn run_command(command: Command, cfg: &ExperimentConfig, out: &Path) -> Result<Value> {
    Ok(match command {
        Command::EstimateGradient => serde_json::to_value(estimate_gradient(cfg, out)?)?,
        Command::Train => serde_json::to_value(train(cfg, out)?)?,
        Command::MseStudy => serde_json::to_value(mse_study(cfg, out)?)?,
        Command::RateStudy => serde_json::to_value(rate_study(cfg, out)?)?,
    })
}

/// One grid point of a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub run: String,
    pub seed: u64,
    pub beta: Option<f64>,
    pub eta: Option<f64>,
    pub episodes: Option<usize>,
    pub budget: Option<f64>,
}

fn axis<T: Copy>(values: &[T]) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.iter().copied().map(Some).collect()
    }
}

/// The Cartesian product of the sweep axes, each applied to a copy of the
/// base configuration.
pub fn sweep_grid(cfg: &ExperimentConfig) -> Result<Vec<(SweepPoint, ExperimentConfig)>> {
    let sweep = cfg.sweep.as_ref().ok_or_else(|| Error::Config("sweep command needs a `sweep` section".into()))?;
    let a = &sweep.axes;
    let seeds = if a.seed.is_empty() { vec![cfg.seed] } else { a.seed.clone() };
    let mut grid = Vec::new();
    for beta in axis(&a.beta) {
        for budget in axis(&a.budget) {
            for eta in axis(&a.eta) {
                for episodes in axis(&a.episodes) {
                    for &seed in &seeds {
                        let mut c = cfg.clone();
                        c.sweep = None;
                        c.seed = seed;
                        if let UtilityConfig::LogBarrier { beta: b, budget: bud, .. } = &mut c.utility {
                            if let Some(beta) = beta {
                                *b = beta;
                            }
                            if let Some(budget) = budget {
                                *bud = budget;
                            }
                        }
                        if let Some(eta) = eta {
                            c.train.eta = Some(eta);
                        }
                        if let Some(n) = episodes {
                            c.estimate.episodes = n;
                            match &mut c.train.gradient {
                                crate::optimizer::GradientMode::Variational { episodes, .. }
                                | crate::optimizer::GradientMode::Composite { episodes, .. } => *episodes = n,
                                crate::optimizer::GradientMode::Exact => {}
                            }
                        }
                        c.validate()?;
                        let run = format!("run_{:03}", grid.len());
                        grid.push((SweepPoint { run, seed, beta, eta, episodes, budget }, c));
                    }
                }
            }
        }
    }
    Ok(grid)
}

fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

/// Runs every grid point into its own subdirectory; `sweep.json` collects
/// the summaries and `sweep.csv` flattens their scalar fields.
pub fn sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<Value>> {
    fs::create_dir_all(out)?;
    let command = cfg.sweep.as_ref().ok_or_else(|| Error::Config("sweep command needs a `sweep` section".into()))?.command;
    let grid = sweep_grid(cfg)?;
    let work = || -> Result<Vec<Value>> {
        grid.par_iter()
            .map(|(point, c)| {
                let summary = run_command(command, c, &out.join(&point.run))?;
                Ok(json!({ "point": point, "summary": summary }))
            })
            .collect()
    };
    let results = match thread_cap()? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    write_json(&out.join("sweep.json"), &results)?;
    write_sweep_csv(&out.join("sweep.csv"), &results)?;
    Ok(results)
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn write_sweep_csv(path: &Path, results: &[Value]) -> Result<()> {
    let mut header: Vec<String> = Vec::new();
    let rows: Vec<Vec<(String, String)>> = results
        .iter()
        .map(|r| {
            let mut row = Vec::new();
            for section in ["point", "summary"] {
                if let Some(map) = r[section].as_object() {
                    for (k, v) in map {
                        row.push((k.clone(), cell(v)));
                    }
                }
            }
            row
        })
        .collect();
    for row in &rows {
        for (k, _) in row {
            if !header.contains(k) {
                header.push(k.clone());
            }
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(&header).map_err(csv_error)?;
    for row in &rows {
        let record: Vec<&str> = header.iter().map(|h| row.iter().find(|(k, _)| k == h).map_or("", |(_, v)| v.as_str())).collect();
        w.write_record(&record).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
