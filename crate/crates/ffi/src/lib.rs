//! C ABI over `gupg-core`.
//!
//! Objects are opaque handles created by `gupg_*_new`-style constructors and
//! released with the matching `*_free`. Every fallible function returns a
//! [`GupgStatus`]; on failure the message is available from
//! [`gupg_last_error`] on the same thread. Tables cross the boundary as
//! row-major `double` arrays of length `states * actions`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use gupg_core::config::{BuiltUtility, Command, ExperimentConfig};
use gupg_core::env::{build_gridworld, random_mdp, GridSpec, InitialDistribution};
use gupg_core::estimation::{chain_rule_oracle, composite_pg_exact, variational_pg, EpisodeBatch, SaddleConfig, StepSchedule};
use gupg_core::experiments::{run_command, sweep};
use gupg_core::mdp::{default_horizon, occupancy_exact, DifferentiablePolicy, Mdp, Parameterization, Policy, Table};
use gupg_core::optimizer::{frank_wolfe_optimum, FrankWolfeConfig};
use gupg_core::utility::{entropy_utility, kl_utility, linear_utility, log_barrier_cmdp_utility};
use gupg_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GupgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidModel = 3,
    InvalidPolicy = 4,
    Numerical = 5,
    BarrierViolated = 6,
    Config = 7,
    Io = 8,
    Panic = 9,
}

/// Policy parameterization selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GupgParameterization {
    Tabular = 0,
    Softmax = 1,
}

/// Experiment command selector for [`gupg_run_experiment`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GupgCommand {
    EstimateGradient = 0,
    Train = 1,
    MseStudy = 2,
    RateStudy = 3,
    Sweep = 4,
}

/// Opaque MDP handle.
pub struct GupgMdp(Mdp);

/// Opaque policy handle.
pub struct GupgPolicy(Policy);

/// Opaque utility handle.
pub struct GupgUtility(BuiltUtility);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GupgStatus {
    match e {
        Error::Dimension(_) | Error::InvalidArgument(_) | Error::StateOutOfRange { .. } | Error::EmptyBatch | Error::DualFree(_) => {
            GupgStatus::InvalidArgument
        }
        Error::InvalidModel(_) | Error::Layout(_) => GupgStatus::InvalidModel,
        Error::InvalidPolicy(_) | Error::UnreachableState(_) => GupgStatus::InvalidPolicy,
        Error::Singular(_) | Error::Diverged { .. } => GupgStatus::Numerical,
        Error::BarrierViolated { .. } => GupgStatus::BarrierViolated,
        Error::Config(_) | Error::Json(_) => GupgStatus::Config,
        Error::Io(_) => GupgStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type FfiResult<T> = Result<T, Failure>;

/// Runs `f`, converting errors and panics into a status and the thread's last
/// error message.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> GupgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            GupgStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer: {what}"));
            GupgStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal panic: {msg}"));
            GupgStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &'static str) -> FfiResult<&'a T> {
    unsafe { p.as_ref() }.ok_or(Failure::Null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &'static str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure::Core(Error::InvalidArgument(format!("{what} is not valid UTF-8"))))
}

unsafe fn read_table(p: *const f64, states: usize, actions: usize, what: &'static str) -> FfiResult<Table> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let data = unsafe { std::slice::from_raw_parts(p, states * actions) };
    Ok(Table::from_row_slice(states, actions, data))
}

unsafe fn write_table(t: &Table, out: *mut f64, len: usize) -> FfiResult<()> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    if len != t.len() {
        return Err(Error::Dimension(format!("output buffer holds {len} values, need {}", t.len())).into());
    }
    let buf = unsafe { std::slice::from_raw_parts_mut(out, len) };
    for (i, row) in t.row_iter().enumerate() {
        buf[i * t.ncols()..(i + 1) * t.ncols()].iter_mut().zip(row.iter()).for_each(|(b, v)| *b = *v);
    }
    Ok(())
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> FfiResult<()> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

fn kind_of(p: GupgParameterization) -> Parameterization {
    match p {
        GupgParameterization::Tabular => Parameterization::Tabular,
        GupgParameterization::Softmax => Parameterization::Softmax,
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn gupg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Gridworld from a '/'-joined layout over {S, F, H, G, C}. `start_weight`
/// is the initial mass on S, the rest spread uniformly (1 = start only).
///
/// # Safety
/// `layout` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gupg_mdp_gridworld(layout: *const c_char, gamma: f64, slippery: bool, start_weight: f64, out: *mut *mut GupgMdp) -> GupgStatus {
    guard(|| {
        let mut spec = GridSpec::new(unsafe { c_str(layout, "layout") }?, gamma);
        spec.slippery = slippery;
        spec.initial = InitialDistribution::Blend { start: start_weight };
        unsafe { store(out, GupgMdp(build_gridworld(&spec)?)) }
    })
}

/// Random MDP with Dirichlet(`alpha`) rows and uniform reward/cost channels.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gupg_mdp_random(states: usize, actions: usize, gamma: f64, seed: u64, alpha: f64, out: *mut *mut GupgMdp) -> GupgStatus {
    guard(|| unsafe { store(out, GupgMdp(random_mdp(states, actions, gamma, seed, alpha)?)) })
}

/// # Safety
/// `mdp` must come from a `gupg_mdp_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gupg_mdp_free(mdp: *mut GupgMdp) {
    if !mdp.is_null() {
        drop(unsafe { Box::from_raw(mdp) });
    }
}

/// # Safety
/// `mdp` must be a live handle or NULL (returns 0).
#[no_mangle]
pub unsafe extern "C" fn gupg_mdp_num_states(mdp: *const GupgMdp) -> usize {
    unsafe { mdp.as_ref() }.map_or(0, |m| m.0.num_states())
}

/// # Safety
/// `mdp` must be a live handle or NULL (returns 0).
#[no_mangle]
pub unsafe extern "C" fn gupg_mdp_num_actions(mdp: *const GupgMdp) -> usize {
    unsafe { mdp.as_ref() }.map_or(0, |m| m.0.num_actions())
}

/// The uniform policy: θ = 0 for softmax, π = 1/A for tabular.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gupg_policy_uniform(kind: GupgParameterization, states: usize, actions: usize, out: *mut *mut GupgPolicy) -> GupgStatus {
    guard(|| {
        if states == 0 || actions == 0 {
            return Err(Error::InvalidArgument("policy needs S, A >= 1".into()).into());
        }
        unsafe { store(out, GupgPolicy(Policy::uniform(kind_of(kind), states, actions))) }
    })
}

/// Policy from a row-major S×A parameter table (probabilities for tabular,
/// logits for softmax).
///
/// # Safety
/// `params` must point to `states * actions` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gupg_policy_from_params(
    kind: GupgParameterization,
    states: usize,
    actions: usize,
    params: *const f64,
    out: *mut *mut GupgPolicy,
) -> GupgStatus {
    guard(|| {
        let t = unsafe { read_table(params, states, actions, "params") }?;
        unsafe { store(out, GupgPolicy(Policy::from_params(kind_of(kind), t)?)) }
    })
}

/// # Safety
/// `policy` must come from a `gupg_policy_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gupg_policy_free(policy: *mut GupgPolicy) {
    if !policy.is_null() {
        drop(unsafe { Box::from_raw(policy) });
    }
}

/// Writes π(a|s) row-major into `out` (length S·A).
///
/// # Safety
/// `policy` must be live; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gupg_policy_probs(policy: *const GupgPolicy, out: *mut f64, len: usize) -> GupgStatus {
    guard(|| {
        let p = unsafe { non_null(policy, "policy") }?;
        unsafe { write_table(p.0.tabular().probs(), out, len) }
    })
}

/// F(λ) = ⟨λ, r⟩.
///
/// # Safety
/// `reward` must point to `states * actions` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gupg_utility_linear(states: usize, actions: usize, reward: *const f64, out: *mut *mut GupgUtility) -> GupgStatus {
    guard(|| {
        let r = unsafe { read_table(reward, states, actions, "reward") }?;
        unsafe { store(out, GupgUtility(BuiltUtility::Plain(Box::new(linear_utility(r))))) }
    })
}

/// Entropy of the normalized state visitation.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gupg_utility_entropy(gamma: f64, out: *mut *mut GupgUtility) -> GupgStatus {
    guard(|| unsafe { store(out, GupgUtility(BuiltUtility::Plain(Box::new(entropy_utility(gamma)?)))) })
}

/// Negative KL divergence of the state visitation from `prior` (length S).
///
/// # Safety
/// `prior` must point to `states` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gupg_utility_kl(states: usize, prior: *const f64, gamma: f64, out: *mut *mut GupgUtility) -> GupgStatus {
    guard(|| {
        if prior.is_null() {
            return Err(Failure::Null("prior"));
        }
        let p = unsafe { std::slice::from_raw_parts(prior, states) };
        unsafe { store(out, GupgUtility(BuiltUtility::Plain(Box::new(kl_utility(p, gamma)?)))) }
    })
}

/// ⟨λ, r⟩ + β log(C − ⟨λ, c⟩).
///
/// # Safety
/// `reward` and `cost` must point to `states * actions` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gupg_utility_log_barrier(
    states: usize,
    actions: usize,
    reward: *const f64,
    cost: *const f64,
    budget: f64,
    beta: f64,
    out: *mut *mut GupgUtility,
) -> GupgStatus {
    guard(|| {
        let r = unsafe { read_table(reward, states, actions, "reward") }?;
        let c = unsafe { read_table(cost, states, actions, "cost") }?;
        unsafe { store(out, GupgUtility(BuiltUtility::Barrier(log_barrier_cmdp_utility(r, c, budget, beta)?))) }
    })
}

/// # Safety
/// `utility` must come from a `gupg_utility_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gupg_utility_free(utility: *mut GupgUtility) {
    if !utility.is_null() {
        drop(unsafe { Box::from_raw(utility) });
    }
}

/// Exact discounted occupancy λ(π), row-major into `out` (length S·A).
///
/// # Safety
/// Handles must be live; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gupg_occupancy(mdp: *const GupgMdp, policy: *const GupgPolicy, out: *mut f64, len: usize) -> GupgStatus {
    guard(|| {
        let (m, p) = unsafe { (non_null(mdp, "mdp")?, non_null(policy, "policy")?) };
        let occ = occupancy_exact(&m.0, p.0.tabular())?;
        unsafe { write_table(occ.lambda(), out, len) }
    })
}

/// R(π) = F(λ(π)).
///
/// # Safety
/// Handles must be live; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gupg_objective(mdp: *const GupgMdp, policy: *const GupgPolicy, utility: *const GupgUtility, out: *mut f64) -> GupgStatus {
    guard(|| {
        let (m, p, u) = unsafe { (non_null(mdp, "mdp")?, non_null(policy, "policy")?, non_null(utility, "utility")?) };
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let occ = occupancy_exact(&m.0, p.0.tabular())?;
        u.0.as_dyn().check_domain(occ.lambda())?;
        unsafe { *out = u.0.as_dyn().value(occ.lambda()) };
        Ok(())
    })
}

/// Exact gradient ∇_θ F(λ(π_θ)) with respect to the policy parameters.
///
/// # Safety
/// Handles must be live; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gupg_gradient_exact(
    mdp: *const GupgMdp,
    policy: *const GupgPolicy,
    utility: *const GupgUtility,
    out: *mut f64,
    len: usize,
) -> GupgStatus {
    guard(|| {
        let (m, p, u) = unsafe { (non_null(mdp, "mdp")?, non_null(policy, "policy")?, non_null(utility, "utility")?) };
        let g = match u.0.barrier() {
            Some(b) => composite_pg_exact(&m.0, &p.0, b)?,
            None => chain_rule_oracle(&m.0, &p.0, u.0.as_dyn())?,
        };
        unsafe { write_table(&g, out, len) }
    })
}

/// Saddle-point gradient estimate from `episodes` sampled episodes and
/// `iterations` primal-dual steps (running-average schedule, exact Q).
///
/// # Safety
/// Handles must be live; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gupg_gradient_variational(
    mdp: *const GupgMdp,
    policy: *const GupgPolicy,
    utility: *const GupgUtility,
    episodes: usize,
    iterations: usize,
    seed: u64,
    out: *mut f64,
    len: usize,
) -> GupgStatus {
    guard(|| {
        let (m, p, u) = unsafe { (non_null(mdp, "mdp")?, non_null(policy, "policy")?, non_null(utility, "utility")?) };
        let batch = EpisodeBatch::generate(&m.0, p.0.tabular(), episodes, default_horizon(m.0.gamma()), seed)?;
        let cfg = SaddleConfig { iterations, schedule: StepSchedule::Averaging, ..SaddleConfig::default() };
        let state = variational_pg(&m.0, &batch, u.0.as_dyn(), &p.0, &cfg, seed)?;
        unsafe { write_table(&state.x, out, len) }
    })
}

/// Maximum of F over the occupancy polytope by Frank-Wolfe. Either output
/// pointer may be NULL.
///
/// # Safety
/// Handles must be live; non-NULL outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn gupg_optimum(mdp: *const GupgMdp, utility: *const GupgUtility, value: *mut f64, certificate: *mut f64) -> GupgStatus {
    guard(|| {
        let (m, u) = unsafe { (non_null(mdp, "mdp")?, non_null(utility, "utility")?) };
        let opt = frank_wolfe_optimum(&m.0, u.0.as_dyn(), &FrankWolfeConfig::default())?;
        unsafe {
            if let Some(v) = value.as_mut() {
                *v = opt.value;
            }
            if let Some(c) = certificate.as_mut() {
                *c = opt.certificate;
            }
        }
        Ok(())
    })
}

/// Runs an experiment from a JSON config file, writing artifacts under
/// `out_dir` (NULL uses the config's output directory).
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out_dir` one or NULL.
#[no_mangle]
pub unsafe extern "C" fn gupg_run_experiment(command: GupgCommand, config_path: *const c_char, out_dir: *const c_char) -> GupgStatus {
    guard(|| {
        let cfg = ExperimentConfig::load(Path::new(unsafe { c_str(config_path, "config_path") }?))?;
        let out = if out_dir.is_null() { cfg.output.clone() } else { unsafe { c_str(out_dir, "out_dir") }?.into() };
        let command = match command {
            GupgCommand::EstimateGradient => Command::EstimateGradient,
            GupgCommand::Train => Command::Train,
            GupgCommand::MseStudy => Command::MseStudy,
            GupgCommand::RateStudy => Command::RateStudy,
            GupgCommand::Sweep => {
                sweep(&cfg, &out)?;
                return Ok(());
            }
        };
        run_command(command, &cfg, &out)?;
        Ok(())
    })
}
