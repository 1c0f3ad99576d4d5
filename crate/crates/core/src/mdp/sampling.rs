use rand::Rng;

use super::{Mdp, TabularPolicy};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub time: usize,
}

/// The absorbing state an episode entered, and when.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terminal {
    pub state: usize,
    pub time: usize,
}

/// One episode truncated at horizon K: steps at times 0..=K, or fewer when it
/// entered an absorbing terminal state. In that case the episode would have
/// stayed in `terminal.state` for every remaining time index up to K.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    steps: Vec<Step>,
    horizon: usize,
    terminal: Option<Terminal>,
}

impl Trajectory {
    pub fn new(steps: Vec<Step>, horizon: usize, terminal: Option<Terminal>) -> Result<Self> {
        for (k, st) in steps.iter().enumerate() {
            if st.time != k || k > horizon {
                return Err(Error::InvalidArgument(format!("step {k} has time index {}", st.time)));
            }
        }
        if let Some(t) = terminal {
            if t.time != steps.len() || t.time > horizon {
                return Err(Error::InvalidArgument("terminal time must follow the last step".into()));
            }
        }
        Ok(Self { steps, horizon, terminal })
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn terminal(&self) -> Option<Terminal> {
        self.terminal
    }

    pub fn states(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.state).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Samples s_0 ∼ ξ, a_k ∼ π(·|s_k), s_{k+1} ∼ P_{a_k}(s_k, ·) for k = 0..=K,
/// stopping early on entering a terminal state.
pub fn sample_episode<R: Rng + ?Sized>(mdp: &Mdp, policy: &TabularPolicy, horizon: usize, rng: &mut R) -> Result<Trajectory> {
    mdp.check_policy(policy)?;
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let cdf = ActionCdf::new(policy);
    let mut steps = Vec::with_capacity(horizon.min(256) + 1);
    let mut s = mdp.sample_initial(rng);
    let mut terminal = None;
    for k in 0..=horizon {
        if mdp.is_terminal(s) {
            terminal = Some(Terminal { state: s, time: k });
            break;
        }
        let a = cdf.sample(s, rng);
        steps.push(Step { state: s, action: a, time: k });
        if k == horizon {
            break;
        }
        s = mdp.sample_next(s, a, rng);
    }
    Ok(Trajectory { steps, horizon, terminal })
}

/// Per-state cumulative action weights; draws match
/// [`TabularPolicy::sample_action`] exactly.
struct ActionCdf {
    actions: usize,
    cumulative: Vec<f64>,
    last_positive: Vec<usize>,
}

impl ActionCdf {
    fn new(policy: &TabularPolicy) -> Self {
        let (states, actions) = (policy.num_states(), policy.num_actions());
        let mut cumulative = Vec::with_capacity(states * actions);
        let mut last_positive = Vec::with_capacity(states);
        for s in 0..states {
            let mut acc = 0.0;
            let mut last = 0;
            for a in 0..actions {
                let w = policy.prob(s, a);
                if w > 0.0 {
                    acc += w;
                    last = a;
                }
                cumulative.push(acc);
            }
            last_positive.push(last);
        }
        Self { actions, cumulative, last_positive }
    }

    fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        let row = &self.cumulative[s * self.actions..(s + 1) * self.actions];
        let u: f64 = rng.random::<f64>() * row[self.actions - 1];
        row.iter().position(|&c| u < c).unwrap_or(self.last_positive[s])
    }
}
