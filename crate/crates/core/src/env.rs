//! FrozenLake-style gridworlds and random MDP generators.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Mdp, Table};
use crate::rng::{derive_seed, stream, tags};

/// The standard 4×4 FrozenLake map.
pub const FROZEN_LAKE_4X4: &str = "SFFF/FHFH/FFFH/HFFG";

/// 4×4 map with two costly tiles, one on each family of shortest paths.
pub const FROZEN_LAKE_4X4_COSTLY: &str = "SFCF/FHFH/FCFH/HFFG";

/// Action indices: up, down, left, right.
pub const ACTIONS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialDistribution {
    /// Point mass on the `S` tile.
    #[default]
    Start,
    /// Uniform over all tiles (ξ > 0 elementwise).
    Uniform,
    /// Mass `start` on the `S` tile, the rest spread uniformly over all tiles.
    Blend { start: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tile {
    Start,
    Frozen,
    Hole,
    Goal,
    Costly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Rows joined by '/', over the alphabet {S, F, H, G, C}.
    pub layout: String,
    #[serde(default)]
    pub slippery: bool,
    #[serde(default = "default_reward_goal")]
    pub reward_goal: f64,
    #[serde(default = "default_cost_at_c")]
    pub cost_at_c: f64,
    #[serde(default = "default_reward_at_c")]
    pub reward_at_c: f64,
    pub gamma: f64,
    #[serde(default)]
    pub initial: InitialDistribution,
}

fn default_reward_goal() -> f64 {
    1.0
}
fn default_cost_at_c() -> f64 {
    1.0
}
fn default_reward_at_c() -> f64 {
    -0.4
}

impl GridSpec {
    pub fn new(layout: &str, gamma: f64) -> Self {
        Self {
            layout: layout.to_string(),
            slippery: false,
            reward_goal: default_reward_goal(),
            cost_at_c: default_cost_at_c(),
            reward_at_c: default_reward_at_c(),
            gamma,
            initial: InitialDistribution::Start,
        }
    }

    pub fn frozen_lake(gamma: f64) -> Self {
        Self::new(FROZEN_LAKE_4X4, gamma)
    }

    pub fn tiles(&self) -> Result<Vec<Vec<Tile>>> {
        parse_layout(&self.layout)
    }
}

pub fn parse_layout(layout: &str) -> Result<Vec<Vec<Tile>>> {
    let rows: Vec<Vec<Tile>> = layout
        .split('/')
        .map(|row| {
            row.trim()
                .chars()
                .map(|c| match c {
                    'S' => Ok(Tile::Start),
                    'F' => Ok(Tile::Frozen),
                    'H' => Ok(Tile::Hole),
                    'G' => Ok(Tile::Goal),
                    'C' => Ok(Tile::Costly),
                    other => Err(Error::Layout(format!("unknown tile '{other}'"))),
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let width = rows.first().map_or(0, |r| r.len());
    if width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(Error::Layout("layout must be a non-empty rectangle".into()));
    }
    let count = |t: Tile| rows.iter().flatten().filter(|&&x| x == t).count();
    if count(Tile::Start) != 1 {
        return Err(Error::Layout("layout needs exactly one S".into()));
    }
    if count(Tile::Goal) == 0 {
        return Err(Error::Layout("layout needs at least one G".into()));
    }
    Ok(rows)
}

/// Builds the gridworld MDP. State index is `row * width + col`.
pub fn build_gridworld(spec: &GridSpec) -> Result<Mdp> {
    let tiles = spec.tiles()?;
    let height = tiles.len();
    let width = tiles[0].len();
    let n = height * width;
    let tile = |s: usize| tiles[s / width][s % width];
    let absorbing = |s: usize| matches!(tile(s), Tile::Hole | Tile::Goal);
    let step = |s: usize, dir: (isize, isize)| -> usize {
        let r = (s / width) as isize + dir.0;
        let c = (s % width) as isize + dir.1;
        if r < 0 || c < 0 || r >= height as isize || c >= width as isize {
            s
        } else {
            r as usize * width + c as usize
        }
    };

    let mut transitions = vec![DMatrix::zeros(n, n); ACTIONS.len()];
    for (a, &dir) in ACTIONS.iter().enumerate() {
        for s in 0..n {
            if absorbing(s) {
                transitions[a][(s, s)] = 1.0;
                continue;
            }
            if spec.slippery {
                let perpendicular = [(dir.1, dir.0), (-dir.1, -dir.0)];
                for d in [dir, perpendicular[0], perpendicular[1]] {
                    transitions[a][(s, step(s, d))] += 1.0 / 3.0;
                }
            } else {
                transitions[a][(s, step(s, dir))] = 1.0;
            }
        }
    }
    // Exact row sums: thirds accumulate roundoff.
    for p in transitions.iter_mut() {
        for s in 0..n {
            let sum: f64 = p.row(s).sum();
            p.row_mut(s).unscale_mut(sum);
        }
    }

    let mut reward = Table::zeros(n, ACTIONS.len());
    let mut cost = Table::zeros(n, ACTIONS.len());
    for s in 0..n {
        if absorbing(s) {
            continue;
        }
        for a in 0..ACTIONS.len() {
            let into_goal: f64 = (0..n).filter(|&j| tile(j) == Tile::Goal).map(|j| transitions[a][(s, j)]).sum();
            reward[(s, a)] = spec.reward_goal * into_goal;
            if tile(s) == Tile::Costly {
                reward[(s, a)] += spec.reward_at_c;
                cost[(s, a)] = spec.cost_at_c;
            }
        }
    }

    let start = (0..n).find(|&s| tile(s) == Tile::Start).expect("layout validated");
    let blend = |w: f64| {
        let mut xi = DVector::from_element(n, (1.0 - w) / n as f64);
        xi[start] += w;
        xi
    };
    let initial = match spec.initial {
        InitialDistribution::Start => blend(1.0),
        InitialDistribution::Uniform => blend(0.0),
        InitialDistribution::Blend { start } if (0.0..=1.0).contains(&start) => blend(start),
        InitialDistribution::Blend { start } => {
            return Err(Error::InvalidModel(format!("initial start weight {start} must lie in [0, 1]")));
        }
    };

    Mdp::new(transitions, initial, spec.gamma)?
        .with_reward(reward)?
        .with_cost(cost)?
        .with_terminals((0..n).map(absorbing).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomMdpSpec {
    pub states: usize,
    pub actions: usize,
    pub gamma: f64,
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub dirichlet_alpha: f64,
}

fn default_alpha() -> f64 {
    1.0
}

fn dirichlet_row<R: Rng + ?Sized>(len: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut v: Vec<f64> = (0..len).map(|_| gamma.sample(rng)).collect();
    let total: f64 = v.iter().sum();
    if !(total > 0.0) {
        // every draw underflowed; fall back to a single random vertex
        let k = rng.random_range(0..len);
        v.iter_mut().enumerate().for_each(|(i, x)| *x = if i == k { 1.0 } else { 0.0 });
        return v;
    }
    v.iter_mut().for_each(|x| *x /= total);
    v
}

/// Random MDP: Dirichlet(α) transition rows and initial distribution,
/// uniform [0, 1] reward and cost channels.
pub fn random_mdp(states: usize, actions: usize, gamma: f64, seed: u64, dirichlet_alpha: f64) -> Result<Mdp> {
    if states == 0 || actions == 0 {
        return Err(Error::InvalidArgument("random MDP needs S, A >= 1".into()));
    }
    if !(dirichlet_alpha > 0.0) {
        return Err(Error::InvalidArgument("dirichlet_alpha must be positive".into()));
    }
    let mut rng = stream(derive_seed(seed, tags::MODEL), 0);
    let transitions = (0..actions)
        .map(|_| {
            let rows: Vec<f64> = (0..states).flat_map(|_| dirichlet_row(states, dirichlet_alpha, &mut rng)).collect();
            DMatrix::from_row_slice(states, states, &rows)
        })
        .collect();
    let initial = DVector::from_vec(dirichlet_row(states, dirichlet_alpha, &mut rng));
    let reward = Table::from_fn(states, actions, |_, _| rng.random::<f64>());
    let cost = Table::from_fn(states, actions, |_, _| rng.random::<f64>());
    Mdp::new(transitions, initial, gamma)?.with_reward(reward)?.with_cost(cost)
}

impl RandomMdpSpec {
    pub fn build(&self) -> Result<Mdp> {
        random_mdp(self.states, self.actions, self.gamma, self.seed, self.dirichlet_alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{value_exact, TabularPolicy};
    use std::collections::VecDeque;

    #[test]
    fn standard_map_dimensions() {
        let m = build_gridworld(&GridSpec::frozen_lake(0.9)).unwrap();
        assert_eq!(m.num_states(), 16);
        assert_eq!(m.num_actions(), 4);
        assert_eq!(m.initial()[0], 1.0);
        assert!(m.is_terminal(5) && m.is_terminal(15) && !m.is_terminal(0));
    }

    #[test]
    fn blended_initial_distribution() {
        let mut spec = GridSpec::frozen_lake(0.9);
        spec.initial = InitialDistribution::Blend { start: 0.9 };
        let m = build_gridworld(&spec).unwrap();
        assert!((m.initial()[0] - (0.9 + 0.1 / 16.0)).abs() < 1e-15);
        assert!((m.initial()[7] - 0.1 / 16.0).abs() < 1e-15);
        assert!((m.initial().sum() - 1.0).abs() < 1e-12);
        spec.initial = InitialDistribution::Blend { start: 1.5 };
        assert!(build_gridworld(&spec).is_err());
    }

    #[test]
    fn one_step_goal() {
        let m = build_gridworld(&GridSpec::new("SG", 0.9)).unwrap();
        let right = TabularPolicy::deterministic(&[3, 3], 4).unwrap();
        let v = value_exact(&m, &right, m.reward().unwrap()).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slippery_rows_have_at_most_three_successors() {
        let mut spec = GridSpec::frozen_lake(0.9);
        spec.slippery = true;
        let m = build_gridworld(&spec).unwrap();
        for a in 0..4 {
            for s in 0..16 {
                let row = m.transition(a).row(s);
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().filter(|&&p| p > 0.0).count() <= 3);
            }
        }
    }

    #[test]
    fn malformed_layouts_rejected() {
        for bad in ["", "SFX/FFG", "SF/FFG", "FFF/FFG", "SSG", "SFF/FFF"] {
            assert!(build_gridworld(&GridSpec::new(bad, 0.9)).is_err(), "{bad}");
        }
    }

    #[test]
    fn costly_tiles_fill_channels() {
        let m = build_gridworld(&GridSpec::new(FROZEN_LAKE_4X4_COSTLY, 0.9)).unwrap();
        assert_eq!(m.cost().unwrap()[(2, 0)], 1.0);
        assert_eq!(m.reward().unwrap()[(2, 1)], -0.4);
        assert_eq!(m.cost().unwrap()[(0, 0)], 0.0);
    }

    // BFS over deterministic moves from S to G, avoiding holes.
    fn shortest_path(spec: &GridSpec) -> (usize, Vec<usize>) {
        let tiles = spec.tiles().unwrap();
        let w = tiles[0].len();
        let h = tiles.len();
        let n = w * h;
        let start = (0..n).find(|&s| tiles[s / w][s % w] == Tile::Start).unwrap();
        let mut dist = vec![usize::MAX; n];
        let mut first_action = vec![usize::MAX; n];
        let mut parent = vec![(usize::MAX, 0usize); n];
        dist[start] = 0;
        let mut queue = VecDeque::from([start]);
        let mut goal = None;
        while let Some(s) = queue.pop_front() {
            if tiles[s / w][s % w] == Tile::Goal {
                goal = Some(s);
                break;
            }
            if tiles[s / w][s % w] == Tile::Hole {
                continue;
            }
            for (a, d) in ACTIONS.iter().enumerate() {
                let r = (s / w) as isize + d.0;
                let c = (s % w) as isize + d.1;
                if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                    continue;
                }
                let t = r as usize * w + c as usize;
                if dist[t] == usize::MAX {
                    dist[t] = dist[s] + 1;
                    parent[t] = (s, a);
                    queue.push_back(t);
                }
            }
        }
        let g = goal.unwrap();
        let mut s = g;
        while s != start {
            let (p, a) = parent[s];
            first_action[p] = a;
            s = p;
        }
        let actions = (0..n).map(|s| if first_action[s] == usize::MAX { 0 } else { first_action[s] }).collect();
        (dist[g], actions)
    }

    #[test]
    fn shortest_path_value_is_discounted_goal_reward() {
        let spec = GridSpec::frozen_lake(0.9);
        let (len, actions) = shortest_path(&spec);
        assert_eq!(len, 6);
        let m = build_gridworld(&spec).unwrap();
        let pi = TabularPolicy::deterministic(&actions, 4).unwrap();
        let v = value_exact(&m, &pi, m.reward().unwrap()).unwrap();
        assert!((v - 0.9f64.powi(len as i32 - 1)).abs() < 1e-12, "{v}");
    }

    #[test]
    fn random_mdp_reproducible_and_valid() {
        let a = random_mdp(5, 3, 0.9, 42, 1.0).unwrap();
        let b = random_mdp(5, 3, 0.9, 42, 1.0).unwrap();
        assert_eq!(a.transition(1), b.transition(1));
        assert_eq!(a.initial(), b.initial());
        assert_eq!(a.reward(), b.reward());
        let c = random_mdp(5, 3, 0.9, 43, 1.0).unwrap();
        assert_ne!(a.transition(0), c.transition(0));
    }

    #[test]
    fn large_alpha_is_near_uniform() {
        let m = random_mdp(6, 2, 0.9, 1, 1e6).unwrap();
        for a in 0..2 {
            assert!(m.transition(a).iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-2));
        }
    }
}
