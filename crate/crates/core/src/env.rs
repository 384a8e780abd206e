//! Team episode execution under fresh and non-fresh randomness, oblivious
//! cost-sequence generators, and the lower-bound environments.

use std::borrow::Borrow;

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::mdp::{sample_index, CostFunction, CostProcess, Mdp, Policy};
use crate::rng::{agent_streams, stream, SimRng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RandomnessMode {
    #[serde(rename = "fresh")]
    Fresh,
    #[serde(rename = "nonfresh")]
    NonFresh,
}

impl RandomnessMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RandomnessMode::Fresh => "fresh",
            RandomnessMode::NonFresh => "nonfresh",
        }
    }
}

impl std::fmt::Display for RandomnessMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RandomnessMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fresh" => Ok(RandomnessMode::Fresh),
            "nonfresh" | "non-fresh" => Ok(RandomnessMode::NonFresh),
            other => Err(arg_err!("unknown randomness mode '{other}'")),
        }
    }
}

/// Random streams consumed while simulating episodes.
#[derive(Clone, Debug)]
pub struct EpisodeRngs {
    pub environment: SimRng,
    pub cost_noise: SimRng,
    pub agents: Vec<SimRng>,
}

impl EpisodeRngs {
    pub fn new(master_seed: u64, num_agents: usize) -> Self {
        Self {
            environment: stream(master_seed, Stream::Environment),
            cost_noise: stream(master_seed, Stream::CostNoise),
            agents: agent_streams(master_seed, num_agents),
        }
    }
}

/// Cost source of a single episode.
#[derive(Clone, Copy, Debug)]
pub enum EpisodeCosts<'a> {
    /// Each realized cost is Bernoulli with the given mean.
    Bernoulli(&'a CostFunction),
    /// Costs are read off the tensor (adversarial episodes).
    Fixed(&'a CostFunction),
}

impl<'a> EpisodeCosts<'a> {
    fn draw<R: Rng + ?Sized>(&self, h: usize, s: usize, a: usize, rng: &mut R) -> f64 {
        match self {
            EpisodeCosts::Bernoulli(mean) => {
                if rng.gen::<f64>() < mean.get(h, s, a) {
                    1.0
                } else {
                    0.0
                }
            }
            EpisodeCosts::Fixed(c) => c.get(h, s, a),
        }
    }

    fn dim(&self) -> (usize, usize, usize) {
        match self {
            EpisodeCosts::Bernoulli(c) | EpisodeCosts::Fixed(c) => c.dim(),
        }
    }
}

impl CostProcess {
    /// Cost source for episode `k` (0-based).
    pub fn episode(&self, k: usize) -> EpisodeCosts<'_> {
        match self {
            CostProcess::Stochastic { mean } => EpisodeCosts::Bernoulli(mean),
            CostProcess::Adversarial { sequence } => EpisodeCosts::Fixed(&sequence[k]),
        }
    }
}

/// Trajectories of all agents in one episode. `states[v]` has `H + 1`
/// entries (the last is the state after the final step); `actions[v]` and
/// `costs[v]` have `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeamTrajectory {
    pub mode: RandomnessMode,
    pub states: Vec<Vec<usize>>,
    pub actions: Vec<Vec<usize>>,
    pub costs: Vec<Vec<f64>>,
}

/// Costs observed by the team in one episode, one value per visited cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedCosts {
    pub visited: Array3<bool>,
    pub cost: Array3<f64>,
}

impl TeamTrajectory {
    pub fn num_agents(&self) -> usize {
        self.actions.len()
    }

    pub fn horizon(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }

    /// Visited `(h, s, a)` cells and their costs. When several agents visit a
    /// cell the first agent's cost is kept.
    pub fn observed_costs(&self, dims: (usize, usize, usize)) -> Result<ObservedCosts> {
        if self.horizon() != dims.0 {
            return Err(shape_err!("trajectory horizon {} vs {}", self.horizon(), dims.0));
        }
        let mut visited = Array3::from_elem(dims, false);
        let mut cost = Array3::zeros(dims);
        for v in 0..self.num_agents() {
            for h in 0..dims.0 {
                let (s, a) = (self.states[v][h], self.actions[v][h]);
                if s >= dims.1 || a >= dims.2 {
                    return Err(shape_err!("trajectory visits ({s},{a}) outside {dims:?}"));
                }
                if !visited[[h, s, a]] {
                    visited[[h, s, a]] = true;
                    cost[[h, s, a]] = self.costs[v][h];
                }
            }
        }
        Ok(ObservedCosts { visited, cost })
    }

    /// Checks the co-location coupling of non-fresh randomness: agents at the
    /// same `(h, s)` taking the same action share next state and cost.
    pub fn coupling_holds(&self) -> bool {
        let m = self.num_agents();
        for h in 0..self.horizon() {
            for u in 0..m {
                for v in (u + 1)..m {
                    if self.states[u][h] == self.states[v][h]
                        && self.actions[u][h] == self.actions[v][h]
                        && (self.states[u][h + 1] != self.states[v][h + 1]
                            || self.costs[u][h].to_bits() != self.costs[v][h].to_bits())
                    {
                        return false;
                    }
                }
            }
        }
        true
    }
}

fn check_policies<P: Borrow<Policy>>(
    dims: (usize, usize, usize),
    policies: &[P],
    rngs: &EpisodeRngs,
) -> Result<()> {
    if policies.is_empty() {
        return Err(arg_err!("a team needs at least one agent"));
    }
    if rngs.agents.len() < policies.len() {
        return Err(arg_err!(
            "{} agent streams for {} agents",
            rngs.agents.len(),
            policies.len()
        ));
    }
    for p in policies {
        if p.borrow().dim() != dims {
            return Err(shape_err!("policy shape {:?}, expected {dims:?}", p.borrow().dim()));
        }
    }
    Ok(())
}

/// Runs one episode in which every agent draws its own transitions and costs.
pub fn run_episode_fresh<P: Borrow<Policy>>(
    mdp: &Mdp,
    costs: EpisodeCosts<'_>,
    policies: &[P],
    rngs: &mut EpisodeRngs,
) -> Result<TeamTrajectory> {
    let dims = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    check_policies(dims, policies, rngs)?;
    if costs.dim() != dims {
        return Err(shape_err!("cost shape {:?}, expected {dims:?}", costs.dim()));
    }
    let m = policies.len();
    let hh = mdp.horizon();
    let mut traj = TeamTrajectory {
        mode: RandomnessMode::Fresh,
        states: Vec::with_capacity(m),
        actions: Vec::with_capacity(m),
        costs: Vec::with_capacity(m),
    };
    for (v, pi) in policies.iter().enumerate() {
        let pi = pi.borrow();
        let mut states = Vec::with_capacity(hh + 1);
        let mut actions = Vec::with_capacity(hh);
        let mut cs = Vec::with_capacity(hh);
        let mut s = mdp.initial_state();
        states.push(s);
        for h in 0..hh {
            let a = pi.sample(h, s, &mut rngs.agents[v]);
            cs.push(costs.draw(h, s, a, &mut rngs.cost_noise));
            s = sample_index(mdp.transition(h, s, a), &mut rngs.environment);
            actions.push(a);
            states.push(s);
        }
        traj.states.push(states);
        traj.actions.push(actions);
        traj.costs.push(cs);
    }
    Ok(traj)
}

/// Next states and costs of every `(h, s, a)` cell, fixed before a non-fresh
/// episode and shared by all agents.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRealization {
    pub initial_state: usize,
    pub next_state: Array3<usize>,
    pub cost: Array3<f64>,
}

impl EpisodeRealization {
    pub fn dim(&self) -> (usize, usize, usize) {
        self.next_state.dim()
    }
}

/// Draws one realization table: one independent next state and one cost per
/// cell.
pub fn draw_realization(mdp: &Mdp, costs: EpisodeCosts<'_>, rngs: &mut EpisodeRngs) -> Result<EpisodeRealization> {
    let dims = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    if costs.dim() != dims {
        return Err(shape_err!("cost shape {:?}, expected {dims:?}", costs.dim()));
    }
    let mut next_state = Array3::zeros(dims);
    let mut cost = Array3::zeros(dims);
    for h in 0..dims.0 {
        for s in 0..dims.1 {
            for a in 0..dims.2 {
                next_state[[h, s, a]] = sample_index(mdp.transition(h, s, a), &mut rngs.environment);
                cost[[h, s, a]] = costs.draw(h, s, a, &mut rngs.cost_noise);
            }
        }
    }
    Ok(EpisodeRealization {
        initial_state: mdp.initial_state(),
        next_state,
        cost,
    })
}

/// Runs one non-fresh episode on a realization table. Only action sampling is
/// random here.
pub fn run_episode_nonfresh<P: Borrow<Policy>>(
    realization: &EpisodeRealization,
    policies: &[P],
    rngs: &mut EpisodeRngs,
) -> Result<TeamTrajectory> {
    let dims = realization.dim();
    check_policies(dims, policies, rngs)?;
    let m = policies.len();
    let hh = dims.0;
    let mut traj = TeamTrajectory {
        mode: RandomnessMode::NonFresh,
        states: Vec::with_capacity(m),
        actions: Vec::with_capacity(m),
        costs: Vec::with_capacity(m),
    };
    for (v, pi) in policies.iter().enumerate() {
        let pi = pi.borrow();
        let mut s = realization.initial_state;
        let mut states = vec![s];
        let mut actions = Vec::with_capacity(hh);
        let mut cs = Vec::with_capacity(hh);
        for h in 0..hh {
            let a = pi.sample(h, s, &mut rngs.agents[v]);
            cs.push(realization.cost[[h, s, a]]);
            s = realization.next_state[[h, s, a]];
            actions.push(a);
            states.push(s);
        }
        traj.states.push(states);
        traj.actions.push(actions);
        traj.costs.push(cs);
    }
    Ok(traj)
}

/// Plays episode `k` in the given randomness mode.
pub fn run_episode<P: Borrow<Policy>>(
    mode: RandomnessMode,
    mdp: &Mdp,
    costs: &CostProcess,
    k: usize,
    policies: &[P],
    rngs: &mut EpisodeRngs,
) -> Result<TeamTrajectory> {
    match mode {
        RandomnessMode::Fresh => run_episode_fresh(mdp, costs.episode(k), policies, rngs),
        RandomnessMode::NonFresh => {
            let r = draw_realization(mdp, costs.episode(k), rngs)?;
            run_episode_nonfresh(&r, policies, rngs)
        }
    }
}

fn check_lower_bound_params(s: usize, a: usize, h: usize, eps_gap: f64) -> Result<()> {
    if s < 2 || a < 2 || h < 2 {
        return Err(arg_err!("lower-bound environments need S, A, H >= 2 (got {s}, {a}, {h})"));
    }
    if !(0.0..0.5).contains(&eps_gap) {
        return Err(arg_err!("eps_gap must lie in [0, 1/2), got {eps_gap}"));
    }
    Ok(())
}

/// State layout of the MAB-embedded environment.
pub mod mab_embed {
    pub const START: usize = 0;
    pub const BAD: usize = 1;
    /// Index of MAB state `i` (0-based).
    pub fn arm_state(i: usize) -> usize {
        2 + i
    }
}

/// Environment with a start state, an absorbing bad state and `num_mab`
/// bandit states. From the start, action 0 moves uniformly to a bandit state
/// and every other action to the bad state; bandit states return to the start.
/// Each bandit state hides one good action with mean cost `1/2 - eps_gap`.
///
/// Returns the MDP, the stochastic cost process and the good action of each
/// bandit state.
pub fn build_mab_embed_env<R: Rng + ?Sized>(
    num_mab: usize,
    num_actions: usize,
    horizon: usize,
    eps_gap: f64,
    rng: &mut R,
) -> Result<(Mdp, CostProcess, Vec<usize>)> {
    use mab_embed::*;
    check_lower_bound_params(num_mab, num_actions, horizon, eps_gap)?;
    let n = num_mab + 2;
    let good: Vec<usize> = (0..num_mab).map(|_| rng.gen_range(0..num_actions)).collect();
    let mdp = Mdp::from_fn(n, num_actions, horizon, START, |_, s, a| {
        let mut row = vec![0.0; n];
        match s {
            START if a == 0 => (0..num_mab).for_each(|i| row[arm_state(i)] = 1.0 / num_mab as f64),
            START | BAD => row[BAD] = 1.0,
            _ => row[START] = 1.0,
        }
        row
    })?;
    let mut mean = Array3::zeros((horizon, n, num_actions));
    for h in 0..horizon {
        for a in 0..num_actions {
            mean[[h, BAD, a]] = 1.0;
            for (i, &g) in good.iter().enumerate() {
                mean[[h, arm_state(i), a]] = if a == g { 0.5 - eps_gap } else { 0.5 };
            }
        }
    }
    let costs = CostProcess::Stochastic {
        mean: CostFunction::new(mean)?,
    };
    Ok((mdp, costs, good))
}

/// State layout of the wait-state environment.
pub mod wait_state {
    pub const START: usize = 0;
    pub const BAD: usize = 1;
    pub const GOOD: usize = 2;
    pub fn mab_state(num_mab: usize, i: usize) -> usize {
        let _ = num_mab;
        3 + i
    }
    pub fn wait_state(num_mab: usize, i: usize) -> usize {
        3 + num_mab + i
    }
}

/// Hidden arm of one bandit state in the wait-state environment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HiddenArm {
    pub action: usize,
    /// 0-based layer at which the action is good.
    pub layer: usize,
}

/// Environment with horizon `2H + 1`: start, bad (cost 1, absorbing), good
/// (cost 0, absorbing), `num_mab` bandit states and one wait state per
/// bandit state. Action 0 at the start moves uniformly to a wait state; in a
/// wait state action 0 enters its bandit state, action 1 waits while the step
/// is at most `H + 2`, anything else falls to the bad state. A bandit state
/// sends every action to good or bad with probability 1/2, except one hidden
/// (action, step) pair that reaches the good state with probability
/// `1/2 + eps_gap`.
pub fn build_wait_state_env<R: Rng + ?Sized>(
    num_mab: usize,
    num_actions: usize,
    h_param: usize,
    eps_gap: f64,
    rng: &mut R,
) -> Result<(Mdp, CostProcess, Vec<HiddenArm>)> {
    use wait_state::*;
    check_lower_bound_params(num_mab, num_actions, h_param, eps_gap)?;
    let horizon = 2 * h_param + 1;
    let n = 2 * num_mab + 3;
    // A bandit state is first reachable at step 3; the hidden step is one of
    // the H steps 3..=H+2 (layers 2..=H+1).
    let arms: Vec<HiddenArm> = (0..num_mab)
        .map(|_| HiddenArm {
            action: rng.gen_range(0..num_actions),
            layer: rng.gen_range(2..h_param + 2),
        })
        .collect();
    let mdp = Mdp::from_fn(n, num_actions, horizon, START, |h, s, a| {
        let step = h + 1;
        let mut row = vec![0.0; n];
        if s == START {
            if a == 0 {
                (0..num_mab).for_each(|i| row[wait_state(num_mab, i)] = 1.0 / num_mab as f64);
            } else {
                row[BAD] = 1.0;
            }
        } else if s == BAD || s == GOOD {
            row[s] = 1.0;
        } else if s < 3 + num_mab {
            let i = s - 3;
            let arm = arms[i];
            let p_good = if arm.action == a && arm.layer == h { 0.5 + eps_gap } else { 0.5 };
            row[GOOD] = p_good;
            row[BAD] = 1.0 - p_good;
        } else {
            let i = s - 3 - num_mab;
            match a {
                0 => row[mab_state(num_mab, i)] = 1.0,
                1 if step <= h_param + 2 => row[s] = 1.0,
                _ => row[BAD] = 1.0,
            }
        }
        row
    })?;
    let mut mean = Array3::zeros((horizon, n, num_actions));
    for h in 0..horizon {
        for a in 0..num_actions {
            mean[[h, BAD, a]] = 1.0;
        }
    }
    let costs = CostProcess::Stochastic {
        mean: CostFunction::new(mean)?,
    };
    Ok((mdp, costs, arms))
}

/// Oblivious cost-sequence schemes.
#[derive(Clone, Debug, PartialEq)]
pub enum CostScheme {
    /// The same cost function every episode.
    Fixed(CostFunction),
    /// Alternates between two cost functions every `period` episodes.
    PiecewiseSwitching {
        first: CostFunction,
        second: CostFunction,
        period: usize,
    },
    /// An independent uniform cost function per episode.
    PerEpisodeRandom,
}

impl CostScheme {
    /// Scheme addressed by name, with random cost tensors drawn from `rng`.
    /// Known names: `fixed`, `switching`, `per_episode`, `zero`.
    pub fn named<R: Rng + ?Sized>(
        name: &str,
        mdp: &Mdp,
        period: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (h, s, a) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
        match name {
            "fixed" => Ok(CostScheme::Fixed(CostFunction::random(h, s, a, rng))),
            "zero" => Ok(CostScheme::Fixed(CostFunction::zeros(h, s, a))),
            "switching" => {
                let first = CostFunction::random(h, s, a, rng);
                let second = CostFunction::random(h, s, a, rng);
                Ok(CostScheme::PiecewiseSwitching { first, second, period })
            }
            "per_episode" => Ok(CostScheme::PerEpisodeRandom),
            other => Err(arg_err!("unknown cost scheme '{other}'")),
        }
    }
}

/// Generates a `K`-long oblivious cost sequence. The output depends only on
/// the scheme and `rng`.
pub fn adversarial_cost_generator<R: Rng + ?Sized>(
    mdp: &Mdp,
    episodes: usize,
    scheme: &CostScheme,
    rng: &mut R,
) -> Result<CostProcess> {
    if episodes == 0 {
        return Err(arg_err!("K must be at least 1"));
    }
    let dims = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let sequence = match scheme {
        CostScheme::Fixed(c) => {
            mdp.check_cost(c.values())?;
            vec![c.clone(); episodes]
        }
        CostScheme::PiecewiseSwitching { first, second, period } => {
            if *period == 0 {
                return Err(arg_err!("switching period must be positive"));
            }
            mdp.check_cost(first.values())?;
            mdp.check_cost(second.values())?;
            (0..episodes)
                .map(|k| if (k / period) % 2 == 0 { first.clone() } else { second.clone() })
                .collect()
        }
        CostScheme::PerEpisodeRandom => (0..episodes)
            .map(|_| CostFunction::random(dims.0, dims.1, dims.2, rng))
            .collect(),
    };
    Ok(CostProcess::Adversarial { sequence })
}

/// A built environment instance.
#[derive(Clone, Debug)]
pub struct Environment {
    pub name: String,
    pub mdp: Mdp,
    pub costs: CostProcess,
}

/// Names accepted by [`build_named_env`], with their parameters.
pub const ENVIRONMENTS: &[(&str, &str)] = &[
    (
        "mab_embed",
        "start/bad/bandit-state MDP; params S, A, H, eps_gap (default sqrt(S*A/K))",
    ),
    (
        "wait_state",
        "start/bad/good/bandit/wait MDP with horizon 2H+1; params S, A, H, eps_gap (default sqrt(S*A/K))",
    ),
    (
        "random",
        "random transitions; params S, A, H, costs (stochastic|fixed|switching|per_episode|zero), period",
    ),
];

pub(crate) fn param_usize(params: &Map<String, Value>, key: &str, default: Option<usize>) -> Result<usize> {
    match params.get(key) {
        Some(v) => v
            .as_u64()
            .map(|x| x as usize)
            .ok_or_else(|| Error::Config(format!("parameter '{key}' must be a non-negative integer"))),
        None => default.ok_or_else(|| Error::Config(format!("missing parameter '{key}'"))),
    }
}

pub(crate) fn param_f64(params: &Map<String, Value>, key: &str) -> Result<Option<f64>> {
    match params.get(key) {
        Some(v) => v
            .as_f64()
            .map(Some)
            .ok_or_else(|| Error::Config(format!("parameter '{key}' must be a number"))),
        None => Ok(None),
    }
}

/// Default gap of the lower-bound environments, `sqrt(S*A/K)` capped below 1/2.
pub fn default_eps_gap(num_mab: usize, num_actions: usize, episodes: usize) -> f64 {
    ((num_mab * num_actions) as f64 / episodes as f64).sqrt().min(0.49)
}

/// Builds an environment from its registry name and parameter map.
pub fn build_named_env(
    name: &str,
    params: &Map<String, Value>,
    episodes: usize,
    rng: &mut SimRng,
) -> Result<Environment> {
    let s = param_usize(params, "S", None)?;
    let a = param_usize(params, "A", None)?;
    let h = param_usize(params, "H", None)?;
    let (mdp, costs) = match name {
        "mab_embed" | "wait_state" => {
            let eps = param_f64(params, "eps_gap")?.unwrap_or_else(|| default_eps_gap(s, a, episodes));
            if name == "mab_embed" {
                let (m, c, _) = build_mab_embed_env(s, a, h, eps, rng)?;
                (m, c)
            } else {
                let (m, c, _) = build_wait_state_env(s, a, h, eps, rng)?;
                (m, c)
            }
        }
        "random" => {
            let mdp = Mdp::random(s, a, h, rng)?;
            let scheme = params.get("costs").and_then(Value::as_str).unwrap_or("stochastic");
            let costs = if scheme == "stochastic" {
                CostProcess::Stochastic {
                    mean: CostFunction::random(h, s, a, rng),
                }
            } else {
                let period = param_usize(params, "period", Some((episodes / 10).max(1)))?;
                let scheme = CostScheme::named(scheme, &mdp, period, rng)?;
                adversarial_cost_generator(&mdp, episodes, &scheme, rng)?
            };
            (mdp, costs)
        }
        other => return Err(Error::Config(format!("unknown environment '{other}'"))),
    };
    Ok(Environment {
        name: name.to_string(),
        mdp,
        costs,
    })
}

/// Successor table of a deterministic MDP, `None` if some row is not one-hot.
pub fn deterministic_successors(mdp: &Mdp) -> Option<Array3<usize>> {
    let dims = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut out = Array3::zeros(dims);
    for h in 0..dims.0 {
        for s in 0..dims.1 {
            for a in 0..dims.2 {
                let row = mdp.transition(h, s, a);
                let next = row.iter().position(|&p| p == 1.0)?;
                out[[h, s, a]] = next;
            }
        }
    }
    Some(out)
}
