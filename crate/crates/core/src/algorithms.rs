//! The cooperative learners. Each episode a learner hands out one policy per
//! agent, then consumes the team trajectory.

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Once};

use log::warn;
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::env::{RandomnessMode, TeamTrajectory};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::estimators::{
    estimate_reach_nonfresh, is_estimator_assigned, is_estimator_team, mc_sample_count, reach_probability_fresh,
    team_reach, ConfidenceModel, ReachTable,
};
use crate::mdp::{argmin_lowest, occupancy_of, Mdp, MdpShape, OccupancyMeasure, Policy};
use crate::omd::{
    confidence_set, kl_project_confidence, kl_project_known_p, policy_from_extended, policy_from_occupancy,
    upper_occupancy, ExtendedOccupancy, TransitionConfidenceSet,
};
use crate::rng::{stream, SimRng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "coop-ulcvi")]
    CoopUlcvi,
    #[serde(rename = "coop-ulcae")]
    CoopUlcae,
    #[serde(rename = "coop-o-reps")]
    CoopOReps,
    #[serde(rename = "coop-uob-reps")]
    CoopUobReps,
    #[serde(rename = "coop-nf-o-reps")]
    CoopNfOReps,
    #[serde(rename = "coop-nf-uob-reps")]
    CoopNfUobReps,
}

/// Algorithm names with a short description.
pub const ALGORITHMS: &[(Algorithm, &str)] = &[
    (Algorithm::CoopUlcvi, "optimistic value iteration, one greedy policy for the team (fresh)"),
    (Algorithm::CoopUlcae, "optimism plus action elimination with randomized exploration (fresh or non-fresh)"),
    (Algorithm::CoopOReps, "entropic mirror descent on occupancies, known transitions (fresh)"),
    (Algorithm::CoopUobReps, "mirror descent over a transition confidence set (fresh)"),
    (Algorithm::CoopNfOReps, "mirror descent with Monte-Carlo team reach, known transitions (non-fresh)"),
    (Algorithm::CoopNfUobReps, "mirror descent with assigned explorers, unknown transitions (non-fresh)"),
];

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::CoopUlcvi => "coop-ulcvi",
            Algorithm::CoopUlcae => "coop-ulcae",
            Algorithm::CoopOReps => "coop-o-reps",
            Algorithm::CoopUobReps => "coop-uob-reps",
            Algorithm::CoopNfOReps => "coop-nf-o-reps",
            Algorithm::CoopNfUobReps => "coop-nf-uob-reps",
        }
    }

    pub fn needs_known_transitions(self) -> bool {
        matches!(self, Algorithm::CoopOReps | Algorithm::CoopNfOReps)
    }

    /// Errors when the algorithm cannot run under `mode`. Running
    /// coop-ULCVI with non-fresh randomness is allowed with a warning.
    pub fn check_mode(self, mode: RandomnessMode) -> Result<()> {
        use RandomnessMode::*;
        let ok = match self {
            Algorithm::CoopUlcvi | Algorithm::CoopUlcae => true,
            Algorithm::CoopOReps | Algorithm::CoopUobReps => mode == Fresh,
            Algorithm::CoopNfOReps | Algorithm::CoopNfUobReps => mode == NonFresh,
        };
        if ok {
            Ok(())
        } else {
            let need = if mode == Fresh { "nonfresh" } else { "fresh" };
            Err(Error::Config(format!(
                "{} is built for {need} randomness and cannot run in {mode} mode",
                self.name()
            )))
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ALGORITHMS
            .iter()
            .map(|(a, _)| *a)
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm '{s}'")))
    }
}

/// Step-size rule of coop-nf-O-REPS.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NfRates {
    /// `sqrt(ln(HSA/delta) / ((1 + A/m) S K))`.
    Proof,
    /// `1 / sqrt((1 + SA/m) K)`.
    Header,
}

/// Learner parameters. Unset rates fall back to the theory defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerConfig {
    pub algorithm: Algorithm,
    pub mode: RandomnessMode,
    pub shape: MdpShape,
    pub episodes: usize,
    pub agents: usize,
    pub delta: f64,
    pub eta: Option<f64>,
    pub gamma: Option<f64>,
    pub epsilon: Option<f64>,
    pub n_mc: Option<usize>,
    pub tau: Option<f64>,
    /// Coefficient of the `H^2 S tau / n` bonus term.
    pub lower_order_coef: f64,
    pub nf_rates: NfRates,
}

pub const DEFAULT_DELTA: f64 = 0.1;
pub const DEFAULT_LOWER_ORDER_COEF: f64 = 44.0;

impl LearnerConfig {
    pub fn new(algorithm: Algorithm, mode: RandomnessMode, shape: MdpShape, episodes: usize, agents: usize) -> Self {
        Self {
            algorithm,
            mode,
            shape,
            episodes,
            agents,
            delta: DEFAULT_DELTA,
            eta: None,
            gamma: None,
            epsilon: None,
            n_mc: None,
            tau: None,
            lower_order_coef: DEFAULT_LOWER_ORDER_COEF,
            nf_rates: NfRates::Proof,
        }
    }

    /// Applies overrides from a JSON parameter map.
    pub fn apply_params(&mut self, params: &Map<String, Value>) -> Result<()> {
        let num = |k: &str, v: &Value| {
            v.as_f64()
                .ok_or_else(|| Error::Config(format!("algorithm parameter '{k}' must be a number")))
        };
        for (k, v) in params {
            match k.as_str() {
                "delta" => self.delta = num(k, v)?,
                "eta" => self.eta = Some(num(k, v)?),
                "gamma" => self.gamma = Some(num(k, v)?),
                "epsilon" => self.epsilon = Some(num(k, v)?),
                "tau" => self.tau = Some(num(k, v)?),
                "lower_order_coef" => self.lower_order_coef = num(k, v)?,
                "n_mc" => {
                    self.n_mc = Some(v.as_u64().ok_or_else(|| {
                        Error::Config("algorithm parameter 'n_mc' must be a positive integer".into())
                    })? as usize)
                }
                "nf_rates" => {
                    self.nf_rates = serde_json::from_value(v.clone())
                        .map_err(|_| Error::Config("'nf_rates' must be \"proof\" or \"header\"".into()))?
                }
                other => return Err(Error::Config(format!("unknown algorithm parameter '{other}'"))),
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.episodes == 0 {
            return bad("K must be at least 1".into());
        }
        if self.agents == 0 {
            return bad("m must be at least 1".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        for (name, v) in [("eta", self.eta), ("gamma", self.gamma), ("tau", self.tau)] {
            if let Some(x) = v {
                if !(x > 0.0 && x.is_finite()) {
                    return bad(format!("{name} must be positive, got {x}"));
                }
            }
        }
        if let Some(e) = self.epsilon {
            if !(0.0..=1.0).contains(&e) {
                return bad(format!("epsilon must lie in [0, 1], got {e}"));
            }
        }
        if self.n_mc == Some(0) {
            return bad("n_mc must be positive".into());
        }
        if !(self.lower_order_coef >= 0.0) {
            return bad("lower_order_coef must be nonnegative".into());
        }
        self.algorithm.check_mode(self.mode)
    }

    fn dims(&self) -> (f64, f64, f64, f64, f64) {
        (
            self.shape.horizon as f64,
            self.shape.num_states as f64,
            self.shape.num_actions as f64,
            self.episodes as f64,
            self.agents as f64,
        )
    }

    /// `3 ln(6 S A H K m / delta)` unless overridden.
    pub fn tau(&self) -> f64 {
        let (h, s, a, k, m) = self.dims();
        self.tau.unwrap_or_else(|| 3.0 * (6.0 * s * a * h * k * m / self.delta).ln())
    }

    /// Theory default of the step size and bias, which coincide.
    pub fn default_rate(&self) -> f64 {
        let (h, s, a, k, m) = self.dims();
        let d = self.delta;
        match self.algorithm {
            Algorithm::CoopOReps => ((h * s * a / d).ln() / ((1.0 + s * a / m) * k)).sqrt(),
            Algorithm::CoopUobReps => ((m * k * h * s * a / d).ln() / ((1.0 + s * a / m) * k)).sqrt(),
            Algorithm::CoopNfOReps => match self.nf_rates {
                NfRates::Proof => ((h * s * a / d).ln() / ((1.0 + a / m) * s * k)).sqrt(),
                NfRates::Header => 1.0 / ((1.0 + s * a / m) * k).sqrt(),
            },
            Algorithm::CoopNfUobReps => ((k * h * s * a / d).ln() / (s * k)).sqrt(),
            Algorithm::CoopUlcvi | Algorithm::CoopUlcae => 0.0,
        }
    }

    pub fn eta(&self) -> f64 {
        self.eta.unwrap_or_else(|| self.default_rate())
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or_else(|| self.default_rate())
    }

    /// `min(HA/m, 1/sqrt(m))` unless overridden.
    pub fn epsilon(&self) -> f64 {
        let (h, _, a, _, m) = self.dims();
        self.epsilon.unwrap_or_else(|| (h * a / m).min(1.0 / m.sqrt()))
    }

    /// Monte-Carlo rollouts per episode, `ceil(10 gamma^-2 ln(KHSAm/delta))`
    /// unless overridden.
    pub fn n_mc(&self) -> usize {
        self.n_mc.unwrap_or_else(|| {
            mc_sample_count(self.gamma(), self.delta, self.episodes, self.shape.sah(), self.agents).ceil() as usize
        })
    }
}

/// Optimistic and pessimistic value bounds. Value tensors have `H + 1` rows,
/// the last one zero.
#[derive(Clone, Debug, PartialEq)]
pub struct QBounds {
    pub q_low: Array3<f64>,
    pub q_high: Array3<f64>,
    pub v_low: Array2<f64>,
    pub v_high: Array2<f64>,
}

/// Surviving actions per `(h, s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActiveSets {
    active: Array3<bool>,
}

impl ActiveSets {
    pub fn full(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            active: Array3::from_elem((horizon, num_states, num_actions), true),
        }
    }

    pub fn from_mask(active: Array3<bool>) -> Result<Self> {
        let sets = Self { active };
        let (hh, ss, _) = sets.active.dim();
        for h in 0..hh {
            for s in 0..ss {
                if sets.actions(h, s).is_empty() {
                    return Err(arg_err!("active set at (h={h}, s={s}) is empty"));
                }
            }
        }
        Ok(sets)
    }

    pub fn mask(&self) -> &Array3<bool> {
        &self.active
    }

    pub fn contains(&self, h: usize, s: usize, a: usize) -> bool {
        self.active[[h, s, a]]
    }

    pub fn actions(&self, h: usize, s: usize) -> Vec<usize> {
        (0..self.active.dim().2).filter(|&a| self.active[[h, s, a]]).collect()
    }

    /// Whether every set of `self` is contained in the matching set of `other`.
    pub fn is_subset_of(&self, other: &ActiveSets) -> bool {
        self.active.dim() == other.active.dim()
            && self.active.iter().zip(other.active.iter()).all(|(&x, &y)| !x || y)
    }
}

/// Backward pass producing value bounds and the greedy policy
/// `argmin_a Q_low` (ties to the lowest action).
pub fn opvi(model: &ConfidenceModel, config: &LearnerConfig) -> Result<(QBounds, Policy)> {
    let (hh, ss, aa) = model.dim();
    if config.shape.sah() != (hh, ss, aa) {
        return Err(shape_err!("model {:?} vs configured {:?}", (hh, ss, aa), config.shape.sah()));
    }
    let tau = config.tau();
    let hf = hh as f64;
    let lower_order = config.lower_order_coef * hf * hf * ss as f64 * tau;
    let p_hat = model.p_hat();
    let c_hat = model.c_hat();
    let mut q_low = Array3::zeros((hh, ss, aa));
    let mut q_high = Array3::zeros((hh, ss, aa));
    let mut v_low = Array2::zeros((hh + 1, ss));
    let mut v_high = Array2::zeros((hh + 1, ss));
    let mut greedy = Array2::zeros((hh, ss));
    for h in (0..hh).rev() {
        for s in 0..ss {
            for a in 0..aa {
                let n = model.count_or_one(h, s, a);
                let mut e_low = 0.0f64;
                let mut e_low2 = 0.0;
                let mut e_high = 0.0;
                for t in 0..ss {
                    let p = p_hat[[h, s, a, t]];
                    if p > 0.0 {
                        e_low += p * v_low[[h + 1, t]];
                        e_low2 += p * v_low[[h + 1, t]] * v_low[[h + 1, t]];
                        e_high += p * v_high[[h + 1, t]];
                    }
                }
                let var = (e_low2 - e_low * e_low).max(0.0);
                let b_c = (2.0 * tau / n).sqrt();
                let b_p = (2.0 * var * tau / n).sqrt() + lower_order / n + (e_high - e_low) / (16.0 * hf);
                let b = b_c + b_p;
                q_low[[h, s, a]] = c_hat[[h, s, a]] - b + e_low;
                q_high[[h, s, a]] = c_hat[[h, s, a]] + b + e_high;
            }
            let best = argmin_lowest((0..aa).map(|a| q_low[[h, s, a]]));
            greedy[[h, s]] = best;
            v_low[[h, s]] = q_low[[h, s, best]].max(0.0);
            v_high[[h, s]] = q_high[[h, s, best]].min(hf);
        }
    }
    let policy = Policy::deterministic(&greedy, aa)?;
    Ok((
        QBounds {
            q_low,
            q_high,
            v_low,
            v_high,
        },
        policy,
    ))
}

/// Removes every active action whose lower bound exceeds the upper bound of
/// some other active action.
pub fn eliminate(active: &ActiveSets, bounds: &QBounds) -> ActiveSets {
    let mut out = active.active.clone();
    let (hh, ss, aa) = out.dim();
    for h in 0..hh {
        for s in 0..ss {
            let acts = active.actions(h, s);
            let min_high = acts
                .iter()
                .map(|&a| bounds.q_high[[h, s, a]])
                .fold(f64::INFINITY, f64::min);
            for &a in &acts {
                if bounds.q_low[[h, s, a]] > min_high {
                    out[[h, s, a]] = false;
                }
            }
            if (0..aa).all(|a| !out[[h, s, a]]) {
                let keep = acts[argmin_lowest(acts.iter().map(|&a| bounds.q_low[[h, s, a]]))];
                out[[h, s, keep]] = true;
            }
        }
    }
    ActiveSets { active: out }
}

/// Assignment of `(h, a)` exploration targets to agents,
/// `(k H A + h A + a) mod m` for 0-based `k`, `h`, `a`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SigmaMapping {
    horizon: usize,
    num_actions: usize,
    episodes: usize,
    agents: usize,
}

impl SigmaMapping {
    pub fn new(horizon: usize, num_actions: usize, episodes: usize, agents: usize) -> Result<Self> {
        if agents < horizon * num_actions {
            return Err(arg_err!(
                "the assignment needs m >= H*A = {} agents, got m = {agents}",
                horizon * num_actions
            ));
        }
        Ok(Self {
            horizon,
            num_actions,
            episodes,
            agents,
        })
    }

    pub fn agent(&self, h: usize, a: usize, k: usize) -> usize {
        let ha = self.horizon * self.num_actions;
        (k * ha + h * self.num_actions + a) % self.agents
    }

    /// `[h, a] -> agent` for episode `k`.
    pub fn episode(&self, k: usize) -> Array2<usize> {
        Array2::from_shape_fn((self.horizon, self.num_actions), |(h, a)| self.agent(h, a, k))
    }

    /// Number of assignments of each agent over all episodes.
    pub fn totals(&self) -> Vec<usize> {
        let mut t = vec![0; self.agents];
        for k in 0..self.episodes {
            for v in self.episode(k).iter() {
                t[*v] += 1;
            }
        }
        t
    }
}

/// Read-only view of a learner's internal confidence state.
#[derive(Clone, Copy, Debug, Default)]
pub struct Diagnostics<'a> {
    pub bounds: Option<&'a QBounds>,
    pub active: Option<&'a ActiveSets>,
    pub occupancy: Option<&'a ExtendedOccupancy>,
    pub kkt_residual: Option<f64>,
}

/// Learner contract. Episodes are 0-based and must be played in order.
pub trait Learner: Send {
    fn algorithm_name(&self) -> &str;
    /// One policy per agent for episode `k`.
    fn begin_episode(&mut self, k: usize) -> Result<Vec<Arc<Policy>>>;
    fn observe(&mut self, k: usize, traj: &TeamTrajectory) -> Result<()>;
    fn diagnostics(&self) -> Diagnostics<'_> {
        Diagnostics::default()
    }
}

fn check_episode(expected: usize, k: usize) -> Result<()> {
    if k != expected {
        return Err(Error::Usage(format!("expected episode {expected}, got {k}")));
    }
    Ok(())
}

fn check_team(config: &LearnerConfig, traj: &TeamTrajectory) -> Result<()> {
    if traj.num_agents() != config.agents {
        return Err(shape_err!("trajectory has {} agents, learner {}", traj.num_agents(), config.agents));
    }
    Ok(())
}

/// Cooperative optimistic value iteration: the whole team plays the greedy
/// optimistic policy.
pub struct CoopUlcvi {
    config: LearnerConfig,
    model: ConfidenceModel,
    bounds: Option<QBounds>,
    current: Option<Arc<Policy>>,
    next_episode: usize,
}

impl CoopUlcvi {
    pub fn new(config: LearnerConfig) -> Result<Self> {
        config.validate()?;
        if config.mode == RandomnessMode::NonFresh {
            static WARNED: Once = Once::new();
            WARNED.call_once(|| warn!("coop-ulcvi has no guarantee under non-fresh randomness"));
        }
        let (h, s, a) = config.shape.sah();
        Ok(Self {
            model: ConfidenceModel::new(h, s, a, config.mode),
            config,
            bounds: None,
            current: None,
            next_episode: 0,
        })
    }
}

impl Learner for CoopUlcvi {
    fn algorithm_name(&self) -> &str {
        Algorithm::CoopUlcvi.name()
    }

    fn begin_episode(&mut self, k: usize) -> Result<Vec<Arc<Policy>>> {
        check_episode(self.next_episode, k)?;
        let (bounds, policy) = opvi(&self.model, &self.config)?;
        let policy = Arc::new(policy);
        self.bounds = Some(bounds);
        self.current = Some(policy.clone());
        Ok(vec![policy; self.config.agents])
    }

    fn observe(&mut self, k: usize, traj: &TeamTrajectory) -> Result<()> {
        check_episode(self.next_episode, k)?;
        check_team(&self.config, traj)?;
        self.model.update_counts(traj)?;
        self.next_episode += 1;
        Ok(())
    }

    fn diagnostics(&self) -> Diagnostics<'_> {
        Diagnostics {
            bounds: self.bounds.as_ref(),
            ..Diagnostics::default()
        }
    }
}

/// Optimism with action elimination. Each agent independently explores one
/// random layer with probability epsilon, uniformly over surviving actions.
pub struct CoopUlcae {
    config: LearnerConfig,
    model: ConfidenceModel,
    active: ActiveSets,
    bounds: Option<QBounds>,
    agent_rngs: Vec<SimRng>,
    explored: Vec<Option<usize>>,
    next_episode: usize,
}

impl CoopUlcae {
    pub fn new(config: LearnerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (h, s, a) = config.shape.sah();
        let agent_rngs = (0..config.agents)
            .map(|v| stream(seed, Stream::LearnerAgent(v)))
            .collect();
        Ok(Self {
            model: ConfidenceModel::new(h, s, a, config.mode),
            active: ActiveSets::full(h, s, a),
            explored: vec![None; config.agents],
            config,
            bounds: None,
            agent_rngs,
            next_episode: 0,
        })
    }

    /// Layer each agent explored in the last episode, `None` if it exploited.
    pub fn explored_layers(&self) -> &[Option<usize>] {
        &self.explored
    }

    fn exploration_policy(&self, greedy: &Policy, layer: usize) -> Policy {
        let (hh, ss, aa) = greedy.dim();
        let mut probs = greedy.probs().clone();
        debug_assert!(layer < hh);
        for s in 0..ss {
            let acts = self.active.actions(layer, s);
            let p = 1.0 / acts.len() as f64;
            for a in 0..aa {
                probs[[layer, s, a]] = if self.active.contains(layer, s, a) { p } else { 0.0 };
            }
        }
        Policy::from_probs_unchecked(probs)
    }
}

impl Learner for CoopUlcae {
    fn algorithm_name(&self) -> &str {
        Algorithm::CoopUlcae.name()
    }

    fn begin_episode(&mut self, k: usize) -> Result<Vec<Arc<Policy>>> {
        check_episode(self.next_episode, k)?;
        let (bounds, greedy) = opvi(&self.model, &self.config)?;
        self.active = eliminate(&self.active, &bounds);
        self.bounds = Some(bounds);
        let hh = self.config.shape.horizon;
        let eps = self.config.epsilon();
        let greedy = Arc::new(greedy);
        let mut explore: Vec<Option<Arc<Policy>>> = vec![None; hh];
        let mut out = Vec::with_capacity(self.config.agents);
        for v in 0..self.config.agents {
            let rng = &mut self.agent_rngs[v];
            let layer = rng.gen_range(0..hh);
            let coin: f64 = rng.gen();
            if coin < eps {
                if explore[layer].is_none() {
                    explore[layer] = Some(Arc::new(self.exploration_policy(&greedy, layer)));
                }
                out.push(explore[layer].clone().unwrap());
                self.explored[v] = Some(layer);
            } else {
                out.push(greedy.clone());
                self.explored[v] = None;
            }
        }
        Ok(out)
    }

    fn observe(&mut self, k: usize, traj: &TeamTrajectory) -> Result<()> {
        check_episode(self.next_episode, k)?;
        check_team(&self.config, traj)?;
        self.model.update_counts(traj)?;
        self.next_episode += 1;
        Ok(())
    }

    fn diagnostics(&self) -> Diagnostics<'_> {
        Diagnostics {
            bounds: self.bounds.as_ref(),
            active: Some(&self.active),
            ..Diagnostics::default()
        }
    }
}

/// Shared state of the known-transition mirror-descent learners.
struct KnownPState {
    config: LearnerConfig,
    mdp: Mdp,
    q: OccupancyMeasure,
    policy: Arc<Policy>,
    next_episode: usize,
}

impl KnownPState {
    fn new(config: LearnerConfig, mdp: &Mdp) -> Result<Self> {
        config.validate()?;
        if mdp.shape() != config.shape {
            return Err(shape_err!("MDP {:?} vs configured {:?}", mdp.shape(), config.shape));
        }
        let (h, s, a) = config.shape.sah();
        let uniform = Policy::uniform(h, s, a);
        let q = occupancy_of(&uniform, mdp)?;
        Ok(Self {
            config,
            mdp: mdp.clone(),
            q,
            policy: Arc::new(uniform),
            next_episode: 0,
        })
    }

    fn begin(&self, k: usize) -> Result<Vec<Arc<Policy>>> {
        check_episode(self.next_episode, k)?;
        Ok(vec![self.policy.clone(); self.config.agents])
    }

    fn update(&mut self, traj: &TeamTrajectory, reach: &ReachTable) -> Result<()> {
        check_team(&self.config, traj)?;
        let observed = traj.observed_costs(self.config.shape.sah())?;
        let c_hat = is_estimator_team(&observed, reach, self.config.gamma())?;
        self.q = kl_project_known_p(&self.q, &c_hat, self.config.eta(), &self.mdp)?;
        self.policy = Arc::new(policy_from_occupancy(&self.q));
        self.next_episode += 1;
        Ok(())
    }
}

/// Mirror descent over occupancies with known transitions; the team reach
/// probability has a closed form under fresh randomness.
pub struct CoopOReps {
    state: KnownPState,
}

impl CoopOReps {
    pub fn new(config: LearnerConfig, mdp: &Mdp) -> Result<Self> {
        Ok(Self {
            state: KnownPState::new(config, mdp)?,
        })
    }

    pub fn occupancy(&self) -> &OccupancyMeasure {
        &self.state.q
    }
}

impl Learner for CoopOReps {
    fn algorithm_name(&self) -> &str {
        Algorithm::CoopOReps.name()
    }

    fn begin_episode(&mut self, k: usize) -> Result<Vec<Arc<Policy>>> {
        self.state.begin(k)
    }

    fn observe(&mut self, k: usize, traj: &TeamTrajectory) -> Result<()> {
        check_episode(self.state.next_episode, k)?;
        let reach = reach_probability_fresh(&self.state.q, self.state.config.agents)?;
        self.state.update(traj, &reach)
    }
}

/// Known-transition mirror descent under non-fresh randomness; team reach
/// probabilities are estimated by simulation.
pub struct CoopNfOReps {
    state: KnownPState,
    rng: SimRng,
    last_reach: Option<ReachTable>,
}

impl CoopNfOReps {
    pub fn new(config: LearnerConfig, mdp: &Mdp, seed: u64) -> Result<Self> {
        Ok(Self {
            state: KnownPState::new(config, mdp)?,
            rng: stream(seed, Stream::Learner),
            last_reach: None,
        })
    }

    pub fn occupancy(&self) -> &OccupancyMeasure {
        &self.state.q
    }

    /// Reach estimate used in the last update.
    pub fn last_reach(&self) -> Option<&ReachTable> {
        self.last_reach.as_ref()
    }
}

impl Learner for CoopNfOReps {
    fn algorithm_name(&self) -> &str {
        Algorithm::CoopNfOReps.name()
    }

    fn begin_episode(&mut self, k: usize) -> Result<Vec<Arc<Policy>>> {
        self.state.begin(k)
    }

    fn observe(&mut self, k: usize, traj: &TeamTrajectory) -> Result<()> {
        check_episode(self.state.next_episode, k)?;
        let cfg = &self.state.config;
        let reach = estimate_reach_nonfresh(&self.state.mdp, &self.state.policy, cfg.agents, cfg.n_mc(), &mut self.rng)?;
        self.state.update(traj, &reach)?;
        self.last_reach = Some(reach);
        Ok(())
    }
}

/// Shared state of the unknown-transition mirror-descent learners.
struct ConfidenceState {
    config: LearnerConfig,
    model: ConfidenceModel,
    cset: TransitionConfidenceSet,
    pinned: bool,
    q: ExtendedOccupancy,
    policy: Arc<Policy>,
    next_episode: usize,
    last_residual: f64,
}

impl ConfidenceState {
    fn new(config: LearnerConfig) -> Result<Self> {
        config.validate()?;
        let (h, s, a) = config.shape.sah();
        let model = ConfidenceModel::new(h, s, a, config.mode);
        let cset = confidence_set(&model, config.delta, config.episodes)?;
        Ok(Self {
            config,
            model,
            cset,
            pinned: false,
            q: ExtendedOccupancy::uniform(h, s, a),
            policy: Arc::new(Policy::uniform(h, s, a)),
            next_episode: 0,
            last_residual: 0.0,
        })
    }

    fn pin(&mut self, cset: TransitionConfidenceSet, initial: ExtendedOccupancy) -> Result<()> {
        if cset.dim() != self.config.shape.sah() || initial.dim() != self.config.shape.sah() {
            return Err(shape_err!("pinned confidence set or occupancy does not match the configured shape"));
        }
        self.policy = Arc::new(policy_from_extended(&initial));
        self.cset = cset;
        self.q = initial;
        self.pinned = true;
        Ok(())
    }

    fn diagnostics(&self) -> Diagnostics<'_> {
        Diagnostics {
            occupancy: Some(&self.q),
            kkt_residual: Some(self.last_residual),
            ..Diagnostics::default()
        }
    }

    fn upper_state_occupancy(&self) -> Result<Array2<f64>> {
        upper_occupancy(&self.policy, &self.cset, &self.config.shape)
    }

    fn update(&mut self, traj: &TeamTrajectory, c_hat: &crate::estimators::CostEstimate) -> Result<()> {
        self.model.update_counts(traj)?;
        if !self.pinned {
            self.cset = confidence_set(&self.model, self.config.delta, self.config.episodes)?;
        }
        let proj = kl_project_confidence(&self.q, c_hat, self.config.eta(), &self.cset, &self.config.shape)?;
        self.last_residual = proj.kkt_residual;
        self.q = proj.q;
        self.policy = Arc::new(policy_from_extended(&self.q));
        self.next_episode += 1;
        Ok(())
    }
}

/// Mirror descent over the occupancy polytope of a transition confidence
/// set, with optimistic team reach probabilities.
pub struct CoopUobReps {
    state: ConfidenceState,
}

impl CoopUobReps {
    pub fn new(config: LearnerConfig) -> Result<Self> {
        Ok(Self {
            state: ConfidenceState::new(config)?,
        })
    }

    /// Keeps `cset` fixed for the whole run and starts from `initial`.
    #[doc(hidden)]
    pub fn with_pinned_confidence_set(
        config: LearnerConfig,
        cset: TransitionConfidenceSet,
        initial: ExtendedOccupancy,
    ) -> Result<Self> {
        let mut state = ConfidenceState::new(config)?;
        state.pin(cset, initial)?;
        Ok(Self { state })
    }

    pub fn occupancy(&self) -> &ExtendedOccupancy {
        &self.state.q
    }

    pub fn confidence_set(&self) -> &TransitionConfidenceSet {
        &self.state.cset
    }

    pub fn last_kkt_residual(&self) -> f64 {
        self.state.last_residual
    }

    /// Optimistic team reach `1 - (1 - pi(a|s) u_h(s))^m` for the current
    /// policy and confidence set.
    pub fn team_upper_reach(&self) -> Result<ReachTable> {
        let u = self.state.upper_state_occupancy()?;
        let m = self.state.config.agents;
        let pi = &self.state.policy;
        let big_u = Array3::from_shape_fn(pi.dim(), |(h, s, a)| team_reach((pi.prob(h, s, a) * u[[h, s]]).min(1.0), m));
        ReachTable::new(big_u)
    }
}

impl Learner for CoopUobReps {
    fn algorithm_name(&self) -> &str {
        Algorithm::CoopUobReps.name()
    }

    fn diagnostics(&self) -> Diagnostics<'_> {
        self.state.diagnostics()
    }

    fn begin_episode(&mut self, k: usize) -> Result<Vec<Arc<Policy>>> {
        check_episode(self.state.next_episode, k)?;
        Ok(vec![self.state.policy.clone(); self.state.config.agents])
    }

    fn observe(&mut self, k: usize, traj: &TeamTrajectory) -> Result<()> {
        check_episode(self.state.next_episode, k)?;
        check_team(&self.state.config, traj)?;
        let reach = self.team_upper_reach()?;
        let observed = traj.observed_costs(self.state.config.shape.sah())?;
        let c_hat = is_estimator_team(&observed, &reach, self.state.config.gamma())?;
        self.state.update(traj, &c_hat)
    }
}

/// Mirror descent under non-fresh randomness with unknown transitions. Each
/// `(h, a)` pair is assigned to one agent per episode, which follows the
/// current policy but forces action `a` at layer `h`.
pub struct CoopNfUobReps {
    state: ConfidenceState,
    sigma: SigmaMapping,
    assignment: Option<Array2<usize>>,
}

impl CoopNfUobReps {
    pub fn new(config: LearnerConfig) -> Result<Self> {
        let (h, _, a) = config.shape.sah();
        let need = (h * a).max((config.episodes as f64).sqrt().ceil() as usize);
        if config.agents < need {
            return Err(arg_err!(
                "coop-nf-uob-reps needs m >= max(H*A, ceil(sqrt(K))) = {need}, got m = {}",
                config.agents
            ));
        }
        let sigma = SigmaMapping::new(h, a, config.episodes, config.agents)?;
        Ok(Self {
            state: ConfidenceState::new(config)?,
            sigma,
            assignment: None,
        })
    }

    pub fn sigma(&self) -> &SigmaMapping {
        &self.sigma
    }

    pub fn occupancy(&self) -> &ExtendedOccupancy {
        &self.state.q
    }

    pub fn last_kkt_residual(&self) -> f64 {
        self.state.last_residual
    }
}

impl Learner for CoopNfUobReps {
    fn algorithm_name(&self) -> &str {
        Algorithm::CoopNfUobReps.name()
    }

    fn diagnostics(&self) -> Diagnostics<'_> {
        self.state.diagnostics()
    }

    fn begin_episode(&mut self, k: usize) -> Result<Vec<Arc<Policy>>> {
        check_episode(self.state.next_episode, k)?;
        let assignment = self.sigma.episode(k);
        let base = self.state.policy.clone();
        let mut out = vec![base.clone(); self.state.config.agents];
        for ((h, a), &v) in assignment.indexed_iter() {
            out[v] = Arc::new(out[v].with_forced_action(h, a));
        }
        self.assignment = Some(assignment);
        Ok(out)
    }

    fn observe(&mut self, k: usize, traj: &TeamTrajectory) -> Result<()> {
        check_episode(self.state.next_episode, k)?;
        check_team(&self.state.config, traj)?;
        let assignment = self
            .assignment
            .take()
            .ok_or_else(|| Error::Usage("observe called before begin_episode".into()))?;
        let u = self.state.upper_state_occupancy()?;
        let c_hat = is_estimator_assigned(
            traj,
            &assignment,
            &u,
            self.state.config.shape.num_states,
            self.state.config.gamma(),
        )?;
        self.state.update(traj, &c_hat)
    }
}

/// Plays one fixed policy with every agent and never learns.
pub struct FixedPolicy {
    policy: Arc<Policy>,
    agents: usize,
}

impl FixedPolicy {
    pub fn new(policy: Policy, agents: usize) -> Self {
        Self {
            policy: Arc::new(policy),
            agents,
        }
    }
}

impl Learner for FixedPolicy {
    fn algorithm_name(&self) -> &str {
        "fixed"
    }

    fn begin_episode(&mut self, _k: usize) -> Result<Vec<Arc<Policy>>> {
        Ok(vec![self.policy.clone(); self.agents])
    }

    fn observe(&mut self, _k: usize, _traj: &TeamTrajectory) -> Result<()> {
        Ok(())
    }
}

/// Builds the configured learner. Known-transition algorithms read `mdp`;
/// the others only use its shape.
pub fn build_learner(config: &LearnerConfig, mdp: &Mdp, seed: u64) -> Result<Box<dyn Learner>> {
    config.validate()?;
    Ok(match config.algorithm {
        Algorithm::CoopUlcvi => Box::new(CoopUlcvi::new(config.clone())?),
        Algorithm::CoopUlcae => Box::new(CoopUlcae::new(config.clone(), seed)?),
        Algorithm::CoopOReps => Box::new(CoopOReps::new(config.clone(), mdp)?),
        Algorithm::CoopUobReps => Box::new(CoopUobReps::new(config.clone())?),
        Algorithm::CoopNfOReps => Box::new(CoopNfOReps::new(config.clone(), mdp, seed)?),
        Algorithm::CoopNfUobReps => Box::new(CoopNfUobReps::new(config.clone())?),
    })
}
