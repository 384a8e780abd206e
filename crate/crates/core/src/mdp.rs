//! Finite-horizon tabular MDPs, policies, occupancy measures and the exact
//! dynamic-programming routines everything else is checked against.
//!
//! Layers are indexed `0..H` internally (layer `h` here is step `h + 1` of an
//! episode). All tensors are dense `ndarray` arrays indexed `[h, s, a]` or
//! `[h, s, a, s']`.

use ndarray::{Array2, Array3, Array4, ArrayView1, Axis};
use rand::Rng;

use crate::error::{arg_err, shape_err, Error, Result};

/// Tolerance on probability rows summing to one.
pub const ROW_TOL: f64 = 1e-12;

/// Relative tolerance under which two action values count as tied.
pub const TIE_TOL: f64 = 1e-12;

/// Index of the smallest entry; near-ties go to the lowest index.
pub fn argmin_lowest<I: IntoIterator<Item = f64>>(values: I) -> usize {
    let values: Vec<f64> = values.into_iter().collect();
    let best = values.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = TIE_TOL * best.abs().max(1.0);
    values
        .iter()
        .position(|&v| v <= best + tol)
        .unwrap_or(0)
}

/// Checks a probability row, renormalizing it when it is within [`ROW_TOL`]
/// of summing to one.
pub(crate) fn normalize_row(row: &mut [f64], what: &str) -> Result<()> {
    if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(arg_err!("{what}: negative or non-finite probability"));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOL {
        return Err(arg_err!("{what}: row sums to {total}, not 1"));
    }
    for p in row.iter_mut() {
        *p /= total;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mdp {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    initial_state: usize,
    transitions: Array4<f64>,
}

impl Mdp {
    /// Builds an MDP from a `[H, S, A, S]` transition tensor.
    pub fn new(mut transitions: Array4<f64>, initial_state: usize) -> Result<Self> {
        let (horizon, num_states, num_actions, next) = transitions.dim();
        if horizon == 0 || num_states == 0 || num_actions == 0 {
            return Err(arg_err!("S, A and H must be positive"));
        }
        if next != num_states {
            return Err(shape_err!(
                "transition tensor has {next} successor states but {num_states} states"
            ));
        }
        if initial_state >= num_states {
            return Err(arg_err!("initial state {initial_state} out of range"));
        }
        for h in 0..horizon {
            for s in 0..num_states {
                for a in 0..num_actions {
                    let mut row = transitions.slice_mut(ndarray::s![h, s, a, ..]);
                    let slice = row
                        .as_slice_mut()
                        .expect("standard layout transition tensor");
                    normalize_row(slice, &format!("p[{h},{s},{a}]"))?;
                }
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            initial_state,
            transitions: transitions.as_standard_layout().to_owned(),
        })
    }

    /// Builds an MDP from a closure returning each transition row.
    pub fn from_fn<F>(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        initial_state: usize,
        mut row: F,
    ) -> Result<Self>
    where
        F: FnMut(usize, usize, usize) -> Vec<f64>,
    {
        let mut p = Array4::zeros((horizon, num_states, num_actions, num_states));
        for h in 0..horizon {
            for s in 0..num_states {
                for a in 0..num_actions {
                    let r = row(h, s, a);
                    if r.len() != num_states {
                        return Err(shape_err!("row ({h},{s},{a}) has length {}", r.len()));
                    }
                    for (sp, v) in r.into_iter().enumerate() {
                        p[[h, s, a, sp]] = v;
                    }
                }
            }
        }
        Self::new(p, initial_state)
    }

    /// Random instance with rows drawn uniformly from the simplex.
    pub fn random<R: Rng + ?Sized>(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::from_fn(num_states, num_actions, horizon, 0, |_, _, _| {
            // Normalized exponentials give the flat Dirichlet.
            let raw: Vec<f64> = (0..num_states)
                .map(|_| -(1.0 - rng.gen::<f64>()).ln())
                .collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / total).collect()
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn shape(&self) -> MdpShape {
        MdpShape {
            num_states: self.num_states,
            num_actions: self.num_actions,
            horizon: self.horizon,
            initial_state: self.initial_state,
        }
    }

    pub fn transitions(&self) -> &Array4<f64> {
        &self.transitions
    }

    pub fn transition(&self, h: usize, s: usize, a: usize) -> ArrayView1<'_, f64> {
        self.transitions.slice(ndarray::s![h, s, a, ..])
    }

    pub(crate) fn check_cost(&self, cost: &Array3<f64>) -> Result<()> {
        let want = (self.horizon, self.num_states, self.num_actions);
        if cost.dim() != want {
            return Err(shape_err!("cost shape {:?}, MDP expects {want:?}", cost.dim()));
        }
        Ok(())
    }

    pub(crate) fn check_policy(&self, policy: &Policy) -> Result<()> {
        let want = (self.horizon, self.num_states, self.num_actions);
        if policy.probs.dim() != want {
            return Err(shape_err!(
                "policy shape {:?}, MDP expects {want:?}",
                policy.probs.dim()
            ));
        }
        Ok(())
    }
}

/// Dimensions of an MDP without its transition function, for learners that do
/// not know the dynamics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MdpShape {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub initial_state: usize,
}

impl MdpShape {
    pub fn sah(&self) -> (usize, usize, usize) {
        (self.horizon, self.num_states, self.num_actions)
    }
}

/// Cost tensor `c[h, s, a]` with entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostFunction(Array3<f64>);

impl CostFunction {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(arg_err!("cost entry {bad} outside [0, 1]"));
        }
        Ok(Self(values))
    }

    pub fn zeros(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self(Array3::zeros((horizon, num_states, num_actions)))
    }

    pub fn constant(horizon: usize, num_states: usize, num_actions: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((horizon, num_states, num_actions), value))
    }

    pub fn random<R: Rng + ?Sized>(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        rng: &mut R,
    ) -> Self {
        Self(Array3::from_shape_simple_fn(
            (horizon, num_states, num_actions),
            || rng.gen::<f64>(),
        ))
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.0[[h, s, a]]
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    /// Entrywise `1 - c`.
    pub fn complement(&self) -> Self {
        Self(self.0.mapv(|c| 1.0 - c))
    }
}

/// How the per-episode cost functions are generated.
#[derive(Clone, Debug, PartialEq)]
pub enum CostProcess {
    /// Costs are Bernoulli draws around a fixed mean.
    Stochastic { mean: CostFunction },
    /// An oblivious sequence `c^1..c^K` fixed before the interaction.
    Adversarial { sequence: Vec<CostFunction> },
}

impl CostProcess {
    /// Expected cost function of episode `k` (0-based).
    pub fn expected_cost(&self, k: usize) -> &CostFunction {
        match self {
            CostProcess::Stochastic { mean } => mean,
            CostProcess::Adversarial { sequence } => &sequence[k],
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, CostProcess::Stochastic { .. })
    }

    /// Checks the process against an MDP and the episode count.
    pub fn validate(&self, mdp: &Mdp, episodes: usize) -> Result<()> {
        match self {
            CostProcess::Stochastic { mean } => mdp.check_cost(mean.values()),
            CostProcess::Adversarial { sequence } => {
                if sequence.len() != episodes {
                    return Err(arg_err!(
                        "adversarial sequence has {} cost functions, expected {episodes}",
                        sequence.len()
                    ));
                }
                sequence.iter().try_for_each(|c| mdp.check_cost(c.values()))
            }
        }
    }
}

/// Stochastic policy `pi[h, s, a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    probs: Array3<f64>,
}

impl Policy {
    pub fn new(mut probs: Array3<f64>) -> Result<Self> {
        let (horizon, num_states, _) = probs.dim();
        for h in 0..horizon {
            for s in 0..num_states {
                let mut row = probs.slice_mut(ndarray::s![h, s, ..]);
                let mut buf: Vec<f64> = row.to_vec();
                normalize_row(&mut buf, &format!("pi[{h},{s}]"))?;
                row.assign(&ArrayView1::from(&buf));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            probs: Array3::from_elem((horizon, num_states, num_actions), 1.0 / num_actions as f64),
        }
    }

    /// One-hot policy from an `[H, S]` action table.
    pub fn deterministic(actions: &Array2<usize>, num_actions: usize) -> Result<Self> {
        let (horizon, num_states) = actions.dim();
        let mut probs = Array3::zeros((horizon, num_states, num_actions));
        for ((h, s), &a) in actions.indexed_iter() {
            if a >= num_actions {
                return Err(arg_err!("action {a} out of range at ({h},{s})"));
            }
            probs[[h, s, a]] = 1.0;
        }
        Ok(Self { probs })
    }

    pub(crate) fn from_probs_unchecked(probs: Array3<f64>) -> Self {
        Self { probs }
    }

    pub fn probs(&self) -> &Array3<f64> {
        &self.probs
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.probs.dim()
    }

    pub fn prob(&self, h: usize, s: usize, a: usize) -> f64 {
        self.probs[[h, s, a]]
    }

    pub fn row(&self, h: usize, s: usize) -> ArrayView1<'_, f64> {
        self.probs.slice(ndarray::s![h, s, ..])
    }

    pub fn is_deterministic(&self) -> bool {
        self.probs.iter().all(|&p| p == 0.0 || p == 1.0)
    }

    /// Samples an action at `(h, s)` by inversion.
    pub fn sample<R: Rng + ?Sized>(&self, h: usize, s: usize, rng: &mut R) -> usize {
        sample_index(self.row(h, s), rng)
    }

    /// Same policy, but playing `action` deterministically at layer `h`.
    pub fn with_forced_action(&self, h: usize, action: usize) -> Self {
        let mut probs = self.probs.clone();
        let mut layer = probs.index_axis_mut(Axis(0), h);
        layer.fill(0.0);
        layer.index_axis_mut(Axis(1), action).fill(1.0);
        Self { probs }
    }
}

/// Inversion sampling from a probability row. Zero-probability entries are
/// never returned.
pub fn sample_index<R: Rng + ?Sized>(row: ArrayView1<'_, f64>, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in row.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Per-layer distribution `q[h, s, a]` over state-action pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyMeasure {
    q: Array3<f64>,
}

impl OccupancyMeasure {
    pub fn values(&self) -> &Array3<f64> {
        &self.q
    }

    pub fn into_values(self) -> Array3<f64> {
        self.q
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.q.dim()
    }

    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.q[[h, s, a]]
    }

    /// State marginals `q[h, s] = sum_a q[h, s, a]`.
    pub fn state_marginal(&self) -> Array2<f64> {
        self.q.sum_axis(Axis(2))
    }

    /// Largest violation of layer normalization, flow under `mdp`, and
    /// concentration of layer 0 on the initial state.
    pub fn max_violation(&self, mdp: &Mdp) -> Result<f64> {
        mdp.check_cost(&self.q)?;
        let marg = self.state_marginal();
        let mut worst: f64 = 0.0;
        for h in 0..mdp.horizon() {
            worst = worst.max((marg.row(h).sum() - 1.0).abs());
        }
        for s in 0..mdp.num_states() {
            let want = if s == mdp.initial_state() { 1.0 } else { 0.0 };
            worst = worst.max((marg[[0, s]] - want).abs());
        }
        for h in 0..mdp.horizon().saturating_sub(1) {
            let inflow = push_forward(mdp, h, &self.q);
            for s in 0..mdp.num_states() {
                worst = worst.max((marg[[h + 1, s]] - inflow[s]).abs());
            }
        }
        if let Some(neg) = self.q.iter().find(|&&x| x < 0.0) {
            worst = worst.max(-neg);
        }
        Ok(worst)
    }
}

/// State distribution at layer `h + 1` induced by layer-`h` occupancy `q`.
pub(crate) fn push_forward(mdp: &Mdp, h: usize, q: &Array3<f64>) -> Vec<f64> {
    let n = mdp.num_states();
    let mut next = vec![0.0; n];
    for s in 0..n {
        for a in 0..mdp.num_actions() {
            let w = q[[h, s, a]];
            if w == 0.0 {
                continue;
            }
            for (sp, &p) in mdp.transition(h, s, a).iter().enumerate() {
                next[sp] += w * p;
            }
        }
    }
    next
}

/// Value and action-value functions. `v` has `H + 1` rows; the last is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueFunctions {
    pub v: Array2<f64>,
    pub q: Array3<f64>,
}

impl ValueFunctions {
    /// `V_1(s_init)`.
    pub fn initial_value(&self, initial_state: usize) -> f64 {
        self.v[[0, initial_state]]
    }
}

/// Bellman backup of `V` through the transition rows of layer `h`.
fn expected_next(mdp: &Mdp, h: usize, s: usize, a: usize, v_next: ArrayView1<'_, f64>) -> f64 {
    mdp.transition(h, s, a).dot(&v_next)
}

pub(crate) fn evaluate_raw(mdp: &Mdp, cost: &Array3<f64>, policy: &Policy) -> Result<ValueFunctions> {
    mdp.check_cost(cost)?;
    mdp.check_policy(policy)?;
    let (hh, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut v = Array2::zeros((hh + 1, ns));
    let mut q = Array3::zeros((hh, ns, na));
    for h in (0..hh).rev() {
        for s in 0..ns {
            let mut vs = 0.0;
            for a in 0..na {
                let qa = cost[[h, s, a]] + expected_next(mdp, h, s, a, v.row(h + 1));
                q[[h, s, a]] = qa;
                vs += policy.prob(h, s, a) * qa;
            }
            v[[h, s]] = vs;
        }
    }
    Ok(ValueFunctions { v, q })
}

pub(crate) fn optimal_raw(mdp: &Mdp, cost: &Array3<f64>) -> Result<(Policy, ValueFunctions)> {
    mdp.check_cost(cost)?;
    let (hh, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut v = Array2::zeros((hh + 1, ns));
    let mut q = Array3::zeros((hh, ns, na));
    let mut actions = Array2::zeros((hh, ns));
    for h in (0..hh).rev() {
        for s in 0..ns {
            for a in 0..na {
                q[[h, s, a]] = cost[[h, s, a]] + expected_next(mdp, h, s, a, v.row(h + 1));
            }
            let best = argmin_lowest(q.slice(ndarray::s![h, s, ..]).iter().copied());
            actions[[h, s]] = best;
            v[[h, s]] = q[[h, s, best]];
        }
    }
    Ok((Policy::deterministic(&actions, na)?, ValueFunctions { v, q }))
}

/// Exact evaluation of `policy` under `cost` by backward induction.
pub fn evaluate_policy(mdp: &Mdp, cost: &CostFunction, policy: &Policy) -> Result<ValueFunctions> {
    evaluate_raw(mdp, cost.values(), policy)
}

/// Deterministic optimal policy and its value table (`H + 1` rows).
pub fn optimal_policy(mdp: &Mdp, cost: &CostFunction) -> Result<(Policy, Array2<f64>)> {
    let (pi, vf) = optimal_raw(mdp, cost.values())?;
    Ok((pi, vf.v))
}

/// Occupancy measure of `policy` by forward recursion from the initial state.
pub fn occupancy_of(policy: &Policy, mdp: &Mdp) -> Result<OccupancyMeasure> {
    mdp.check_policy(policy)?;
    let (hh, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut q = Array3::zeros((hh, ns, na));
    let mut states = vec![0.0; ns];
    states[mdp.initial_state()] = 1.0;
    for h in 0..hh {
        for s in 0..ns {
            for a in 0..na {
                q[[h, s, a]] = states[s] * policy.prob(h, s, a);
            }
        }
        if h + 1 < hh {
            states = push_forward(mdp, h, &q);
        }
    }
    Ok(OccupancyMeasure { q })
}

/// `<q, c>`, the expected total cost of the policy generating `q`.
pub fn value_via_occupancy(q: &OccupancyMeasure, cost: &CostFunction) -> Result<f64> {
    if q.dim() != cost.dim() {
        return Err(shape_err!("occupancy {:?} vs cost {:?}", q.dim(), cost.dim()));
    }
    Ok(q.values().iter().zip(cost.values().iter()).map(|(x, c)| x * c).sum())
}

/// Best fixed policy for the summed costs and its total cost.
pub fn best_in_hindsight(mdp: &Mdp, costs: &[CostFunction]) -> Result<(Policy, f64)> {
    let first = costs
        .first()
        .ok_or_else(|| arg_err!("best_in_hindsight needs at least one cost function"))?;
    let mut total = first.values().clone();
    for c in &costs[1..] {
        if c.dim() != first.dim() {
            return Err(shape_err!("cost sequence has mixed shapes"));
        }
        total += c.values();
    }
    let (pi, vf) = optimal_raw(mdp, &total)?;
    Ok((pi, vf.initial_value(mdp.initial_state())))
}

impl From<OccupancyMeasure> for Array3<f64> {
    fn from(q: OccupancyMeasure) -> Self {
        q.q
    }
}

impl TryFrom<Array3<f64>> for CostFunction {
    type Error = Error;
    fn try_from(values: Array3<f64>) -> Result<Self> {
        Self::new(values)
    }
}
