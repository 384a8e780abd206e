//! Visit counters, empirical models, team reach probabilities and
//! importance-weighted cost estimators.

use ndarray::{Array2, Array3, Array4};
use rand::Rng;

use crate::env::{ObservedCosts, RandomnessMode, TeamTrajectory};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::mdp::{sample_index, Mdp, OccupancyMeasure, Policy};

/// Visit counts and cost sums shared by the team.
///
/// In fresh mode every agent visit counts; in non-fresh mode a cell counts
/// at most once per episode.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceModel {
    mode: RandomnessMode,
    n: Array3<u64>,
    n3: Array4<u64>,
    cost_sum: Array3<f64>,
}

impl ConfidenceModel {
    pub fn new(horizon: usize, num_states: usize, num_actions: usize, mode: RandomnessMode) -> Self {
        Self {
            mode,
            n: Array3::zeros((horizon, num_states, num_actions)),
            n3: Array4::zeros((horizon, num_states, num_actions, num_states)),
            cost_sum: Array3::zeros((horizon, num_states, num_actions)),
        }
    }

    /// Model with the given transition counts and cost sums; visit counts
    /// are the row sums of `n3`.
    pub fn from_counts(n3: Array4<u64>, cost_sum: Array3<f64>, mode: RandomnessMode) -> Result<Self> {
        let (hh, ss, aa, tt) = n3.dim();
        if tt != ss || cost_sum.dim() != (hh, ss, aa) {
            return Err(shape_err!("counts {:?} and cost sums {:?} disagree", n3.dim(), cost_sum.dim()));
        }
        let n = Array3::from_shape_fn((hh, ss, aa), |(h, s, a)| (0..ss).map(|t| n3[[h, s, a, t]]).sum::<u64>());
        for (i, &c) in cost_sum.indexed_iter() {
            if !(0.0..=n[i] as f64).contains(&c) {
                return Err(arg_err!("cost sum {c} at {i:?} outside [0, {}]", n[i]));
            }
        }
        Ok(Self { mode, n, n3, cost_sum })
    }

    pub fn mode(&self) -> RandomnessMode {
        self.mode
    }

    /// `(H, S, A)`.
    pub fn dim(&self) -> (usize, usize, usize) {
        self.n.dim()
    }

    pub fn counts(&self) -> &Array3<u64> {
        &self.n
    }

    pub fn transition_counts(&self) -> &Array4<u64> {
        &self.n3
    }

    pub fn cost_sums(&self) -> &Array3<f64> {
        &self.cost_sum
    }

    pub fn count(&self, h: usize, s: usize, a: usize) -> u64 {
        self.n[[h, s, a]]
    }

    /// `max(n, 1)` as a float.
    pub fn count_or_one(&self, h: usize, s: usize, a: usize) -> f64 {
        self.n[[h, s, a]].max(1) as f64
    }

    pub fn update_counts(&mut self, traj: &TeamTrajectory) -> Result<()> {
        if traj.mode != self.mode {
            return Err(Error::Usage(format!(
                "{} trajectory fed to a {} model",
                traj.mode, self.mode
            )));
        }
        let (hh, ss, aa) = self.dim();
        if traj.horizon() != hh {
            return Err(shape_err!("trajectory horizon {} vs {hh}", traj.horizon()));
        }
        for v in 0..traj.num_agents() {
            if traj.states[v].len() != hh + 1
                || traj.costs[v].len() != hh
                || traj.states[v].iter().any(|&s| s >= ss)
                || traj.actions[v].iter().any(|&a| a >= aa)
            {
                return Err(shape_err!("agent {v} trajectory does not fit ({hh}, {ss}, {aa})"));
            }
        }
        match self.mode {
            RandomnessMode::Fresh => {
                for v in 0..traj.num_agents() {
                    for h in 0..hh {
                        let (s, a, s2) = (traj.states[v][h], traj.actions[v][h], traj.states[v][h + 1]);
                        self.n[[h, s, a]] += 1;
                        self.n3[[h, s, a, s2]] += 1;
                        self.cost_sum[[h, s, a]] += traj.costs[v][h];
                    }
                }
            }
            RandomnessMode::NonFresh => {
                let mut seen = Array3::from_elem((hh, ss, aa), false);
                for v in 0..traj.num_agents() {
                    for h in 0..hh {
                        let (s, a, s2) = (traj.states[v][h], traj.actions[v][h], traj.states[v][h + 1]);
                        if !seen[[h, s, a]] {
                            seen[[h, s, a]] = true;
                            self.n[[h, s, a]] += 1;
                            self.n3[[h, s, a, s2]] += 1;
                            self.cost_sum[[h, s, a]] += traj.costs[v][h];
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Empirical kernel `n3 / max(n, 1)`; rows of unvisited cells are zero.
    pub fn p_hat(&self) -> Array4<f64> {
        let mut p = self.n3.mapv(|x| x as f64);
        for ((h, s, a), &n) in self.n.indexed_iter() {
            let d = n.max(1) as f64;
            p.slice_mut(ndarray::s![h, s, a, ..]).mapv_inplace(|x| x / d);
        }
        p
    }

    /// Empirical mean cost `cost_sum / max(n, 1)`.
    pub fn c_hat(&self) -> Array3<f64> {
        let mut c = self.cost_sum.clone();
        c.zip_mut_with(&self.n, |x, &n| *x /= n.max(1) as f64);
        c
    }
}

/// Probability that at least one agent visits each `(h, s, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReachTable {
    w: Array3<f64>,
}

impl ReachTable {
    pub fn new(w: Array3<f64>) -> Result<Self> {
        if let Some(x) = w.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::NumericDomain(format!("reach probability {x} outside [0, 1]")));
        }
        Ok(Self { w })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.w
    }

    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.w[[h, s, a]]
    }
}

/// `1 - (1 - x)^m`, accurate for small `x`.
pub fn team_reach(x: f64, m: usize) -> f64 {
    if x >= 1.0 {
        return 1.0;
    }
    if m == 1 {
        return x;
    }
    -((m as f64) * (-x).ln_1p()).exp_m1()
}

/// Team reach probabilities with independent agents: `1 - (1 - q)^m`.
pub fn reach_probability_fresh(q: &OccupancyMeasure, m: usize) -> Result<ReachTable> {
    if m == 0 {
        return Err(arg_err!("m must be at least 1"));
    }
    Ok(ReachTable {
        w: q.values().mapv(|x| team_reach(x.clamp(0.0, 1.0), m)),
    })
}

/// Monte-Carlo sample count `10 / gamma^2 * ln(K H S A m / delta)` before
/// rounding up.
pub fn mc_sample_count(gamma: f64, delta: f64, episodes: usize, dims: (usize, usize, usize), m: usize) -> f64 {
    let (h, s, a) = dims;
    10.0 / (gamma * gamma) * ((episodes * h * s * a * m) as f64 / delta).ln()
}

/// Estimates non-fresh team reach probabilities from `samples` simulated
/// episodes, each with its own realization table. All agents run to the
/// horizon and every cell is read off the same batch.
pub fn estimate_reach_nonfresh<R: Rng + ?Sized>(
    mdp: &Mdp,
    policy: &Policy,
    m: usize,
    samples: usize,
    rng: &mut R,
) -> Result<ReachTable> {
    if m == 0 {
        return Err(arg_err!("m must be at least 1"));
    }
    if samples == 0 {
        return Err(arg_err!("Monte-Carlo sample count must be at least 1"));
    }
    mdp.check_policy(policy)?;
    let (hh, ss, aa) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut hits = Array3::<u64>::zeros((hh, ss, aa));
    // Realization cells are drawn on first visit; `stamp` marks the cells
    // visited in the current sample.
    let mut next = Array3::<usize>::zeros((hh, ss, aa));
    let mut stamp = Array3::<usize>::zeros((hh, ss, aa));
    let mut states = vec![0usize; m];
    for t in 1..=samples {
        states.fill(mdp.initial_state());
        for h in 0..hh {
            for s in states.iter_mut() {
                let a = policy.sample(h, *s, rng);
                let cell = [h, *s, a];
                if stamp[cell] != t {
                    stamp[cell] = t;
                    hits[cell] += 1;
                    next[cell] = sample_index(mdp.transition(h, *s, a), rng);
                }
                *s = next[cell];
            }
        }
    }
    let n = samples as f64;
    Ok(ReachTable {
        w: hits.mapv(|x| x as f64 / n),
    })
}

/// Importance-weighted cost estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct CostEstimate {
    c_hat: Array3<f64>,
}

impl CostEstimate {
    pub fn zeros(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            c_hat: Array3::zeros((horizon, num_states, num_actions)),
        }
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.c_hat
    }

    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.c_hat[[h, s, a]]
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.c_hat.dim()
    }
}

impl From<Array3<f64>> for CostEstimate {
    fn from(c_hat: Array3<f64>) -> Self {
        Self { c_hat }
    }
}

/// `c * 1{visited} / (W + gamma)` per cell.
pub fn is_estimator_team(observed: &ObservedCosts, reach: &ReachTable, gamma: f64) -> Result<CostEstimate> {
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(arg_err!("gamma must be positive, got {gamma}"));
    }
    if observed.cost.dim() != reach.w.dim() || observed.visited.dim() != reach.w.dim() {
        return Err(shape_err!(
            "observed costs {:?} vs reach table {:?}",
            observed.cost.dim(),
            reach.w.dim()
        ));
    }
    let mut c_hat = Array3::zeros(reach.w.dim());
    for (idx, out) in c_hat.indexed_iter_mut() {
        if observed.visited[idx] {
            *out = observed.cost[idx] / (reach.w[idx] + gamma);
        }
    }
    Ok(CostEstimate { c_hat })
}

/// Estimator driven by assigned agents. `assignment[[h, a]]` is the agent
/// that takes action `a` at layer `h` this episode; the estimate at
/// `(h, s, a)` is its observed cost divided by `u[[h, s]] + gamma` if it was
/// at `s`, and zero otherwise.
pub fn is_estimator_assigned(
    traj: &TeamTrajectory,
    assignment: &Array2<usize>,
    u: &Array2<f64>,
    num_states: usize,
    gamma: f64,
) -> Result<CostEstimate> {
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(arg_err!("gamma must be positive, got {gamma}"));
    }
    let hh = traj.horizon();
    let aa = assignment.ncols();
    if assignment.nrows() != hh {
        return Err(Error::Usage(format!(
            "assignment covers {} layers, trajectory has {hh}",
            assignment.nrows()
        )));
    }
    if u.dim() != (hh, num_states) {
        return Err(shape_err!("upper occupancy shape {:?}, expected ({hh}, {num_states})", u.dim()));
    }
    let mut c_hat = Array3::zeros((hh, num_states, aa));
    for ((h, a), &v) in assignment.indexed_iter() {
        if v >= traj.num_agents() {
            return Err(Error::Usage(format!("(h={h}, a={a}) assigned to missing agent {v}")));
        }
        if traj.actions[v][h] != a {
            return Err(Error::Usage(format!(
                "agent {v} was assigned action {a} at layer {h} but took {}",
                traj.actions[v][h]
            )));
        }
        let s = traj.states[v][h];
        c_hat[[h, s, a]] = traj.costs[v][h] / (u[[h, s]] + gamma);
    }
    Ok(CostEstimate { c_hat })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn co_located(mode: RandomnessMode, m: usize) -> TeamTrajectory {
        TeamTrajectory {
            mode,
            states: vec![vec![0, 1, 0]; m],
            actions: vec![vec![1, 0]; m],
            costs: vec![vec![0.25, 0.5]; m],
        }
    }

    #[test]
    fn fresh_counts_every_agent() {
        let mut model = ConfidenceModel::new(2, 2, 2, RandomnessMode::Fresh);
        model.update_counts(&co_located(RandomnessMode::Fresh, 3)).unwrap();
        assert_eq!(model.count(0, 0, 1), 3);
        assert_eq!(model.count(1, 1, 0), 3);
        assert_eq!(model.c_hat()[[0, 0, 1]], 0.25);
        assert_eq!(model.p_hat()[[1, 1, 0, 0]], 1.0);
    }

    #[test]
    fn nonfresh_counts_once() {
        let mut model = ConfidenceModel::new(2, 2, 2, RandomnessMode::NonFresh);
        model.update_counts(&co_located(RandomnessMode::NonFresh, 3)).unwrap();
        assert_eq!(model.count(0, 0, 1), 1);
        assert_eq!(model.cost_sums()[[1, 1, 0]], 0.5);
        assert_eq!(model.counts().sum(), 2);
    }

    #[test]
    fn mode_mismatch_is_usage_error() {
        let mut model = ConfidenceModel::new(2, 2, 2, RandomnessMode::NonFresh);
        assert!(matches!(
            model.update_counts(&co_located(RandomnessMode::Fresh, 1)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn unvisited_rows_are_zero() {
        let model = ConfidenceModel::new(2, 3, 2, RandomnessMode::Fresh);
        assert!(model.p_hat().iter().all(|&x| x == 0.0));
        assert!(model.c_hat().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn team_reach_closed_form() {
        assert_eq!(team_reach(0.5, 2), 0.75);
        assert!((team_reach(0.3, 1) - 0.3).abs() < 1e-15);
        assert_eq!(team_reach(1.0, 5), 1.0);
        assert_eq!(team_reach(0.0, 5), 0.0);
        assert!((team_reach(1e-12, 3) / 3e-12 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn gamma_must_be_positive() {
        let obs = ObservedCosts {
            visited: Array3::from_elem((1, 1, 1), true),
            cost: Array3::ones((1, 1, 1)),
        };
        let w = ReachTable::new(Array3::ones((1, 1, 1))).unwrap();
        assert!(is_estimator_team(&obs, &w, 0.0).is_err());
        let c = is_estimator_team(&obs, &w, 1e-12).unwrap();
        assert!((c.get(0, 0, 0) - 1.0).abs() < 1e-11);
    }

    #[test]
    fn assigned_estimator_reads_assigned_agent() {
        let traj = TeamTrajectory {
            mode: RandomnessMode::Fresh,
            states: vec![vec![0, 1, 1], vec![0, 0, 1]],
            actions: vec![vec![0, 1], vec![1, 0]],
            costs: vec![vec![0.5, 0.25], vec![1.0, 0.75]],
        };
        let assignment = ndarray::array![[0, 1], [1, 0]];
        let u = Array2::ones((2, 2));
        let c = is_estimator_assigned(&traj, &assignment, &u, 2, 1e-12).unwrap();
        assert!((c.get(0, 0, 0) - 0.5).abs() < 1e-9);
        assert!((c.get(0, 0, 1) - 1.0).abs() < 1e-9);
        assert!((c.get(1, 0, 0) - 0.75).abs() < 1e-9);
        assert!((c.get(1, 1, 1) - 0.25).abs() < 1e-9);
        assert_eq!(c.get(1, 1, 0), 0.0);
        assert_eq!(c.get(1, 0, 1), 0.0);
        let short = ndarray::array![[0, 1]];
        assert!(matches!(is_estimator_assigned(&traj, &short, &u, 2, 0.1), Err(Error::Usage(_))));
    }
}
