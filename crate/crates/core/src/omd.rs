//! Relative-entropy projections onto occupancy polytopes, transition
//! confidence sets and upper occupancy bounds.

use log::warn;
use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array2, Array3, Array4, ArrayView1};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::estimators::{ConfidenceModel, CostEstimate};
use crate::mdp::{occupancy_of, Mdp, MdpShape, OccupancyMeasure, Policy};

/// Occupancy over `(h, s, a, s')` triples.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedOccupancy {
    q3: Array4<f64>,
}

impl ExtendedOccupancy {
    pub fn new(q3: Array4<f64>) -> Result<Self> {
        let (_, s, _, s2) = q3.dim();
        if s != s2 {
            return Err(shape_err!("extended occupancy must be (H, S, A, S), got {:?}", q3.dim()));
        }
        if q3.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::NumericDomain("extended occupancy entries must be finite and nonnegative".into()));
        }
        Ok(Self { q3 })
    }

    /// Constant `1 / (S^2 A)` on every triple.
    pub fn uniform(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        let v = 1.0 / (num_states * num_states * num_actions) as f64;
        Self {
            q3: Array4::from_elem((horizon, num_states, num_actions, num_states), v),
        }
    }

    /// Extended occupancy of `policy` under the kernel `p`.
    pub fn of_policy(policy: &Policy, mdp: &Mdp) -> Result<Self> {
        let q = occupancy_of(policy, mdp)?;
        let mut q3 = mdp.transitions().clone();
        for ((h, s, a), &x) in q.values().indexed_iter() {
            q3.slice_mut(s![h, s, a, ..]).mapv_inplace(|p| p * x);
        }
        Ok(Self { q3 })
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.q3
    }

    /// `(H, S, A)`.
    pub fn dim(&self) -> (usize, usize, usize) {
        let (h, s, a, _) = self.q3.dim();
        (h, s, a)
    }

    /// Marginal `q_h(s, a)`.
    pub fn marginal(&self) -> Array3<f64> {
        self.q3.sum_axis(ndarray::Axis(3))
    }

    /// Marginal `q_h(s)`.
    pub fn state_marginal(&self) -> Array2<f64> {
        self.marginal().sum_axis(ndarray::Axis(2))
    }

    /// Largest violation of layer normalization, flow conservation and
    /// nonnegativity.
    pub fn max_violation(&self) -> f64 {
        let (hh, ss, _) = self.dim();
        let sm = self.state_marginal();
        let inflow = self.q3.sum_axis(ndarray::Axis(2)).sum_axis(ndarray::Axis(1));
        let mut worst: f64 = 0.0;
        for h in 0..hh {
            worst = worst.max((sm.row(h).sum() - 1.0).abs());
            if h + 1 < hh {
                for s in 0..ss {
                    worst = worst.max((sm[[h + 1, s]] - inflow[[h, s]]).abs());
                }
            }
        }
        let neg = self.q3.iter().fold(0.0f64, |m, &x| m.max(-x));
        worst.max(neg)
    }

    /// Mass placed on layer-0 states other than `initial_state`.
    pub fn initial_leak(&self, initial_state: usize) -> f64 {
        let sm = self.state_marginal();
        sm.row(0)
            .iter()
            .enumerate()
            .filter(|(s, _)| *s != initial_state)
            .map(|(_, x)| x.abs())
            .sum()
    }
}

/// Box of transition kernels around an empirical estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionConfidenceSet {
    p_hat: Array4<f64>,
    eps: Array4<f64>,
}

impl TransitionConfidenceSet {
    pub fn new(p_hat: Array4<f64>, eps: Array4<f64>) -> Result<Self> {
        if p_hat.dim() != eps.dim() {
            return Err(shape_err!("p_hat {:?} vs widths {:?}", p_hat.dim(), eps.dim()));
        }
        let (_, s, _, s2) = p_hat.dim();
        if s != s2 {
            return Err(shape_err!("kernel must be (H, S, A, S), got {:?}", p_hat.dim()));
        }
        if eps.iter().any(|x| x.is_nan() || *x < 0.0) {
            return Err(arg_err!("confidence widths must be nonnegative"));
        }
        if p_hat.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(arg_err!("p_hat entries must lie in [0, 1]"));
        }
        Ok(Self { p_hat, eps })
    }

    pub fn p_hat(&self) -> &Array4<f64> {
        &self.p_hat
    }

    pub fn widths(&self) -> &Array4<f64> {
        &self.eps
    }

    /// `(H, S, A)`.
    pub fn dim(&self) -> (usize, usize, usize) {
        let (h, s, a, _) = self.p_hat.dim();
        (h, s, a)
    }

    /// `max(p_hat - eps, 0)` for one cell.
    pub fn lower(&self, h: usize, s: usize, a: usize) -> Vec<f64> {
        let p = self.p_hat.slice(s![h, s, a, ..]);
        let e = self.eps.slice(s![h, s, a, ..]);
        p.iter().zip(e.iter()).map(|(p, e)| (p - e).max(0.0)).collect()
    }

    /// `min(p_hat + eps, 1)` for one cell.
    pub fn upper(&self, h: usize, s: usize, a: usize) -> Vec<f64> {
        let p = self.p_hat.slice(s![h, s, a, ..]);
        let e = self.eps.slice(s![h, s, a, ..]);
        p.iter().zip(e.iter()).map(|(p, e)| (p + e).min(1.0)).collect()
    }

    /// Whether `p` lies in the box.
    pub fn contains(&self, p: &Array4<f64>, tol: f64) -> bool {
        p.dim() == self.p_hat.dim()
            && ndarray::Zip::from(p)
                .and(&self.p_hat)
                .and(&self.eps)
                .all(|&x, &c, &e| (x - c).abs() <= e + tol)
    }

    /// Errors if some cell admits no distribution.
    pub fn check_feasible(&self) -> Result<()> {
        let (hh, ss, aa) = self.dim();
        for h in 0..hh {
            for s in 0..ss {
                for a in 0..aa {
                    let lo: f64 = self.lower(h, s, a).iter().sum();
                    let hi: f64 = self.upper(h, s, a).iter().sum();
                    if lo > 1.0 + 1e-12 || hi < 1.0 - 1e-12 {
                        return Err(Error::Infeasible(format!(
                            "confidence box at (h={h}, s={s}, a={a}) has lower mass {lo} and upper mass {hi}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Log term `ln(H S A K / (4 delta))` of the confidence widths, floored at 0.
pub fn confidence_log_term(dims: (usize, usize, usize), episodes: usize, delta: f64) -> f64 {
    let (h, s, a) = dims;
    ((h * s * a * episodes) as f64 / (4.0 * delta)).ln().max(0.0)
}

/// Widths `4 sqrt(p_hat L / max(n,1)) + 10 L / max(n,1)` with
/// `L = ln(H S A K / (4 delta))`.
pub fn confidence_set(model: &ConfidenceModel, delta: f64, episodes: usize) -> Result<TransitionConfidenceSet> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(arg_err!("delta must lie in (0, 1), got {delta}"));
    }
    if episodes == 0 {
        return Err(arg_err!("K must be at least 1"));
    }
    let dims = model.dim();
    let l = confidence_log_term(dims, episodes, delta);
    let p_hat = model.p_hat();
    let mut eps = p_hat.clone();
    for ((h, s, a, _), e) in eps.indexed_iter_mut() {
        let n = model.count_or_one(h, s, a);
        *e = 4.0 * (*e * l / n).sqrt() + 10.0 * l / n;
    }
    TransitionConfidenceSet::new(p_hat, eps)
}

/// `eta <q, c> + KL(q || q_prev)` with the unnormalized relative entropy.
pub fn kl_objective<I>(pairs: I, eta: f64) -> f64
where
    I: IntoIterator<Item = (f64, f64, f64)>,
{
    pairs
        .into_iter()
        .map(|(q, prev, c)| {
            let kl = if q > 0.0 { q * (q / prev).ln() - q + prev } else { prev };
            eta * q * c + kl
        })
        .sum()
}

fn check_eta(eta: f64) -> Result<()> {
    if eta.is_nan() || eta <= 0.0 {
        return Err(arg_err!("eta must be positive, got {eta}"));
    }
    Ok(())
}

const NEWTON_TOL: f64 = 1e-13;
const NEWTON_MAX_ITER: usize = 200;

/// Exact relative-entropy projection onto the occupancy polytope of a known
/// kernel: `argmin_q eta <q, c_hat> + KL(q || q_prev)`.
///
/// The dual over one potential per `(h, s)` is minimized by damped Newton;
/// the primal is read off the optimal potentials and finally re-derived from
/// its policy so that flow holds to rounding.
pub fn kl_project_known_p(
    q_prev: &OccupancyMeasure,
    c_hat: &CostEstimate,
    eta: f64,
    mdp: &Mdp,
) -> Result<OccupancyMeasure> {
    check_eta(eta)?;
    let dims = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    if q_prev.dim() != dims || c_hat.dim() != dims {
        return Err(shape_err!(
            "q_prev {:?}, c_hat {:?}, expected {dims:?}",
            q_prev.dim(),
            c_hat.dim()
        ));
    }
    if c_hat.values().iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericDomain("cost estimate must be finite".into()));
    }
    let reach = occupancy_of(&Policy::uniform(dims.0, dims.1, dims.2), mdp)?;
    for (idx, &r) in reach.values().indexed_iter() {
        if r > 0.0 && !(q_prev.values()[idx] > 0.0) {
            return Err(Error::NumericDomain(format!(
                "q_prev vanishes on reachable cell {idx:?}"
            )));
        }
    }
    let solver = DualNewton::new(mdp, q_prev.values(), c_hat.values(), eta);
    let q = solver.solve();
    let pi = policy_from_marginal(&q);
    occupancy_of(&pi, mdp)
}

struct DualNewton<'a> {
    mdp: &'a Mdp,
    // Log prior `ln q_prev - eta c` per active cell; `None` where q_prev = 0.
    base: Array3<Option<f64>>,
    dims: (usize, usize, usize),
}

impl<'a> DualNewton<'a> {
    fn new(mdp: &'a Mdp, q_prev: &Array3<f64>, c: &Array3<f64>, eta: f64) -> Self {
        let mut base = Array3::from_elem(q_prev.dim(), None);
        for (idx, b) in base.indexed_iter_mut() {
            let (h, s, a) = idx;
            if q_prev[[h, s, a]] > 0.0 {
                *b = Some(q_prev[[h, s, a]].ln() - eta * c[[h, s, a]]);
            }
        }
        Self {
            mdp,
            base,
            dims: q_prev.dim(),
        }
    }

    fn idx(&self, h: usize, s: usize) -> usize {
        h * self.dims.1 + s
    }

    fn primal(&self, v: &DVector<f64>) -> Array3<f64> {
        let (hh, ss, aa) = self.dims;
        let mut q = Array3::zeros(self.dims);
        for h in 0..hh {
            for s in 0..ss {
                for a in 0..aa {
                    if let Some(b) = self.base[[h, s, a]] {
                        let mut e = b + v[self.idx(h, s)];
                        if h + 1 < hh {
                            let p = self.mdp.transition(h, s, a);
                            e -= (0..ss).map(|s2| p[s2] * v[self.idx(h + 1, s2)]).sum::<f64>();
                        }
                        q[[h, s, a]] = e.exp();
                    }
                }
            }
        }
        q
    }

    fn objective(&self, q: &Array3<f64>, v: &DVector<f64>) -> f64 {
        q.sum() - v[self.idx(0, self.mdp.initial_state())]
    }

    fn gradient(&self, q: &Array3<f64>) -> DVector<f64> {
        let (hh, ss, aa) = self.dims;
        let mut g = DVector::zeros(hh * ss);
        g[self.idx(0, self.mdp.initial_state())] -= 1.0;
        for h in 0..hh {
            for s in 0..ss {
                for a in 0..aa {
                    let x = q[[h, s, a]];
                    if x == 0.0 {
                        continue;
                    }
                    g[self.idx(h, s)] += x;
                    if h + 1 < hh {
                        let p = self.mdp.transition(h, s, a);
                        for s2 in 0..ss {
                            g[self.idx(h + 1, s2)] -= x * p[s2];
                        }
                    }
                }
            }
        }
        g
    }

    fn hessian(&self, q: &Array3<f64>) -> DMatrix<f64> {
        let (hh, ss, aa) = self.dims;
        let n = hh * ss;
        let mut m = DMatrix::zeros(n, n);
        for h in 0..hh {
            for s in 0..ss {
                for a in 0..aa {
                    let x = q[[h, s, a]];
                    if x == 0.0 {
                        continue;
                    }
                    let i = self.idx(h, s);
                    m[(i, i)] += x;
                    if h + 1 < hh {
                        let p = self.mdp.transition(h, s, a);
                        for s2 in (0..ss).filter(|&t| p[t] > 0.0) {
                            let j = self.idx(h + 1, s2);
                            m[(i, j)] -= x * p[s2];
                            m[(j, i)] -= x * p[s2];
                            for s3 in (0..ss).filter(|&t| p[t] > 0.0) {
                                m[(j, self.idx(h + 1, s3))] += x * p[s2] * p[s3];
                            }
                        }
                    }
                }
            }
        }
        for i in 0..n {
            if m[(i, i)] <= 0.0 {
                m[(i, i)] = 1.0;
            }
        }
        m
    }

    fn solve(&self) -> Array3<f64> {
        let n = self.dims.0 * self.dims.1;
        let mut v = DVector::zeros(n);
        let mut q = self.primal(&v);
        let mut phi = self.objective(&q, &v);
        for _ in 0..NEWTON_MAX_ITER {
            let g = self.gradient(&q);
            if g.amax() <= NEWTON_TOL {
                break;
            }
            let hess = self.hessian(&q);
            let step = match hess.clone().cholesky() {
                Some(ch) => ch.solve(&g),
                None => {
                    let shifted = hess + DMatrix::identity(n, n) * 1e-10;
                    match shifted.lu().solve(&g) {
                        Some(x) => x,
                        None => g.clone(),
                    }
                }
            };
            let slope = g.dot(&step);
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-20 {
                let cand = &v - &step * t;
                let qc = self.primal(&cand);
                let pc = self.objective(&qc, &cand);
                if pc.is_finite() && pc <= phi - 1e-4 * t * slope {
                    v = cand;
                    q = qc;
                    phi = pc;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        q
    }
}

/// Policy `q_h(s, a) / q_h(s)`, uniform where `q_h(s) = 0`.
pub fn policy_from_occupancy(q: &OccupancyMeasure) -> Policy {
    policy_from_marginal(q.values())
}

/// Policy of an extended occupancy.
pub fn policy_from_extended(q: &ExtendedOccupancy) -> Policy {
    policy_from_marginal(&q.marginal())
}

fn policy_from_marginal(q: &Array3<f64>) -> Policy {
    let (hh, ss, aa) = q.dim();
    let mut probs = Array3::zeros((hh, ss, aa));
    for h in 0..hh {
        for s in 0..ss {
            let row = q.slice(s![h, s, ..]);
            let total: f64 = row.iter().map(|x| x.max(0.0)).sum();
            if total > 0.0 {
                for a in 0..aa {
                    probs[[h, s, a]] = row[a].max(0.0) / total;
                }
            } else {
                probs.slice_mut(s![h, s, ..]).fill(1.0 / aa as f64);
            }
        }
    }
    Policy::from_probs_unchecked(probs)
}

/// Result of a confidence-set projection.
#[derive(Clone, Debug)]
pub struct ConfidenceProjection {
    pub q: ExtendedOccupancy,
    /// Largest primal violation or complementary-slackness gap at exit.
    pub kkt_residual: f64,
    pub sweeps: usize,
    pub converged: bool,
}

pub const PROJECTION_FEAS_TOL: f64 = 1e-8;
pub const PROJECTION_REL_TOL: f64 = 1e-10;
pub const PROJECTION_MAX_SWEEPS: usize = 100_000;

#[derive(Clone, Copy)]
enum BoxSide {
    Upper,
    Lower,
}

struct BoxRow {
    h: usize,
    s: usize,
    a: usize,
    target: usize,
    bound: f64,
    side: BoxSide,
}

/// Relative-entropy projection onto the occupancy polytope of all kernels
/// in the confidence box: `argmin eta <q, c_hat> + KL(q || q_prev)`.
///
/// Solved by cyclic Bregman projections: closed-form multiplicative updates
/// for layer flow and normalization, and Hildreth-corrected updates for the
/// box rows `L * sum(q3(h,s,a,.)) <= q3(h,s,a,s') <= U * sum(q3(h,s,a,.))`.
pub fn kl_project_confidence(
    q_prev: &ExtendedOccupancy,
    c_hat: &CostEstimate,
    eta: f64,
    cset: &TransitionConfidenceSet,
    shape: &MdpShape,
) -> Result<ConfidenceProjection> {
    check_eta(eta)?;
    let dims = shape.sah();
    if q_prev.dim() != dims || c_hat.dim() != dims || cset.dim() != dims {
        return Err(shape_err!(
            "q_prev {:?}, c_hat {:?}, confidence set {:?}, expected {dims:?}",
            q_prev.dim(),
            c_hat.dim(),
            cset.dim()
        ));
    }
    if c_hat.values().iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericDomain("cost estimate must be finite".into()));
    }
    cset.check_feasible()?;
    let (hh, ss, aa) = dims;
    let s0 = shape.initial_state;

    let mut q = q_prev.q3.clone();
    for ((h, s, a, _), x) in q.indexed_iter_mut() {
        *x *= (-eta * c_hat.get(h, s, a)).exp();
    }
    q.slice_mut(s![0, .., .., ..])
        .indexed_iter_mut()
        .filter(|((s, _, _), _)| *s != s0)
        .for_each(|(_, x)| *x = 0.0);

    let mut rows = Vec::new();
    for h in 0..hh {
        for s in 0..ss {
            for a in 0..aa {
                let lo = cset.lower(h, s, a);
                let hi = cset.upper(h, s, a);
                let lo_sum: f64 = lo.iter().sum();
                for t in 0..ss {
                    let cap = hi[t].min(1.0 - (lo_sum - lo[t]));
                    if cap <= 0.0 {
                        q[[h, s, a, t]] = 0.0;
                        continue;
                    }
                    if cap < 1.0 {
                        rows.push(BoxRow { h, s, a, target: t, bound: cap, side: BoxSide::Upper });
                    }
                    if lo[t] > 0.0 {
                        rows.push(BoxRow { h, s, a, target: t, bound: lo[t], side: BoxSide::Lower });
                    }
                }
            }
        }
    }
    let mut z = vec![0.0f64; rows.len()];

    let objective = |q: &Array4<f64>| -> f64 {
        let orig = &q_prev.q3;
        let mut total = 0.0;
        for ((h, s, a, t), &x) in q.indexed_iter() {
            total += kl_objective([(x, orig[[h, s, a, t]], c_hat.get(h, s, a))], eta);
        }
        total
    };

    let mut prev_obj = objective(&q);
    let mut sweeps = 0;
    let mut converged = false;
    let mut residual = f64::INFINITY;
    while sweeps < PROJECTION_MAX_SWEEPS {
        sweeps += 1;
        // Layer-0 normalization.
        let mass: f64 = q.slice(s![0, s0, .., ..]).sum();
        if mass <= 0.0 {
            return Err(Error::Infeasible("no feasible mass leaves the initial state".into()));
        }
        q.slice_mut(s![0, s0, .., ..]).mapv_inplace(|x| x / mass);
        // Flow between consecutive layers.
        for h in 0..hh.saturating_sub(1) {
            for t in 0..ss {
                let inflow: f64 = q.slice(s![h, .., .., t]).sum();
                let outflow: f64 = q.slice(s![h + 1, t, .., ..]).sum();
                if inflow == outflow {
                    continue;
                }
                if inflow <= 0.0 || outflow <= 0.0 {
                    q.slice_mut(s![h, .., .., t]).fill(0.0);
                    q.slice_mut(s![h + 1, t, .., ..]).fill(0.0);
                    continue;
                }
                let f = (outflow / inflow).sqrt();
                q.slice_mut(s![h, .., .., t]).mapv_inplace(|x| x * f);
                q.slice_mut(s![h + 1, t, .., ..]).mapv_inplace(|x| x / f);
            }
        }
        // Box rows.
        for (row, zi) in rows.iter().zip(z.iter_mut()) {
            let mut cell = q.slice_mut(s![row.h, row.s, row.a, ..]);
            let x = cell[row.target];
            let y = cell.sum() - x;
            let b = row.bound;
            let theta = match row.side {
                BoxSide::Upper => {
                    if y <= 0.0 {
                        if x > 0.0 {
                            cell.fill(0.0);
                        }
                        continue;
                    }
                    if x <= 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        ((1.0 - b) * x / (b * y)).ln()
                    }
                }
                BoxSide::Lower => {
                    if x <= 0.0 {
                        if y > 0.0 {
                            cell.fill(0.0);
                        }
                        continue;
                    }
                    if y <= 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        (b * y / ((1.0 - b) * x)).ln()
                    }
                }
            };
            let delta = theta.max(-*zi);
            if delta == 0.0 || !delta.is_finite() {
                continue;
            }
            *zi += delta;
            // Scale by exp(-delta * alpha).
            let (own, rest) = match row.side {
                BoxSide::Upper => (-delta * (1.0 - b), delta * b),
                BoxSide::Lower => (delta * (1.0 - b), -delta * b),
            };
            let rest_f = rest.exp();
            cell.mapv_inplace(|v| v * rest_f);
            cell[row.target] = x * own.exp();
        }

        let viol = violation(&q, &rows, s0);
        let obj = objective(&q);
        let rel = (obj - prev_obj).abs() / prev_obj.abs().max(1.0);
        prev_obj = obj;
        if viol <= PROJECTION_FEAS_TOL && rel <= PROJECTION_REL_TOL {
            let slack = rows
                .iter()
                .zip(&z)
                .map(|(r, &zi)| zi * row_value(&q, r).abs())
                .fold(0.0f64, f64::max);
            residual = viol.max(slack);
            converged = true;
            break;
        }
        residual = viol;
    }
    if !converged {
        warn!("confidence projection stopped after {sweeps} sweeps with residual {residual:e}");
    }
    Ok(ConfidenceProjection {
        q: ExtendedOccupancy { q3: q },
        kkt_residual: residual,
        sweeps,
        converged,
    })
}

fn row_value(q: &Array4<f64>, r: &BoxRow) -> f64 {
    let cell = q.slice(s![r.h, r.s, r.a, ..]);
    let total = cell.sum();
    match r.side {
        BoxSide::Upper => cell[r.target] - r.bound * total,
        BoxSide::Lower => r.bound * total - cell[r.target],
    }
}

fn violation(q: &Array4<f64>, rows: &[BoxRow], s0: usize) -> f64 {
    let (hh, ss, _, _) = q.dim();
    let mut worst = (q.slice(s![0, s0, .., ..]).sum() - 1.0).abs();
    for h in 0..hh {
        worst = worst.max((q.slice(s![h, .., .., ..]).sum() - 1.0).abs());
    }
    for h in 0..hh.saturating_sub(1) {
        for t in 0..ss {
            let inflow: f64 = q.slice(s![h, .., .., t]).sum();
            let outflow: f64 = q.slice(s![h + 1, t, .., ..]).sum();
            worst = worst.max((inflow - outflow).abs());
        }
    }
    for r in rows {
        worst = worst.max(row_value(q, r));
    }
    worst
}

/// Maximizing distribution of `sum_i p_i f_i` over the box
/// `lower <= p <= upper`, `sum p = 1`: lower bounds first, then the remaining
/// mass by descending `f` (ties to the lower index).
pub fn greedy_box_argmax(lower: &[f64], upper: &[f64], f: ArrayView1<'_, f64>) -> Result<Vec<f64>> {
    let n = lower.len();
    if upper.len() != n || f.len() != n {
        return Err(shape_err!("box of length {n}, upper {}, values {}", upper.len(), f.len()));
    }
    let lo: f64 = lower.iter().sum();
    let hi: f64 = upper.iter().sum();
    if lo > 1.0 + 1e-12 || hi < 1.0 - 1e-12 {
        return Err(Error::Infeasible(format!("box has lower mass {lo} and upper mass {hi}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| f[j].total_cmp(&f[i]).then(i.cmp(&j)));
    let mut p = lower.to_vec();
    let mut rest = 1.0 - lo;
    for i in order {
        if rest <= 0.0 {
            break;
        }
        let add = (upper[i] - lower[i]).max(0.0).min(rest);
        p[i] += add;
        rest -= add;
    }
    Ok(p)
}

/// Largest probability of reaching each `(h, s)` under `policy` over all
/// kernels in the confidence box.
pub fn upper_occupancy(policy: &Policy, cset: &TransitionConfidenceSet, shape: &MdpShape) -> Result<Array2<f64>> {
    let dims = shape.sah();
    if policy.dim() != dims || cset.dim() != dims {
        return Err(shape_err!(
            "policy {:?}, confidence set {:?}, expected {dims:?}",
            policy.dim(),
            cset.dim()
        ));
    }
    let (hh, ss, aa) = dims;
    let mut bounds = Vec::with_capacity(hh * ss * aa);
    for h in 0..hh {
        for s in 0..ss {
            for a in 0..aa {
                bounds.push((cset.lower(h, s, a), cset.upper(h, s, a)));
            }
        }
    }
    let bound = |h: usize, s: usize, a: usize| &bounds[(h * ss + s) * aa + a];
    let mut u = Array2::zeros((hh, ss));
    u[[0, shape.initial_state]] = 1.0;
    let mut f = ndarray::Array1::<f64>::zeros(ss);
    let mut g = ndarray::Array1::<f64>::zeros(ss);
    for target_h in 1..hh {
        for target in 0..ss {
            f.fill(0.0);
            f[target] = 1.0;
            for h in (0..target_h).rev() {
                for s in 0..ss {
                    let mut acc = 0.0;
                    for a in 0..aa {
                        let pa = policy.prob(h, s, a);
                        if pa == 0.0 {
                            continue;
                        }
                        let (lo, hi) = bound(h, s, a);
                        let p = greedy_box_argmax(lo, hi, f.view())?;
                        acc += pa * p.iter().zip(f.iter()).map(|(x, y)| x * y).sum::<f64>();
                    }
                    g[s] = acc;
                }
                std::mem::swap(&mut f, &mut g);
            }
            u[[target_h, target]] = f[shape.initial_state].min(1.0);
        }
    }
    Ok(u)
}
