#![allow(dead_code)]

use cooprl::mdp::{Mdp, Policy};
use cooprl::omd::TransitionConfidenceSet;
use rand_chacha::ChaCha8Rng;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3, Array4};
use rand::Rng;

pub fn random_policy<R: Rng>(h: usize, s: usize, a: usize, rng: &mut R) -> Policy {
    let mut probs = Array3::from_shape_fn((h, s, a), |_| rng.gen::<f64>() + 1e-3);
    for mut row in probs.lanes_mut(ndarray::Axis(2)) {
        let z = row.sum();
        row.mapv_inplace(|x| x / z);
    }
    Policy::new(probs).unwrap()
}

/// Every `(states, actions)` path of positive probability with its
/// probability.
pub fn enumerate_paths(mdp: &Mdp, policy: &Policy) -> Vec<(Vec<usize>, Vec<usize>, f64)> {
    let hh = mdp.horizon();
    let mut out = Vec::new();
    let mut stack = vec![(vec![mdp.initial_state()], Vec::new(), 1.0)];
    while let Some((states, actions, p)) = stack.pop() {
        let h = actions.len();
        if h == hh {
            out.push((states, actions, p));
            continue;
        }
        let s = *states.last().unwrap();
        for a in 0..mdp.num_actions() {
            let pa = policy.prob(h, s, a);
            if pa == 0.0 {
                continue;
            }
            for s2 in 0..mdp.num_states() {
                let ps = mdp.transition(h, s, a)[s2];
                if ps == 0.0 {
                    continue;
                }
                let mut st = states.clone();
                st.push(s2);
                let mut ac = actions.clone();
                ac.push(a);
                stack.push((st, ac, p * pa * ps));
            }
        }
    }
    out
}

pub fn path_value(mdp: &Mdp, policy: &Policy, cost: &Array3<f64>) -> f64 {
    enumerate_paths(mdp, policy)
        .iter()
        .map(|(s, a, p)| p * (0..a.len()).map(|h| cost[[h, s[h], a[h]]]).sum::<f64>())
        .sum()
}

pub fn path_occupancy(mdp: &Mdp, policy: &Policy) -> Array3<f64> {
    let mut q = Array3::zeros((mdp.horizon(), mdp.num_states(), mdp.num_actions()));
    for (s, a, p) in enumerate_paths(mdp, policy) {
        for h in 0..a.len() {
            q[[h, s[h], a[h]]] += p;
        }
    }
    q
}

/// All deterministic policies of a tiny MDP.
pub fn all_deterministic(h: usize, s: usize, a: usize) -> Vec<Policy> {
    let cells = h * s;
    let total = a.pow(cells as u32);
    (0..total)
        .map(|mut code| {
            let mut acts = Array2::zeros((h, s));
            for i in 0..cells {
                acts[[i / s, i % s]] = code % a;
                code /= a;
            }
            Policy::deterministic(&acts, a).unwrap()
        })
        .collect()
}

/// Exact non-fresh team reach probability by enumerating every realization
/// table of the layers that can influence a visit. Given the table the agents
/// are independent, so each table contributes `1 - (1 - q_table)^m`.
pub fn exact_nonfresh_reach(mdp: &Mdp, policy: &Policy, m: usize) -> Array3<f64> {
    let (hh, ss, aa) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let cells: Vec<(usize, usize, usize)> = (0..hh.saturating_sub(1))
        .flat_map(|h| (0..ss).flat_map(move |s| (0..aa).map(move |a| (h, s, a))))
        .collect();
    let mut w = Array3::zeros((hh, ss, aa));
    let mut table = vec![0usize; cells.len()];
    loop {
        let mut prob = 1.0;
        for (i, &(h, s, a)) in cells.iter().enumerate() {
            prob *= mdp.transition(h, s, a)[table[i]];
        }
        if prob > 0.0 {
            let next = |h: usize, s: usize, a: usize| table[(h * ss + s) * aa + a];
            let mut d = vec![0.0; ss];
            d[mdp.initial_state()] = 1.0;
            for h in 0..hh {
                let mut nd = vec![0.0; ss];
                for s in 0..ss {
                    for a in 0..aa {
                        let q = d[s] * policy.prob(h, s, a);
                        w[[h, s, a]] += prob * (1.0 - (1.0 - q).powi(m as i32));
                        if h + 1 < hh {
                            nd[next(h, s, a)] += q;
                        }
                    }
                }
                d = nd;
            }
        }
        let mut i = 0;
        loop {
            if i == cells.len() {
                return w;
            }
            table[i] += 1;
            if table[i] < ss {
                break;
            }
            table[i] = 0;
            i += 1;
        }
    }
}

/// Minimizes `sum_i x_i ln(x_i / r_i) - x_i` subject to `A x = A x0` and
/// `G x <= 0` with a log-barrier interior-point method started from the
/// strictly feasible `x0`. Dense, for tiny problems only.
pub fn entropic_oracle(r: &[f64], a: &DMatrix<f64>, g: &[DVector<f64>], x0: &[f64]) -> Vec<f64> {
    let n = r.len();
    let p = a.nrows();
    let mut x = DVector::from_column_slice(x0);
    let mut t = 1.0;
    loop {
        for _ in 0..500 {
            let mut grad = DVector::zeros(n);
            let mut hess = DMatrix::zeros(n, n);
            for i in 0..n {
                grad[i] = t * (x[i] / r[i]).ln();
                hess[(i, i)] = t / x[i];
            }
            for gi in g {
                let s = -gi.dot(&x);
                grad += gi / s;
                hess += gi * gi.transpose() / (s * s);
            }
            let mut kkt = DMatrix::zeros(n + p, n + p);
            kkt.view_mut((0, 0), (n, n)).copy_from(&hess);
            kkt.view_mut((n, 0), (p, n)).copy_from(a);
            kkt.view_mut((0, n), (n, p)).copy_from(&a.transpose());
            let mut rhs = DVector::zeros(n + p);
            rhs.rows_mut(0, n).copy_from(&(-&grad));
            let sol = kkt.lu().solve(&rhs).expect("singular KKT system");
            let dx = sol.rows(0, n).into_owned();
            let dec = -grad.dot(&dx);
            if dec / 2.0 <= 1e-15 {
                break;
            }
            let phi = |y: &DVector<f64>| -> f64 {
                if y.iter().any(|v| *v <= 0.0) {
                    return f64::INFINITY;
                }
                let mut v = 0.0;
                for i in 0..n {
                    v += t * (y[i] * (y[i] / r[i]).ln() - y[i]);
                }
                for gi in g {
                    let s = -gi.dot(y);
                    if s <= 0.0 {
                        return f64::INFINITY;
                    }
                    v -= s.ln();
                }
                v
            };
            let base = phi(&x);
            let mut step = 1.0;
            loop {
                let cand = &x + &dx * step;
                if phi(&cand) <= base - 0.25 * step * dec {
                    x = cand;
                    break;
                }
                step *= 0.5;
                if step < 1e-16 {
                    break;
                }
            }
            if step < 1e-16 {
                break;
            }
        }
        if g.is_empty() || (g.len() as f64) / t < 1e-12 {
            break;
        }
        t *= 8.0;
    }
    x.iter().copied().collect()
}

/// Oracle for the known-kernel projection.
pub fn known_p_oracle(mdp: &Mdp, q_prev: &Array3<f64>, c: &Array3<f64>, eta: f64) -> Array3<f64> {
    let (hh, ss, aa) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let vars: Vec<(usize, usize, usize)> = q_prev
        .indexed_iter()
        .filter(|(_, v)| **v > 0.0)
        .map(|(i, _)| i)
        .collect();
    let index = |h: usize, s: usize, a: usize| vars.iter().position(|&v| v == (h, s, a));
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for h in 0..hh {
        for s in 0..ss {
            let mut row = vec![0.0; vars.len()];
            for a in 0..aa {
                if let Some(i) = index(h, s, a) {
                    row[i] += 1.0;
                }
            }
            let b = if h == 0 {
                if s == mdp.initial_state() { 1.0 } else { 0.0 }
            } else {
                for s0 in 0..ss {
                    for a in 0..aa {
                        if let Some(i) = index(h - 1, s0, a) {
                            row[i] -= mdp.transition(h - 1, s0, a)[s];
                        }
                    }
                }
                0.0
            };
            if row.iter().any(|v| *v != 0.0) {
                rows.push((row, b));
            }
        }
    }
    let a_mat = DMatrix::from_fn(rows.len(), vars.len(), |i, j| rows[i].0[j]);
    let r: Vec<f64> = vars
        .iter()
        .map(|&(h, s, a)| q_prev[[h, s, a]] * (-eta * c[[h, s, a]]).exp())
        .collect();
    let x0: Vec<f64> = vars.iter().map(|&(h, s, a)| q_prev[[h, s, a]]).collect();
    let x = entropic_oracle(&r, &a_mat, &[], &x0);
    let mut q = Array3::zeros(q_prev.dim());
    for (k, &(h, s, a)) in vars.iter().enumerate() {
        q[[h, s, a]] = x[k];
    }
    q
}

/// Oracle for the confidence-box projection. `start` must be a strictly
/// positive kernel strictly inside every active box side.
#[allow(clippy::too_many_arguments)]
pub fn confidence_oracle(
    q_prev: &Array4<f64>,
    c: &Array3<f64>,
    eta: f64,
    lower: &Array4<f64>,
    upper: &Array4<f64>,
    s0: usize,
    start: &Mdp,
    start_policy: &Policy,
) -> Array4<f64> {
    let (hh, ss, aa, _) = q_prev.dim();
    let vars: Vec<(usize, usize, usize, usize)> = q_prev
        .indexed_iter()
        .filter(|((h, s, a, t), v)| **v > 0.0 && !(*h == 0 && *s != s0) && upper[[*h, *s, *a, *t]] > 0.0)
        .map(|(i, _)| i)
        .collect();
    let pos = |i: (usize, usize, usize, usize)| vars.iter().position(|&v| v == i);
    let mut eq: Vec<Vec<f64>> = Vec::new();
    let mut row = vec![0.0; vars.len()];
    for a in 0..aa {
        for t in 0..ss {
            if let Some(i) = pos((0, s0, a, t)) {
                row[i] = 1.0;
            }
        }
    }
    eq.push(row);
    for h in 0..hh - 1 {
        for t in 0..ss {
            let mut row = vec![0.0; vars.len()];
            for s in 0..ss {
                for a in 0..aa {
                    if let Some(i) = pos((h, s, a, t)) {
                        row[i] += 1.0;
                    }
                }
            }
            for a in 0..aa {
                for u in 0..ss {
                    if let Some(i) = pos((h + 1, t, a, u)) {
                        row[i] -= 1.0;
                    }
                }
            }
            if row.iter().any(|v| *v != 0.0) {
                eq.push(row);
            }
        }
    }
    let mut g = Vec::new();
    for h in 0..hh {
        for s in 0..ss {
            for a in 0..aa {
                for t in 0..ss {
                    let (lo, hi) = (lower[[h, s, a, t]], upper[[h, s, a, t]]);
                    if hi < 1.0 && hi > 0.0 {
                        let mut v = DVector::zeros(vars.len());
                        for u in 0..ss {
                            if let Some(i) = pos((h, s, a, u)) {
                                v[i] -= hi;
                            }
                        }
                        if let Some(i) = pos((h, s, a, t)) {
                            v[i] += 1.0;
                        }
                        if v.iter().any(|x| *x != 0.0) {
                            g.push(v);
                        }
                    }
                    if lo > 0.0 {
                        let mut v = DVector::zeros(vars.len());
                        for u in 0..ss {
                            if let Some(i) = pos((h, s, a, u)) {
                                v[i] += lo;
                            }
                        }
                        if let Some(i) = pos((h, s, a, t)) {
                            v[i] -= 1.0;
                        }
                        if v.iter().any(|x| *x != 0.0) {
                            g.push(v);
                        }
                    }
                }
            }
        }
    }
    let a_mat = DMatrix::from_fn(eq.len(), vars.len(), |i, j| eq[i][j]);
    let r: Vec<f64> = vars
        .iter()
        .map(|&(h, s, a, t)| q_prev[[h, s, a, t]] * (-eta * c[[h, s, a]]).exp())
        .collect();
    let q_start = cooprl::mdp::occupancy_of(start_policy, start).unwrap();
    let x0: Vec<f64> = vars
        .iter()
        .map(|&(h, s, a, t)| q_start.get(h, s, a) * start.transition(h, s, a)[t])
        .collect();
    let x = entropic_oracle(&r, &a_mat, &g, &x0);
    let mut q = Array4::zeros(q_prev.dim());
    for (k, &i) in vars.iter().enumerate() {
        q[i] = x[k];
    }
    q
}

/// Maximum of `sum p_i f_i` over the box-simplex by vertex enumeration.
pub fn box_lp_oracle(lower: &[f64], upper: &[f64], f: &[f64]) -> f64 {
    let n = lower.len();
    let mut best = f64::NEG_INFINITY;
    for free in 0..n {
        let others: Vec<usize> = (0..n).filter(|&i| i != free).collect();
        for mask in 0..(1usize << others.len()) {
            let mut p = vec![0.0; n];
            for (bit, &i) in others.iter().enumerate() {
                p[i] = if mask >> bit & 1 == 1 { upper[i] } else { lower[i] };
            }
            let rest = 1.0 - p.iter().sum::<f64>();
            if rest < lower[free] - 1e-12 || rest > upper[free] + 1e-12 {
                continue;
            }
            p[free] = rest;
            best = best.max(p.iter().zip(f).map(|(x, y)| x * y).sum());
        }
    }
    best
}

pub fn objective4(q: &Array4<f64>, prev: &Array4<f64>, c: &Array3<f64>, eta: f64) -> f64 {
    let mut total = 0.0;
    for ((h, s, a, t), &x) in q.indexed_iter() {
        let p = prev[[h, s, a, t]];
        let kl = if x > 0.0 { x * (x / p).ln() - x + p } else { p };
        total += eta * x * c[[h, s, a]] + kl;
    }
    total
}

pub fn box_around(p: &Array4<f64>, rng: &mut ChaCha8Rng, spread: f64) -> (TransitionConfidenceSet, Array4<f64>) {
    // Centre perturbed away from the true kernel; widths keep the true kernel
    // strictly inside.
    let mut centre = p.clone();
    let (h, s, a, _) = p.dim();
    for hh in 0..h {
        for ss in 0..s {
            for aa in 0..a {
                let noise: Vec<f64> = (0..s).map(|_| rng.gen::<f64>()).collect();
                let z: f64 = noise.iter().sum();
                for t in 0..s {
                    centre[[hh, ss, aa, t]] = 0.7 * p[[hh, ss, aa, t]] + 0.3 * noise[t] / z;
                }
            }
        }
    }
    let eps = Array4::from_shape_fn(p.dim(), |i| (centre[i] - p[i]).abs() + spread * rng.gen::<f64>() + 1e-3);
    (TransitionConfidenceSet::new(centre.clone(), eps).unwrap(), centre)
}

/// Endpoints of the feasible interval of `p(1)` in a two-outcome box.
pub fn two_point_endpoints(lo: &[f64], hi: &[f64]) -> [f64; 2] {
    [lo[1].max(1.0 - hi[0]), hi[1].min(1.0 - lo[0])]
}

pub fn reach_with_kernel(pi: &Policy, kernel: &Array4<f64>, h_target: usize) -> Vec<f64> {
    let (_, ss, aa, _) = kernel.dim();
    let mut d = vec![0.0; ss];
    d[0] = 1.0;
    for h in 0..h_target {
        let mut nd = vec![0.0; ss];
        for s in 0..ss {
            for a in 0..aa {
                for t in 0..ss {
                    nd[t] += d[s] * pi.prob(h, s, a) * kernel[[h, s, a, t]];
                }
            }
        }
        d = nd;
    }
    d
}

/// Maximal layer-`h` state probability over box kernels of a two-state,
/// two-action instance. Layer 1 is searched on a grid of `grid` steps per
/// cell, deeper layers over the vertices of every cell interval.
pub fn upper_occupancy_bruteforce(pi: &Policy, cs: &TransitionConfidenceSet, grid: usize) -> Array2<f64> {
    let (h, ss, aa) = cs.dim();
    assert!(ss == 2 && aa == 2, "brute force is for 2x2 instances");
    let mut out = Array2::zeros((h, 2));
    out[[0, 0]] = 1.0;
    for target_h in 1..h {
        let cells: Vec<(usize, usize, usize)> = (0..target_h)
            .flat_map(|l| (0..2).flat_map(move |s| (0..2).map(move |a| (l, s, a))))
            .collect();
        let points: Vec<Vec<f64>> = cells
            .iter()
            .map(|&(l, s, a)| {
                let [lo, hi] = two_point_endpoints(&cs.lower(l, s, a), &cs.upper(l, s, a));
                if target_h == 1 {
                    (0..=grid).map(|i| lo + (hi - lo) * i as f64 / grid as f64).collect()
                } else {
                    vec![lo, hi]
                }
            })
            .collect();
        let mut idx = vec![0usize; cells.len()];
        loop {
            let mut kernel = Array4::zeros((h, 2, 2, 2));
            for (i, &(l, s, a)) in cells.iter().enumerate() {
                let p1 = points[i][idx[i]];
                kernel[[l, s, a, 0]] = 1.0 - p1;
                kernel[[l, s, a, 1]] = p1;
            }
            let d = reach_with_kernel(pi, &kernel, target_h);
            for s in 0..2 {
                out[[target_h, s]] = f64::max(out[[target_h, s]], d[s]);
            }
            let mut i = 0;
            while i < idx.len() {
                idx[i] += 1;
                if idx[i] < points[i].len() {
                    break;
                }
                idx[i] = 0;
                i += 1;
            }
            if i == idx.len() {
                break;
            }
        }
    }
    out
}
