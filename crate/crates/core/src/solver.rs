//! Small smooth constrained maximizers.
//!
//! [`maximize_concave`] handles a concave objective over a box intersected
//! with disjoint unit-sum groups and at most one concave square-root
//! constraint. [`maximize_bilinear_simplex`] solves the proportion-shift
//! problem `max sum k_s r_y E_sy` over two simplices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor on arguments of `sqrt` when evaluating gradients.
pub const SQRT_FLOOR: f64 = 1e-14;
pub const STATIONARITY_TOL: f64 = 1e-6;
pub const FEASIBILITY_TOL: f64 = 1e-8;
pub const MAX_OUTER: usize = 200;
pub const MAX_INNER: usize = 500;

/// Grid resolution of the binary scan.
pub const SCAN_STEPS: usize = 2000;
/// Number of starts for the non-binary heuristic.
pub const MULTI_STARTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub argmax: Vec<f64>,
    pub value: f64,
    /// Largest constraint violation at `argmax` (for `Infeasible`, the
    /// smallest violation that could be reached).
    pub violation: f64,
    pub iterations: usize,
    pub heuristic_global: bool,
}

pub type Objective<'a> = Box<dyn Fn(&[f64]) -> f64 + Send + Sync + 'a>;
pub type Gradient<'a> = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync + 'a>;

/// `sum_{i in indices} x_i = rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEquality {
    pub indices: Vec<usize>,
    pub rhs: f64,
}

/// One `coeff * sqrt(prod_{i in indices} x_i)` term.
#[derive(Debug, Clone, PartialEq)]
pub struct SqrtTerm {
    pub coeff: f64,
    pub indices: Vec<usize>,
}

/// `sum_t coeff_t sqrt(prod x) >= rhs`. Concave when every term has at most
/// two indices and non-negative coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct SqrtConstraint {
    pub terms: Vec<SqrtTerm>,
    pub rhs: f64,
}

impl SqrtConstraint {
    /// Slack `sum - rhs`; non-negative when satisfied.
    pub fn slack(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| t.coeff * t.indices.iter().map(|&i| x[i].max(0.0)).product::<f64>().sqrt())
            .sum::<f64>()
            - self.rhs
    }

    /// Adds `scale * grad slack(x)` to `out`.
    pub fn add_gradient(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        for t in &self.terms {
            for (pos, &i) in t.indices.iter().enumerate() {
                let others: f64 = t
                    .indices
                    .iter()
                    .enumerate()
                    .filter(|&(q, _)| q != pos)
                    .map(|(_, &j)| x[j].max(0.0))
                    .product();
                out[i] += scale * t.coeff * 0.5 * others.sqrt() / x[i].max(SQRT_FLOOR).sqrt();
            }
        }
    }
}

pub struct ProblemSpec<'a> {
    pub dim: usize,
    pub objective: Objective<'a>,
    pub gradient: Gradient<'a>,
    pub equalities: Vec<LinearEquality>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub distance: Option<SqrtConstraint>,
}

impl ProblemSpec<'_> {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::MalformedProblem(m));
        if self.dim == 0 {
            return bad("dimension must be at least 1".into());
        }
        if self.lower.len() != self.dim || self.upper.len() != self.dim {
            return bad("box bounds must match the dimension".into());
        }
        for i in 0..self.dim {
            if !(self.lower[i] <= self.upper[i]) {
                return bad(format!("box bound {i} is empty"));
            }
        }
        let mut seen = vec![false; self.dim];
        for g in &self.equalities {
            let (mut lo, mut hi) = (0.0, 0.0);
            for &i in &g.indices {
                if i >= self.dim || seen[i] {
                    return bad("equality groups must be disjoint and in range".into());
                }
                seen[i] = true;
                lo += self.lower[i];
                hi += self.upper[i];
            }
            if g.rhs < lo - 1e-12 || g.rhs > hi + 1e-12 {
                return bad(format!("equality sum {} unreachable within the box", g.rhs));
            }
        }
        if let Some(c) = &self.distance {
            for t in &c.terms {
                if t.indices.is_empty() || t.indices.iter().any(|&i| i >= self.dim) {
                    return bad("sqrt term indices out of range".into());
                }
                if t.coeff < 0.0 {
                    return bad("sqrt term coefficients must be non-negative".into());
                }
            }
        }
        Ok(())
    }
}

/// Euclidean projection onto box intersected with unit-sum groups.
struct Projector<'a> {
    lower: &'a [f64],
    upper: &'a [f64],
    groups: &'a [LinearEquality],
    in_group: Vec<bool>,
}

impl<'a> Projector<'a> {
    fn new(lower: &'a [f64], upper: &'a [f64], groups: &'a [LinearEquality]) -> Self {
        let mut in_group = vec![false; lower.len()];
        for g in groups {
            for &i in &g.indices {
                in_group[i] = true;
            }
        }
        Self {
            lower,
            upper,
            groups,
            in_group,
        }
    }

    fn project(&self, z: &[f64], out: &mut [f64]) {
        for i in 0..z.len() {
            if !self.in_group[i] {
                out[i] = z[i].clamp(self.lower[i], self.upper[i]);
            }
        }
        for g in self.groups {
            let shifted = |tau: f64, i: usize| (z[i] - tau).clamp(self.lower[i], self.upper[i]);
            let sum = |tau: f64| g.indices.iter().map(|&i| shifted(tau, i)).sum::<f64>();
            let mut lo = g
                .indices
                .iter()
                .map(|&i| z[i] - self.upper[i])
                .fold(f64::INFINITY, f64::min);
            let mut hi = g
                .indices
                .iter()
                .map(|&i| z[i] - self.lower[i])
                .fold(f64::NEG_INFINITY, f64::max);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if sum(mid) > g.rhs {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let tau = 0.5 * (lo + hi);
            for &i in &g.indices {
                out[i] = shifted(tau, i);
            }
            // absorb rounding residue in a coordinate with room to move
            let residue = g.rhs - g.indices.iter().map(|&i| out[i]).sum::<f64>();
            if residue != 0.0 {
                for &i in &g.indices {
                    let v = out[i] + residue;
                    if v >= self.lower[i] && v <= self.upper[i] {
                        out[i] = v;
                        break;
                    }
                }
            }
        }
    }
}

fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projected-gradient residual `|P(x + g) - x|_inf`.
fn stationarity(proj: &Projector, x: &[f64], g: &[f64]) -> f64 {
    let z: Vec<f64> = x.iter().zip(g).map(|(a, b)| a + b).collect();
    let mut p = vec![0.0; x.len()];
    proj.project(&z, &mut p);
    inf_norm_diff(&p, x)
}

/// Spectral projected-gradient ascent with Armijo backtracking.
/// Returns (iterations, converged).
fn spg(
    f: &dyn Fn(&[f64]) -> f64,
    grad: &dyn Fn(&[f64], &mut [f64]),
    proj: &Projector,
    x: &mut [f64],
    max_iter: usize,
    tol: f64,
) -> (usize, bool) {
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut gn = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut xn = vec![0.0; n];
    let mut fx = f(x);
    grad(x, &mut g);
    let mut alpha = 1.0;
    for it in 0..max_iter {
        if stationarity(proj, x, &g) <= tol {
            return (it, true);
        }
        for i in 0..n {
            z[i] = x[i] + alpha * g[i];
        }
        proj.project(&z, &mut y);
        let d: Vec<f64> = y.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
        let gd = dot(&g, &d);
        if gd <= 0.0 {
            // projected step made no ascent: shrink the spectral step
            alpha *= 0.1;
            if alpha < 1e-16 {
                return (it, stationarity(proj, x, &g) <= tol.max(STATIONARITY_TOL));
            }
            continue;
        }
        let mut t = 1.0;
        let mut fnew;
        loop {
            for i in 0..n {
                xn[i] = x[i] + t * d[i];
            }
            fnew = f(&xn);
            if fnew >= fx + 1e-4 * t * gd || t < 1e-14 {
                break;
            }
            t *= 0.5;
        }
        if !(fnew >= fx) {
            return (it, stationarity(proj, x, &g) <= tol.max(STATIONARITY_TOL));
        }
        grad(&xn, &mut gn);
        let mut ss = 0.0;
        let mut sy = 0.0;
        for i in 0..n {
            let s = xn[i] - x[i];
            ss += s * s;
            sy += s * (gn[i] - g[i]);
        }
        alpha = if sy < 0.0 { (ss / -sy).clamp(1e-12, 1e12) } else { 1e12 };
        x.copy_from_slice(&xn);
        std::mem::swap(&mut g, &mut gn);
        fx = fnew;
    }
    (max_iter, stationarity(proj, x, &g) <= tol)
}

/// Maximizes a concave objective over
/// `{lower <= x <= upper, group sums fixed, distance slack >= 0}`.
pub fn maximize_concave(spec: &ProblemSpec, start: &[f64]) -> Result<SolveReport> {
    spec.validate()?;
    if start.len() != spec.dim {
        return Err(Error::MalformedProblem("start point has the wrong dimension".into()));
    }
    let proj = Projector::new(&spec.lower, &spec.upper, &spec.equalities);
    let mut x = vec![0.0; spec.dim];
    proj.project(start, &mut x);

    let Some(con) = &spec.distance else {
        let (it, conv) = spg(&*spec.objective, &*spec.gradient, &proj, &mut x, MAX_OUTER * MAX_INNER, 1e-9);
        let mut g = vec![0.0; spec.dim];
        (spec.gradient)(&x, &mut g);
        let converged = conv || stationarity(&proj, &x, &g) <= STATIONARITY_TOL;
        return Ok(SolveReport {
            status: if converged { SolveStatus::Optimal } else { SolveStatus::MaxIterations },
            value: (spec.objective)(&x),
            argmax: x,
            violation: 0.0,
            iterations: it,
            heuristic_global: false,
        });
    };

    // Phase 1: the most feasible point.
    let slack = |z: &[f64]| con.slack(z);
    let slack_grad = |z: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|v| *v = 0.0);
        con.add_gradient(z, 1.0, out);
    };
    let mut x_feas = x.clone();
    let (mut iterations, _) = spg(&slack, &slack_grad, &proj, &mut x_feas, 4 * MAX_INNER, 1e-12);
    let best_slack = con.slack(&x_feas);
    if best_slack < -FEASIBILITY_TOL {
        return Ok(SolveReport {
            status: SolveStatus::Infeasible,
            value: (spec.objective)(&x_feas),
            argmax: x_feas,
            violation: -best_slack,
            iterations,
            heuristic_global: false,
        });
    }
    if con.slack(&x) < 0.0 {
        x.copy_from_slice(&x_feas);
    }

    // Augmented Lagrangian on the single inequality.
    let mut lambda = 0.0f64;
    let mut mu = 10.0f64;
    let mut prev_violation = f64::INFINITY;
    let mut status = SolveStatus::MaxIterations;
    for _ in 0..MAX_OUTER {
        let (lam, m) = (lambda, mu);
        let lagr = |z: &[f64]| {
            let c = con.slack(z);
            let shifted = (lam - m * c).max(0.0);
            (spec.objective)(z) - (shifted * shifted - lam * lam) / (2.0 * m)
        };
        let lagr_grad = |z: &[f64], out: &mut [f64]| {
            (spec.gradient)(z, out);
            let shifted = (lam - m * con.slack(z)).max(0.0);
            if shifted > 0.0 {
                con.add_gradient(z, shifted, out);
            }
        };
        let (it, conv) = spg(&lagr, &lagr_grad, &proj, &mut x, MAX_INNER, 1e-9);
        iterations += it;
        let c = con.slack(&x);
        let violation = (-c).max(0.0);
        let new_lambda = (lambda - mu * c).max(0.0);
        let mut g = vec![0.0; spec.dim];
        (spec.gradient)(&x, &mut g);
        con.add_gradient(&x, new_lambda, &mut g);
        let kkt = stationarity(&proj, &x, &g);
        if (conv || kkt <= STATIONARITY_TOL)
            && kkt <= STATIONARITY_TOL
            && violation <= FEASIBILITY_TOL
            && new_lambda * c.abs() <= STATIONARITY_TOL
        {
            lambda = new_lambda;
            status = SolveStatus::Optimal;
            break;
        }
        if violation > 0.25 * prev_violation {
            mu = (mu * 10.0).min(1e12);
        }
        prev_violation = violation;
        lambda = new_lambda;
    }
    let _ = lambda;

    if con.slack(&x) < 0.0 {
        // Pull back toward the phase-1 point; concavity keeps the segment
        // end feasible.
        let (mut lo, mut hi) = (0.0, 1.0);
        let point = |t: f64| -> Vec<f64> { x.iter().zip(&x_feas).map(|(a, b)| (1.0 - t) * a + t * b).collect() };
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if con.slack(&point(mid)) >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        x = point(hi);
        if con.slack(&x) < -FEASIBILITY_TOL {
            x.copy_from_slice(&x_feas);
        }
    }
    let violation = (-con.slack(&x)).max(0.0);
    if violation > FEASIBILITY_TOL {
        status = SolveStatus::MaxIterations;
    }
    Ok(SolveReport {
        status,
        value: (spec.objective)(&x),
        argmax: x,
        violation,
        iterations,
        heuristic_global: false,
    })
}

/// Maximizes `sum sqrt(w_i p_i)` over `lo <= p <= hi, sum p = 1`.
///
/// The optimum is `p_i = clamp(w_i t, lo_i, hi_i)` with `t` chosen to hit
/// unit mass; mass left over once every weighted cell is at its cap goes to
/// the zero-weight cells.
pub fn water_fill(w: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let fill = |t: f64| -> Vec<f64> {
        w.iter()
            .zip(lo.iter().zip(hi))
            .map(|(&wi, (&l, &h))| if wi > 0.0 { (wi * t).clamp(l, h) } else { l })
            .collect()
    };
    let total = |p: &[f64]| p.iter().sum::<f64>();
    let saturated: f64 = w
        .iter()
        .zip(lo.iter().zip(hi))
        .map(|(&wi, (&l, &h))| if wi > 0.0 { h } else { l })
        .sum();
    let mut p;
    if saturated <= 1.0 {
        p = fill(f64::INFINITY);
        for i in 0..p.len() {
            if w[i] > 0.0 {
                p[i] = hi[i];
            }
        }
        let mut rest = 1.0 - total(&p);
        for i in 0..p.len() {
            if w[i] <= 0.0 && rest > 0.0 {
                let add = (hi[i] - p[i]).min(rest);
                p[i] += add;
                rest -= add;
            }
        }
        return p;
    }
    let wmax = w.iter().cloned().fold(0.0, f64::max);
    let hmax = hi.iter().cloned().fold(0.0, f64::max);
    let (mut a, mut b) = (0.0, hmax / wmax * 2.0 + 1.0);
    while total(&fill(b)) < 1.0 {
        b *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if total(&fill(mid)) < 1.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    p = fill(b);
    // trim the rounding excess from an interior cell
    let excess = total(&p) - 1.0;
    if excess != 0.0 {
        if let Some(i) = (0..p.len()).find(|&i| p[i] - excess >= lo[i] && p[i] - excess <= hi[i] && w[i] > 0.0) {
            p[i] -= excess;
        }
    }
    p
}

/// Inputs of the proportion-shift problem.
#[derive(Debug, Clone)]
pub struct BilinearProblem<'a> {
    pub s_count: usize,
    pub c_count: usize,
    /// Row-major `E_{s,y}`.
    pub e: &'a [f64],
    /// Row-major `p_{s,y}`; ignored when `p_intervals` is set.
    pub p: &'a [f64],
    pub rho: f64,
    pub k_box: Option<(Vec<f64>, Vec<f64>)>,
    pub r_box: Option<(Vec<f64>, Vec<f64>)>,
    /// Per-cell `(lo, hi)` making `p` a decision variable on box and simplex.
    pub p_intervals: Option<(Vec<f64>, Vec<f64>)>,
}

impl BilinearProblem<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.s_count * self.c_count;
        if n == 0 || self.e.len() != n || self.p.len() != n {
            return Err(Error::MalformedProblem("E and p must have S*C entries".into()));
        }
        crate::error::check_rho(self.rho)?;
        for (b, len) in [(&self.k_box, self.s_count), (&self.r_box, self.c_count)] {
            if let Some((lo, hi)) = b {
                if lo.len() != len || hi.len() != len {
                    return Err(Error::MalformedProblem("box has the wrong length".into()));
                }
                if lo.iter().sum::<f64>() > 1.0 + 1e-12 || hi.iter().sum::<f64>() < 1.0 - 1e-12 {
                    return Err(Error::MalformedProblem("box excludes the simplex".into()));
                }
            }
        }
        if let Some((lo, hi)) = &self.p_intervals {
            if lo.len() != n || hi.len() != n {
                return Err(Error::MalformedProblem("p intervals have the wrong length".into()));
            }
            if lo.iter().sum::<f64>() > 1.0 + 1e-12 || hi.iter().sum::<f64>() < 1.0 - 1e-12 {
                return Err(Error::MalformedProblem("p intervals exclude every distribution".into()));
            }
        }
        Ok(())
    }

    fn k_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        self.k_box
            .clone()
            .unwrap_or_else(|| (vec![0.0; self.s_count], vec![1.0; self.s_count]))
    }

    fn r_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        self.r_box
            .clone()
            .unwrap_or_else(|| (vec![0.0; self.c_count], vec![1.0; self.c_count]))
    }

    /// Affinity `max_p sum sqrt(p_sy k_s r_y)` and the maximizing `p`.
    fn affinity(&self, k: &[f64], r: &[f64]) -> (f64, Vec<f64>) {
        let c = self.c_count;
        match &self.p_intervals {
            None => {
                let a = (0..self.p.len())
                    .map(|i| (self.p[i] * k[i / c] * r[i % c]).sqrt())
                    .sum();
                (a, self.p.to_vec())
            }
            Some((lo, hi)) => {
                let w: Vec<f64> = (0..self.p.len()).map(|i| k[i / c] * r[i % c]).collect();
                let p = water_fill(&w, lo, hi);
                let a = (0..p.len()).map(|i| (p[i] * w[i]).sqrt()).sum();
                (a, p)
            }
        }
    }

    fn objective(&self, k: &[f64], r: &[f64]) -> f64 {
        let c = self.c_count;
        (0..self.e.len()).map(|i| k[i / c] * r[i % c] * self.e[i]).sum()
    }

    fn target(&self) -> f64 {
        1.0 - self.rho * self.rho
    }
}

/// Feasible range of the first coordinate of a binary simplex with a box.
fn binary_range(lo: &[f64], hi: &[f64]) -> (f64, f64) {
    (lo[0].max(1.0 - hi[1]).max(0.0), hi[0].min(1.0 - lo[1]).min(1.0))
}

/// Golden-section maximization of a unimodal function on `[a, b]`.
/// Returns the best point seen.
fn golden_max(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64, iters: usize) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (a, b);
    let mut best = (a, f(a));
    let fb = f(b);
    if fb > best.1 {
        best = (b, fb);
    }
    if b <= a {
        return best;
    }
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 > best.1 {
            best = (x1, f1);
        }
        if f2 > best.1 {
            best = (x2, f2);
        }
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
        if b - a < 1e-15 {
            break;
        }
    }
    if f1 > best.1 {
        best = (x1, f1);
    }
    if f2 > best.1 {
        best = (x2, f2);
    }
    best
}

/// Binary-binary helpers: all vectors are `(t, 1 - t)`.
struct BinaryScan<'p, 'a> {
    prob: &'p BilinearProblem<'a>,
    k_range: (f64, f64),
    r_range: (f64, f64),
    evaluations: usize,
}

impl BinaryScan<'_, '_> {
    fn aff(&mut self, k0: f64, r0: f64) -> f64 {
        self.evaluations += 1;
        self.prob.affinity(&[k0, 1.0 - k0], &[r0, 1.0 - r0]).0
    }

    /// `max_{k0} affinity(k0, r0)` and its argmax.
    fn best_k(&mut self, r0: f64) -> (f64, f64) {
        let (a, b) = self.k_range;
        if self.prob.p_intervals.is_none() {
            let p = self.prob.p;
            let r1 = 1.0 - r0;
            let a0 = (p[0] * r0).sqrt() + (p[1] * r1).sqrt();
            let a1 = (p[2] * r0).sqrt() + (p[3] * r1).sqrt();
            let denom = a0 * a0 + a1 * a1;
            let k = if denom > 0.0 { a0 * a0 / denom } else { 0.5 };
            let k = k.clamp(a, b);
            return (k, self.aff(k, r0));
        }
        let mut f = |k: f64| self.aff(k, r0);
        golden_max(&mut f, a, b, 80)
    }

    /// Endpoint of `{k : aff(k, r0) >= target}` between a feasible `inside`
    /// and `outside`.
    fn boundary(&mut self, r0: f64, inside: f64, outside: f64, target: f64) -> f64 {
        if self.aff(outside, r0) >= target {
            return outside;
        }
        let (mut good, mut bad) = (inside, outside);
        for _ in 0..64 {
            let mid = 0.5 * (good + bad);
            if self.aff(mid, r0) >= target {
                good = mid;
            } else {
                bad = mid;
            }
        }
        good
    }

    /// Best objective at fixed `r0` and its `k0`, or `None` if infeasible.
    fn value_at(&mut self, r0: f64) -> Option<(f64, f64)> {
        let target = self.prob.target();
        let (kstar, best) = self.best_k(r0);
        if best < target {
            return None;
        }
        let (a, b) = self.k_range;
        let left = self.boundary(r0, kstar, a, target);
        let right = self.boundary(r0, kstar, b, target);
        let r = [r0, 1.0 - r0];
        let vl = self.prob.objective(&[left, 1.0 - left], &r);
        let vr = self.prob.objective(&[right, 1.0 - right], &r);
        Some(if vr > vl { (vr, right) } else { (vl, left) })
    }

    fn feasible_at(&mut self, r0: f64) -> bool {
        self.best_k(r0).1 >= self.prob.target()
    }
}

fn binary_report(prob: &BilinearProblem, k0: f64, r0: f64, evaluations: usize) -> SolveReport {
    let k = [k0, 1.0 - k0];
    let r = [r0, 1.0 - r0];
    let (aff, p) = prob.affinity(&k, &r);
    let mut argmax = vec![k0, 1.0 - k0, r0, 1.0 - r0];
    if prob.p_intervals.is_some() {
        argmax.extend(p);
    }
    SolveReport {
        status: SolveStatus::Optimal,
        value: prob.objective(&k, &r),
        argmax,
        violation: (prob.target() - aff).max(0.0),
        iterations: evaluations,
        heuristic_global: false,
    }
}

fn solve_binary(prob: &BilinearProblem) -> SolveReport {
    let (klo, khi) = prob.k_bounds();
    let (rlo, rhi) = prob.r_bounds();
    let mut scan = BinaryScan {
        prob,
        k_range: binary_range(&klo, &khi),
        r_range: binary_range(&rlo, &rhi),
        evaluations: 0,
    };
    let (ra, rb) = scan.r_range;
    let h = (rb - ra) / SCAN_STEPS as f64;
    let grid: Vec<f64> = (0..=SCAN_STEPS)
        .map(|i| if i == SCAN_STEPS { rb } else { ra + h * i as f64 })
        .collect();
    let mut best: Option<(f64, f64, f64)> = None; // (value, k0, r0)
    let consider = |cand: Option<(f64, f64)>, r0: f64, best: &mut Option<(f64, f64, f64)>| {
        if let Some((v, k0)) = cand {
            if best.is_none_or(|b| v > b.0) {
                *best = Some((v, k0, r0));
            }
        }
    };
    let mut feasible_flags = Vec::with_capacity(grid.len());
    for &r0 in &grid {
        let cand = scan.value_at(r0);
        feasible_flags.push(cand.is_some());
        consider(cand, r0, &mut best);
    }
    // Edges of the feasible r0 set.
    for i in 0..grid.len().saturating_sub(1) {
        if feasible_flags[i] != feasible_flags[i + 1] {
            let (mut good, mut bad) = if feasible_flags[i] {
                (grid[i], grid[i + 1])
            } else {
                (grid[i + 1], grid[i])
            };
            for _ in 0..64 {
                let mid = 0.5 * (good + bad);
                if scan.feasible_at(mid) {
                    good = mid;
                } else {
                    bad = mid;
                }
            }
            let cand = scan.value_at(good);
            consider(cand, good, &mut best);
        }
    }
    // The most feasible r0 catches feasible sets narrower than the grid.
    let r_feas = {
        let mut f = |r0: f64| scan.best_k(r0).1;
        golden_max(&mut f, ra, rb, 100).0
    };
    let cand = scan.value_at(r_feas);
    consider(cand, r_feas, &mut best);
    let Some((_, _, r_best)) = best else {
        // No feasible point: report the most feasible one.
        let r0 = r_feas;
        let (k0, _) = scan.best_k(r0);
        let mut rep = binary_report(prob, k0, r0, scan.evaluations);
        rep.status = SolveStatus::Infeasible;
        return rep;
    };
    // Local polish around the best grid point.
    let (a, b) = ((r_best - h).max(ra), (r_best + h).min(rb));
    let mut polish_best: Option<(f64, f64, f64)> = None;
    {
        let mut f = |r0: f64| match scan.value_at(r0) {
            Some((v, k0)) => {
                if polish_best.is_none_or(|pb| v > pb.0) {
                    polish_best = Some((v, k0, r0));
                }
                v
            }
            None => f64::NEG_INFINITY,
        };
        golden_max(&mut f, a, b, 80);
    }
    if let Some(pb) = polish_best {
        if best.is_none_or(|b| pb.0 > b.0) {
            best = Some(pb);
        }
    }
    let (_, k0, r0) = best.expect("feasible point recorded");
    binary_report(prob, k0, r0, scan.evaluations)
}

/// Maximizes the objective over one block (`k` when `over_k`) with the
/// other block fixed. Returns `None` when that block is infeasible.
fn solve_block(prob: &BilinearProblem, k: &[f64], r: &[f64], over_k: bool) -> Option<(Vec<f64>, f64)> {
    let (s, c) = (prob.s_count, prob.c_count);
    let n_block = if over_k { s } else { c };
    let (blo, bhi) = if over_k { prob.k_bounds() } else { prob.r_bounds() };
    let fixed: Vec<f64> = if over_k { r.to_vec() } else { k.to_vec() };
    // objective weights: u_j = sum over the other index of fixed * E
    let u: Vec<f64> = (0..n_block)
        .map(|j| {
            (0..fixed.len())
                .map(|o| {
                    let idx = if over_k { j * c + o } else { o * c + j };
                    fixed[o] * prob.e[idx]
                })
                .sum()
        })
        .collect();
    let n_cells = s * c;
    let with_p = prob.p_intervals.is_some();
    let dim = n_block + if with_p { n_cells } else { 0 };
    let mut lower = blo.clone();
    let mut upper = bhi.clone();
    let mut equalities = vec![LinearEquality {
        indices: (0..n_block).collect(),
        rhs: 1.0,
    }];
    let mut terms = Vec::new();
    for cell in 0..n_cells {
        let (si, yi) = (cell / c, cell % c);
        let (j, o) = if over_k { (si, yi) } else { (yi, si) };
        if with_p {
            terms.push(SqrtTerm {
                coeff: fixed[o].sqrt(),
                indices: vec![j, n_block + cell],
            });
        } else {
            terms.push(SqrtTerm {
                coeff: (prob.p[cell] * fixed[o]).sqrt(),
                indices: vec![j],
            });
        }
    }
    if let Some((plo, phi)) = &prob.p_intervals {
        lower.extend(plo.iter().copied());
        upper.extend(phi.iter().copied());
        equalities.push(LinearEquality {
            indices: (n_block..dim).collect(),
            rhs: 1.0,
        });
    }
    let u_obj = u.clone();
    let spec = ProblemSpec {
        dim,
        objective: Box::new(move |x: &[f64]| x.iter().zip(&u_obj).map(|(a, b)| a * b).sum()),
        gradient: Box::new(move |_x: &[f64], g: &mut [f64]| {
            g.iter_mut().for_each(|v| *v = 0.0);
            g[..u.len()].copy_from_slice(&u);
        }),
        equalities,
        lower,
        upper,
        distance: Some(SqrtConstraint {
            terms,
            rhs: prob.target(),
        }),
    };
    let mut start: Vec<f64> = if over_k { k.to_vec() } else { r.to_vec() };
    if with_p {
        start.extend(prob.affinity(k, r).1);
    }
    let rep = maximize_concave(&spec, &start).ok()?;
    if rep.status == SolveStatus::Infeasible {
        return None;
    }
    let block = rep.argmax[..n_block].to_vec();
    Some((block, rep.value))
}

/// Alternating maximization of the affinity, giving the most feasible
/// `(k, r)`.
fn most_feasible(prob: &BilinearProblem) -> (Vec<f64>, Vec<f64>, f64) {
    let (s, c) = (prob.s_count, prob.c_count);
    let (klo, khi) = prob.k_bounds();
    let (rlo, rhi) = prob.r_bounds();
    let mut k = water_fill(&vec![1.0; s], &klo, &khi);
    let mut r = water_fill(&vec![1.0; c], &rlo, &rhi);
    let mut best = prob.affinity(&k, &r).0;
    for _ in 0..500 {
        // k_s proportional to (sum_y sqrt(p r))^2 within the box
        let p = prob.affinity(&k, &r).1;
        let wk: Vec<f64> = (0..s)
            .map(|si| (0..c).map(|y| (p[si * c + y] * r[y]).sqrt()).sum::<f64>().powi(2))
            .collect();
        k = water_fill(&wk, &klo, &khi);
        let p = prob.affinity(&k, &r).1;
        let wr: Vec<f64> = (0..c)
            .map(|y| (0..s).map(|si| (p[si * c + y] * k[si]).sqrt()).sum::<f64>().powi(2))
            .collect();
        r = water_fill(&wr, &rlo, &rhi);
        let a = prob.affinity(&k, &r).0;
        if a <= best + 1e-15 {
            best = best.max(a);
            break;
        }
        best = a;
    }
    (k, r, best)
}

fn solve_multistart(prob: &BilinearProblem) -> SolveReport {
    use rand::{Rng, SeedableRng};
    let c = prob.c_count;
    let (k_feas, r_feas, aff) = most_feasible(prob);
    let target = prob.target();
    if aff < target {
        let mut argmax = [k_feas.clone(), r_feas.clone()].concat();
        if prob.p_intervals.is_some() {
            argmax.extend(prob.affinity(&k_feas, &r_feas).1);
        }
        return SolveReport {
            status: SolveStatus::Infeasible,
            value: prob.objective(&k_feas, &r_feas),
            argmax,
            violation: target - aff,
            iterations: 0,
            heuristic_global: true,
        };
    }
    let (rlo, rhi) = prob.r_bounds();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let mut iterations = 0;
    for start in 0..MULTI_STARTS {
        let mut r = if start == 0 {
            r_feas.clone()
        } else {
            let raw: Vec<f64> = (0..c).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
            let cand = water_fill(&raw.iter().map(|v| v * v).collect::<Vec<_>>(), &rlo, &rhi);
            // move toward the feasible point until some k works
            let mut t = 1.0;
            loop {
                let blend: Vec<f64> = cand.iter().zip(&r_feas).map(|(a, b)| t * a + (1.0 - t) * b).collect();
                if t < 1e-3 || solve_block(prob, &k_feas, &blend, true).is_some() {
                    break blend;
                }
                t *= 0.5;
            }
        };
        let mut k = k_feas.clone();
        let mut value = f64::NEG_INFINITY;
        for _ in 0..100 {
            iterations += 1;
            let Some((nk, _)) = solve_block(prob, &k, &r, true) else { break };
            k = nk;
            let Some((nr, v)) = solve_block(prob, &k, &r, false) else { break };
            r = nr;
            let stalled = v <= value + 1e-10;
            value = value.max(v);
            if stalled {
                break;
            }
        }
        let (a, _) = prob.affinity(&k, &r);
        if a >= target - FEASIBILITY_TOL {
            let v = prob.objective(&k, &r);
            if best.as_ref().is_none_or(|b| v > b.0) {
                best = Some((v, k, r));
            }
        }
    }
    let (value, k, r) = best.unwrap_or_else(|| (prob.objective(&k_feas, &r_feas), k_feas.clone(), r_feas.clone()));
    let (a, p) = prob.affinity(&k, &r);
    let mut argmax = [k, r].concat();
    if prob.p_intervals.is_some() {
        argmax.extend(p);
    }
    SolveReport {
        status: SolveStatus::Optimal,
        value,
        argmax,
        violation: (target - a).max(0.0),
        iterations,
        heuristic_global: true,
    }
}

/// `max sum_{s,y} k_s r_y E_sy` over `k`, `r` on (boxed) simplices subject to
/// `sum sqrt(p_sy k_s r_y) >= 1 - rho^2`.
///
/// `argmax` is `k` then `r` (then `p` when `p_intervals` is set). The binary
/// case is solved by exhaustive scan; otherwise the report is flagged
/// `heuristic_global`.
pub fn maximize_bilinear_simplex(prob: &BilinearProblem) -> Result<SolveReport> {
    prob.validate()?;
    if prob.s_count == 2 && prob.c_count == 2 {
        Ok(solve_binary(prob))
    } else {
        Ok(solve_multistart(prob))
    }
}

/// Largest singular value of a non-negative matrix by power iteration.
fn top_singular_value(a: &[f64], rows: usize, cols: usize) -> f64 {
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut sigma = 0.0;
    for _ in 0..10_000 {
        let u: Vec<f64> = (0..rows)
            .map(|i| (0..cols).map(|j| a[i * cols + j] * v[j]).sum())
            .collect();
        let mut w: Vec<f64> = (0..cols)
            .map(|j| (0..rows).map(|i| a[i * cols + j] * u[i]).sum())
            .collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        w.iter_mut().for_each(|x| *x /= norm);
        let next = norm.sqrt();
        let delta = inf_norm_diff(&w, &v);
        v = w;
        if (next - sigma).abs() <= 1e-16 * next && delta < 1e-13 {
            sigma = next;
            break;
        }
        sigma = next;
    }
    sigma
}

/// Smallest radius at which some fair distribution exists:
/// `sqrt(1 - max_{k,r} sum sqrt(p_sy k_s r_y))`.
pub fn min_feasible_rho(prob: &BilinearProblem) -> Result<f64> {
    let mut probe = prob.clone();
    probe.rho = 1.0;
    probe.validate()?;
    let (s, c) = (prob.s_count, prob.c_count);
    let unconstrained = prob.k_box.is_none() && prob.r_box.is_none() && prob.p_intervals.is_none();
    let aff = if unconstrained {
        let root: Vec<f64> = prob.p.iter().map(|v| v.sqrt()).collect();
        top_singular_value(&root, s, c)
    } else if s == 2 && c == 2 {
        let (klo, khi) = prob.k_bounds();
        let (rlo, rhi) = prob.r_bounds();
        let mut scan = BinaryScan {
            prob: &probe,
            k_range: binary_range(&klo, &khi),
            r_range: binary_range(&rlo, &rhi),
            evaluations: 0,
        };
        let (ra, rb) = scan.r_range;
        let steps = 200;
        let h = (rb - ra) / steps as f64;
        let mut best = (ra, f64::NEG_INFINITY);
        for i in 0..=steps {
            let r0 = if i == steps { rb } else { ra + h * i as f64 };
            let a = scan.best_k(r0).1;
            if a > best.1 {
                best = (r0, a);
            }
        }
        let mut f = |r0: f64| scan.best_k(r0).1;
        let polished = golden_max(&mut f, (best.0 - h).max(ra), (best.0 + h).min(rb), 100);
        polished.1.max(best.1)
    } else {
        most_feasible(&probe).2
    };
    Ok((1.0 - aff).clamp(0.0, 1.0).sqrt())
}
