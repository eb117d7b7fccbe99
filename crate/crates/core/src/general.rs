//! Certificates when within-cell feature distributions may shift as well.
//!
//! The marginals `k`, `r` of the fair test distribution are confined to grid
//! cells. Within a cell, each subpopulation's loss is bounded by the Gramian
//! bound written in `x = (1 - rho_sy^2)^2`, with the cell corners replacing
//! `k_s r_y`. The result is a separable concave program in `x`, one per cell:
//!
//! ```text
//! max  sum_i  c_i + 2 A_i sqrt(x_i (1 - x_i)) - B_i x_i
//! s.t. sum_i  sqrt(p_i w_i x_i) >= 1 - rho^2,   lo_i <= x_i <= 1
//! ```
//!
//! with `w = k_hi r_hi`. The bound is the largest cell optimum. A box of
//! cells gives a relaxation of each of its cells, so the search is a
//! best-first branch and bound over boxes.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{cell_constant, gamma_bar_sq_unchecked, IntervalTable};
use crate::certificate::{union_confidence, Certificate, Diagnostics, Scenario, SkewOptions, WinningCell};
use crate::error::{check_rho, check_unit_open, Error, Result};
use crate::solver::{min_feasible_rho, water_fill, BilinearProblem, SolveStatus};
use crate::stats::StatsTable;

/// Default grid resolution: cells of width 0.005.
pub const DEFAULT_GRANULARITY: usize = 200;

/// Boxes expanded between incumbent updates.
const BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellBounds {
    pub k_lo: Vec<f64>,
    pub k_hi: Vec<f64>,
    pub r_lo: Vec<f64>,
    pub r_hi: Vec<f64>,
}

impl CellBounds {
    /// `sum k_lo <= 1 <= sum k_hi` and likewise for `r`.
    pub fn covers_simplex(&self) -> bool {
        let s = |v: &[f64]| v.iter().sum::<f64>();
        s(&self.k_lo) <= 1.0 + 1e-12
            && s(&self.k_hi) >= 1.0 - 1e-12
            && s(&self.r_lo) <= 1.0 + 1e-12
            && s(&self.r_hi) >= 1.0 - 1e-12
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Feasible { value: f64, x: Vec<f64> },
    Infeasible,
    Pruned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: CellBounds,
    pub status: CellStatus,
}

/// Sweep settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralOptions {
    pub granularity: usize,
    pub skew: SkewOptions,
    /// Skip cells whose distance-free optimum cannot beat the incumbent.
    pub prune: bool,
}

impl GeneralOptions {
    pub fn new(granularity: usize, skew: SkewOptions) -> Self {
        Self {
            granularity,
            skew,
            prune: true,
        }
    }
}

/// Per-subpopulation statistics entering the cell programs.
#[derive(Debug, Clone)]
struct CellInputs {
    /// `E + C` (upper confidence versions in finite-sampling mode).
    e_plus_c: Vec<f64>,
    sqrt_v: Vec<f64>,
    /// `C` multiplying `x` (lower confidence version in finite-sampling mode).
    c_x: Vec<f64>,
    x_lo: Vec<f64>,
    mass: Masses,
}

#[derive(Debug, Clone)]
enum Masses {
    Fixed(Vec<f64>),
    Free { lo: Vec<f64>, hi: Vec<f64> },
}

impl CellInputs {
    fn exact(stats: &StatsTable, m: f64) -> Self {
        let cells = stats.cells();
        let c: Vec<f64> = cells.iter().map(|c| cell_constant(c.mean, c.variance, m)).collect();
        Self {
            e_plus_c: cells.iter().zip(&c).map(|(s, c)| s.mean + c).collect(),
            sqrt_v: cells.iter().map(|c| c.variance.sqrt()).collect(),
            c_x: c,
            x_lo: cells
                .iter()
                .map(|c| (1.0 - gamma_bar_sq_unchecked(c.mean, c.variance, m)).powi(2))
                .collect(),
            mass: Masses::Fixed(stats.masses()),
        }
    }

    fn finite_sample(it: &IntervalTable) -> Self {
        let (lo, hi) = it.mass_bounds();
        Self {
            e_plus_c: it.mean.iter().zip(&it.c_hi).map(|(e, c)| e.hi + c).collect(),
            sqrt_v: it.std.iter().map(|s| s.hi).collect(),
            c_x: it.c_lo.clone(),
            x_lo: it.gamma_bar_sq_hi.iter().map(|g| (1.0 - g).powi(2)).collect(),
            mass: Masses::Free { lo, hi },
        }
    }
}

/// Separable objective `sum konst + 2 A sqrt(x(1-x)) - B x` on `[lo, 1]`.
#[derive(Debug, Clone)]
struct CellProgram {
    konst: f64,
    a: Vec<f64>,
    b: Vec<f64>,
    lo: Vec<f64>,
    /// `k_hi r_hi` per subpopulation.
    w: Vec<f64>,
}

fn pos(v: f64) -> f64 {
    v.max(0.0)
}

fn neg(v: f64) -> f64 {
    v.min(0.0)
}

impl CellProgram {
    fn new(cell: &CellBounds, inp: &CellInputs, c_count: usize) -> Self {
        let n = inp.e_plus_c.len();
        let mut prog = Self {
            konst: 0.0,
            a: Vec::with_capacity(n),
            b: Vec::with_capacity(n),
            lo: inp.x_lo.clone(),
            w: Vec::with_capacity(n),
        };
        for i in 0..n {
            let (s, y) = (i / c_count, i % c_count);
            let hi = cell.k_hi[s] * cell.r_hi[y];
            let lo = cell.k_lo[s] * cell.r_lo[y];
            prog.konst += hi * pos(inp.e_plus_c[i]) + lo * neg(inp.e_plus_c[i]);
            prog.a.push(hi * inp.sqrt_v[i]);
            prog.b.push(lo * pos(inp.c_x[i]) + hi * neg(inp.c_x[i]));
            prog.w.push(hi);
        }
        prog
    }

    fn term(&self, i: usize, x: f64) -> f64 {
        2.0 * self.a[i] * (x * (1.0 - x)).max(0.0).sqrt() - self.b[i] * x
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.konst + (0..x.len()).map(|i| self.term(i, x[i])).sum::<f64>()
    }

    /// `argmax_{x in [lo,1]} 2A sqrt(x(1-x)) - B x + la sqrt(x)` (`la = lambda a`).
    fn coord_argmax(&self, i: usize, la: f64) -> f64 {
        let (a, b, lo) = (self.a[i], self.b[i], self.lo[i]);
        if lo >= 1.0 {
            return 1.0;
        }
        if a == 0.0 {
            if la == 0.0 {
                return if b > 0.0 { lo } else { 1.0 };
            }
            if la / 2.0 - b >= 0.0 {
                return 1.0;
            }
            // b > la/2 > 0: stationary point of -B x + la sqrt(x)
            return (la / (2.0 * b)).powi(2).clamp(lo, 1.0);
        }
        // With x = sin^2(t) the term is A sin 2t - B sin^2 t + la sin t, whose
        // derivative h is smooth and changes sign once on the interior.
        let h = |t: f64| 2.0 * a * (2.0 * t).cos() - b * (2.0 * t).sin() + la * t.cos();
        let dh = |t: f64| -4.0 * a * (2.0 * t).sin() - 2.0 * b * (2.0 * t).cos() - la * t.sin();
        let t_lo = lo.sqrt().asin();
        if lo > 0.0 && h(t_lo) <= 0.0 {
            return lo;
        }
        let (mut left, mut right) = (t_lo, std::f64::consts::FRAC_PI_2);
        let mut t = 0.5 * (left + right);
        for _ in 0..100 {
            let g = h(t);
            if g > 0.0 {
                left = t;
            } else {
                right = t;
            }
            if g == 0.0 || right - left <= 1e-15 {
                break;
            }
            let step = -g / dh(t);
            let newton = t + step;
            if newton > left && newton < right && newton.is_finite() {
                t = newton;
                if step.abs() <= 1e-15 {
                    break;
                }
            } else {
                t = 0.5 * (left + right);
            }
        }
        let x = t.sin().powi(2);
        x.clamp(lo, 1.0)
    }

    fn argmax_at(&self, coeff: &[f64], lambda: f64, x: &mut [f64]) {
        for i in 0..x.len() {
            x[i] = self.coord_argmax(i, lambda * coeff[i]);
        }
    }

    /// Exact maximum with `sum coeff_i sqrt(x_i) >= target`, by bisecting on
    /// the multiplier. `None` when even `x = 1` is infeasible.
    fn solve_fixed(&self, coeff: &[f64], target: f64) -> Option<(f64, Vec<f64>)> {
        let n = self.a.len();
        let reach = |x: &[f64]| (0..n).map(|i| coeff[i] * x[i].sqrt()).sum::<f64>() - target;
        if coeff.iter().sum::<f64>() < target {
            return None;
        }
        let mut x = vec![0.0; n];
        self.argmax_at(coeff, 0.0, &mut x);
        if reach(&x) >= 0.0 {
            return Some((self.value(&x), x));
        }
        let (mut lam_lo, mut g_lo) = (0.0, reach(&x));
        let mut lam_hi = 1.0;
        let mut x_hi = vec![0.0; n];
        let mut g_hi;
        loop {
            self.argmax_at(coeff, lam_hi, &mut x_hi);
            g_hi = reach(&x_hi);
            if g_hi >= 0.0 {
                break;
            }
            lam_lo = lam_hi;
            g_lo = g_hi;
            lam_hi *= 4.0;
            if !lam_hi.is_finite() || lam_hi > 1e200 {
                // only x = 1 reaches the target
                let ones: Vec<f64> = (0..n).map(|i| if coeff[i] > 0.0 { 1.0 } else { x[i] }).collect();
                return Some((self.value(&ones), ones));
            }
        }
        // Illinois iterations on the monotone reach(lambda)
        let mut side = 0i8;
        let mut trial = vec![0.0; n];
        for _ in 0..200 {
            if g_hi <= 1e-14 || lam_hi - lam_lo <= 1e-15 * lam_hi {
                break;
            }
            let mut lam = (lam_lo * g_hi - lam_hi * g_lo) / (g_hi - g_lo);
            if !(lam > lam_lo && lam < lam_hi) {
                lam = 0.5 * (lam_lo + lam_hi);
            }
            self.argmax_at(coeff, lam, &mut trial);
            let g = reach(&trial);
            if g >= 0.0 {
                lam_hi = lam;
                g_hi = g;
                x_hi.copy_from_slice(&trial);
                if side == 1 {
                    g_lo *= 0.5;
                }
                side = 1;
            } else {
                lam_lo = lam;
                g_lo = g;
                if side == -1 {
                    g_hi *= 0.5;
                }
                side = -1;
            }
        }
        Some((self.value(&x_hi), x_hi))
    }

    /// Maximum with the masses free on box and simplex: alternate the exact
    /// `x` step with water-filling over `p`.
    fn solve_free(&self, lo: &[f64], hi: &[f64], target: f64) -> Option<(f64, Vec<f64>, Vec<f64>)> {
        let n = self.a.len();
        let mut p = water_fill(&self.w, lo, hi);
        let affinity = |p: &[f64], x: &[f64]| (0..n).map(|i| (p[i] * self.w[i] * x[i]).sqrt()).sum::<f64>();
        if affinity(&p, &vec![1.0; n]) < target {
            return None;
        }
        let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
        for _ in 0..200 {
            let coeff: Vec<f64> = (0..n).map(|i| (p[i] * self.w[i]).sqrt()).collect();
            let (v, x) = self.solve_fixed(&coeff, target)?;
            let improved = best.as_ref().is_none_or(|b| v > b.0 + 1e-13);
            if best.as_ref().is_none_or(|b| v >= b.0) {
                best = Some((v, x.clone(), p.clone()));
            }
            if !improved {
                break;
            }
            let wx: Vec<f64> = (0..n).map(|i| self.w[i] * x[i]).collect();
            p = water_fill(&wx, lo, hi);
        }
        best
    }

    fn corner_affinity(&self, mass: &Masses) -> f64 {
        match mass {
            Masses::Fixed(p) => (0..p.len()).map(|i| (p[i] * self.w[i]).sqrt()).sum(),
            Masses::Free { lo, hi } => {
                let p = water_fill(&self.w, lo, hi);
                (0..p.len()).map(|i| (p[i] * self.w[i]).sqrt()).sum()
            }
        }
    }

    fn solve(&self, mass: &Masses, target: f64) -> Option<(f64, Vec<f64>, Option<Vec<f64>>)> {
        match mass {
            Masses::Fixed(p) => {
                let coeff: Vec<f64> = (0..p.len()).map(|i| (p[i] * self.w[i]).sqrt()).collect();
                self.solve_fixed(&coeff, target).map(|(v, x)| (v, x, None))
            }
            Masses::Free { lo, hi } => self.solve_free(lo, hi, target).map(|(v, x, p)| (v, x, Some(p))),
        }
    }
}

fn check_bound(stats: &StatsTable) -> Result<f64> {
    stats.loss_bound().ok_or(Error::UnboundedLoss)
}

/// Solves the relaxed program of one cell against the exact statistics.
pub fn cell_bound(cell: &CellBounds, stats: &StatsTable, rho: f64) -> Result<CellResult> {
    let m = check_bound(stats)?;
    check_rho(rho)?;
    let (s, c) = (stats.s_count(), stats.c_count());
    if cell.k_lo.len() != s || cell.k_hi.len() != s || cell.r_lo.len() != c || cell.r_hi.len() != c {
        return Err(Error::MalformedProblem("cell bounds do not match the table".into()));
    }
    if !cell.covers_simplex() {
        return Ok(CellResult {
            cell: cell.clone(),
            status: CellStatus::Infeasible,
        });
    }
    let inputs = CellInputs::exact(stats, m);
    let prog = CellProgram::new(cell, &inputs, c);
    let status = match prog.solve(&inputs.mass, 1.0 - rho * rho) {
        Some((value, x, _)) => CellStatus::Feasible { value, x },
        None => CellStatus::Infeasible,
    };
    Ok(CellResult {
        cell: cell.clone(),
        status,
    })
}

/// Grid along one marginal. A binary marginal has one free coordinate
/// (its first entry), clipped to the skew range; a marginal with three or
/// more entries has one coordinate per entry.
#[derive(Debug, Clone)]
enum Axis {
    Fixed,
    /// Surviving grid cells `(grid index, lo, hi)` of the first entry.
    Binary(Vec<(usize, f64, f64)>),
    Simplex { dim: usize, t: usize },
}

impl Axis {
    fn new(dim: usize, t: usize, range: (f64, f64)) -> Self {
        match dim {
            1 => Axis::Fixed,
            2 => {
                let (a, b) = range;
                let tf = t as f64;
                let mut cells = Vec::new();
                for i in 0..t {
                    let lo = (i as f64 / tf).max(a);
                    let hi = ((i + 1) as f64 / tf).min(b);
                    if lo > hi || (lo == hi && b > a) {
                        continue;
                    }
                    cells.push((i, lo, hi));
                    if a == b {
                        break;
                    }
                }
                Axis::Binary(cells)
            }
            _ => Axis::Simplex { dim, t },
        }
    }

    fn extents(&self) -> Vec<usize> {
        match self {
            Axis::Fixed => Vec::new(),
            Axis::Binary(cells) => vec![cells.len()],
            Axis::Simplex { dim, t } => vec![*t; *dim],
        }
    }

    /// Marginal bounds over a box of cell ranges `[start, end)`.
    fn bounds(&self, ranges: &[(usize, usize)]) -> (Vec<f64>, Vec<f64>) {
        match self {
            Axis::Fixed => (vec![1.0], vec![1.0]),
            Axis::Binary(cells) => {
                let (i0, i1) = ranges[0];
                let (a, b) = (cells[i0].1, cells[i1 - 1].2);
                (vec![a, 1.0 - b], vec![b, 1.0 - a])
            }
            Axis::Simplex { t, .. } => {
                let tf = *t as f64;
                (
                    ranges.iter().map(|r| r.0 as f64 / tf).collect(),
                    ranges.iter().map(|r| r.1 as f64 / tf).collect(),
                )
            }
        }
    }

    /// Grid indices of a single cell.
    fn grid_index(&self, cell: &[usize]) -> Vec<usize> {
        match self {
            Axis::Fixed => vec![0],
            Axis::Binary(cells) => vec![cells[cell[0]].0],
            Axis::Simplex { .. } => cell.to_vec(),
        }
    }
}

/// The full grid: `k` coordinates followed by `r` coordinates.
struct Grid {
    k: Axis,
    r: Axis,
    nk: usize,
    extents: Vec<usize>,
}

impl Grid {
    fn new(s: usize, c: usize, t: usize, skew: &SkewOptions) -> Self {
        let k = Axis::new(s, t, skew.k_range());
        let r = Axis::new(c, t, skew.r_range());
        let mut extents = k.extents();
        let nk = extents.len();
        extents.extend(r.extents());
        Self { k, r, nk, extents }
    }

    fn cells(&self) -> usize {
        self.extents.iter().product()
    }

    fn bounds(&self, ranges: &[(usize, usize)]) -> CellBounds {
        let (k_lo, k_hi) = self.k.bounds(&ranges[..self.nk]);
        let (r_lo, r_hi) = self.r.bounds(&ranges[self.nk..]);
        CellBounds { k_lo, k_hi, r_lo, r_hi }
    }

    fn root(&self) -> Vec<(usize, usize)> {
        self.extents.iter().map(|&e| (0, e)).collect()
    }
}

fn area(ranges: &[(usize, usize)]) -> usize {
    ranges.iter().map(|r| r.1 - r.0).product()
}

fn is_cell(ranges: &[(usize, usize)]) -> bool {
    ranges.iter().all(|r| r.1 - r.0 == 1)
}

/// Halves the widest range (lowest coordinate on ties).
fn split(ranges: &[(usize, usize)]) -> [Vec<(usize, usize)>; 2] {
    let (d, _) = ranges
        .iter()
        .enumerate()
        .max_by(|a, b| (a.1 .1 - a.1 .0).cmp(&(b.1 .1 - b.1 .0)).then(b.0.cmp(&a.0)))
        .expect("grid has at least one coordinate");
    let (a, b) = ranges[d];
    let mid = a + (b - a) / 2;
    let mut left = ranges.to_vec();
    let mut right = ranges.to_vec();
    left[d].1 = mid;
    right[d].0 = mid;
    [left, right]
}

type Solution = (f64, Vec<f64>, Option<Vec<f64>>);

/// Optimum of the relaxed program over a box; `None` when infeasible.
fn evaluate(grid: &Grid, ranges: &[(usize, usize)], inputs: &CellInputs, c: usize, target: f64) -> Option<Solution> {
    let cell = grid.bounds(ranges);
    if !cell.covers_simplex() {
        return None;
    }
    let prog = CellProgram::new(&cell, inputs, c);
    if prog.corner_affinity(&inputs.mass) < target {
        return None;
    }
    prog.solve(&inputs.mass, target)
}

/// Largest box bound that may still be discarded against `value`.
fn inflate(v: f64) -> f64 {
    v + 1e-9 * (1.0 + v.abs())
}

struct Node {
    bound: f64,
    ranges: Vec<(usize, usize)>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    /// Max-heap order: larger bound first, then the lower cell index.
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound
            .total_cmp(&other.bound)
            .then_with(|| other.ranges.cmp(&self.ranges))
    }
}

#[derive(Default)]
struct Tally {
    best: Option<(f64, Vec<usize>, Vec<f64>, Option<Vec<f64>>)>,
    solved: usize,
    pruned: usize,
    infeasible: usize,
}

impl Tally {
    /// Records a single cell's result; ties go to the lower cell index.
    fn offer(&mut self, cell: Vec<usize>, res: Option<Solution>) {
        self.solved += 1;
        let Some((v, x, p)) = res else {
            self.infeasible += 1;
            return;
        };
        let wins = match &self.best {
            None => true,
            Some((bv, bc, ..)) => v > *bv || (v == *bv && cell < *bc),
        };
        if wins {
            self.best = Some((v, cell, x, p));
        }
    }

    /// Whether a box bounded by `bound` and starting at `start` can hold a
    /// cell beating the incumbent.
    fn promising(&self, bound: f64, start: &[usize]) -> bool {
        match &self.best {
            None => true,
            Some((bv, bc, ..)) => bound > *bv || (bound == *bv && start < bc.as_slice()),
        }
    }
}

fn starts(ranges: &[(usize, usize)]) -> Vec<usize> {
    ranges.iter().map(|r| r.0).collect()
}

/// Best-first branch and bound over boxes of cells.
fn branch_and_bound(grid: &Grid, inputs: &CellInputs, c: usize, target: f64) -> Tally {
    let mut tally = Tally::default();
    let root = grid.root();
    let mut heap = BinaryHeap::new();
    let place = |tally: &mut Tally, heap: &mut BinaryHeap<Node>, ranges: Vec<(usize, usize)>, res: Option<Solution>| {
        if is_cell(&ranges) {
            tally.offer(starts(&ranges), res);
        } else {
            match res {
                Some((v, ..)) => heap.push(Node {
                    bound: inflate(v),
                    ranges,
                }),
                None => tally.infeasible += area(&ranges),
            }
        }
    };
    let res = evaluate(grid, &root, inputs, c, target);
    place(&mut tally, &mut heap, root, res);
    while !heap.is_empty() {
        let mut batch = Vec::with_capacity(BATCH);
        while batch.len() < BATCH {
            let Some(node) = heap.pop() else { break };
            if tally.promising(node.bound, &starts(&node.ranges)) {
                batch.push(node);
            } else {
                tally.pruned += area(&node.ranges);
            }
        }
        let children: Vec<(Vec<(usize, usize)>, Option<Solution>)> = batch
            .par_iter()
            .flat_map_iter(|node| split(&node.ranges))
            .map(|ranges| {
                let res = evaluate(grid, &ranges, inputs, c, target);
                (ranges, res)
            })
            .collect();
        for (ranges, res) in children {
            place(&mut tally, &mut heap, ranges, res);
        }
    }
    tally
}

/// Every cell, no pruning.
fn exhaustive(grid: &Grid, inputs: &CellInputs, c: usize, target: f64) -> Tally {
    let total = grid.cells();
    let results: Vec<(Vec<usize>, Option<Solution>)> = (0..total)
        .into_par_iter()
        .map(|mut code| {
            let mut cell = vec![0; grid.extents.len()];
            for d in (0..cell.len()).rev() {
                cell[d] = code % grid.extents[d];
                code /= grid.extents[d];
            }
            let ranges: Vec<(usize, usize)> = cell.iter().map(|&i| (i, i + 1)).collect();
            (cell, evaluate(grid, &ranges, inputs, c, target))
        })
        .collect();
    let mut tally = Tally::default();
    for (cell, res) in results {
        tally.offer(cell, res);
    }
    tally
}

/// Smallest radius admitting a fair distribution. Within-cell shifts only
/// lower the affinity, so this is the proportion-only minimum.
fn exact_min_rho(stats: &StatsTable, inputs: &CellInputs, skew: &SkewOptions) -> Result<f64> {
    let masses = stats.masses();
    let means = stats.means();
    let edges = |on: Option<f64>, (lo, hi): (f64, f64)| on.map(|_| (vec![lo; 2], vec![hi; 2]));
    let prob = BilinearProblem {
        s_count: stats.s_count(),
        c_count: stats.c_count(),
        e: &means,
        p: &masses,
        rho: 1.0,
        k_box: edges(skew.delta_s, skew.k_range()),
        r_box: edges(skew.delta_l, skew.r_range()),
        p_intervals: match &inputs.mass {
            Masses::Fixed(_) => None,
            Masses::Free { lo, hi } => Some((lo.clone(), hi.clone())),
        },
    };
    min_feasible_rho(&prob)
}

fn run(
    stats: &StatsTable,
    rho: f64,
    opts: &GeneralOptions,
    inputs: &CellInputs,
    confidence: f64,
) -> Result<Certificate> {
    check_rho(rho)?;
    if opts.granularity == 0 {
        return Err(Error::OutOfRange {
            name: "granularity",
            value: 0.0,
            range: "[1, inf)",
        });
    }
    let m = check_bound(stats)?;
    let (s, c) = (stats.s_count(), stats.c_count());
    opts.skew.validate(s, c)?;
    let t = opts.granularity;
    let grid = Grid::new(s, c, t, &opts.skew);
    if s > 2 || c > 2 {
        warn!("general certificate with S={s}, C={c} searches a grid of {} cells", grid.cells());
    }
    let target = 1.0 - rho * rho;
    let rho_min = exact_min_rho(stats, inputs, &opts.skew)?;
    let tally = if rho + 1e-12 < rho_min {
        // no fair distribution is that close, whatever the grid relaxation says
        Tally {
            infeasible: grid.cells(),
            ..Tally::default()
        }
    } else if opts.prune {
        branch_and_bound(&grid, inputs, c, target)
    } else {
        exhaustive(&grid, inputs, c, target)
    };

    let mut diagnostics = Diagnostics::new(
        if tally.best.is_some() {
            SolveStatus::Optimal
        } else {
            SolveStatus::Infeasible
        },
        tally.solved,
        0.0,
        false,
    );
    diagnostics.cells_total = Some(grid.cells());
    diagnostics.cells_solved = Some(tally.solved);
    diagnostics.cells_pruned = Some(tally.pruned);
    diagnostics.cells_infeasible = Some(tally.infeasible);

    let mut cert = Certificate {
        scenario: Scenario::General,
        rho,
        feasible: false,
        value: None,
        k: Vec::new(),
        r: Vec::new(),
        confidence,
        min_feasible_rho: rho_min,
        diagnostics,
        p: None,
        granularity: Some(t),
        winning_cell: None,
        x: None,
    };
    if let Some((v, index, x, p)) = tally.best {
        let ranges: Vec<(usize, usize)> = index.iter().map(|&i| (i, i + 1)).collect();
        let cell = grid.bounds(&ranges);
        let prog = CellProgram::new(&cell, inputs, c);
        let masses = match (&inputs.mass, &p) {
            (_, Some(p)) => p.clone(),
            (Masses::Fixed(p), None) => p.clone(),
            (Masses::Free { .. }, None) => unreachable!("free masses always return p"),
        };
        let reach: f64 = (0..x.len()).map(|i| (masses[i] * prog.w[i] * x[i]).sqrt()).sum();
        cert.diagnostics.violation = (target - reach).max(0.0);
        cert.feasible = true;
        cert.value = Some(v.min(m));
        cert.k = (0..s).map(|i| 0.5 * (cell.k_lo[i] + cell.k_hi[i])).collect();
        cert.r = (0..c).map(|i| 0.5 * (cell.r_lo[i] + cell.r_hi[i])).collect();
        cert.x = Some(x.chunks(c).map(|row| row.to_vec()).collect());
        cert.p = p;
        let mut grid_index = grid.k.grid_index(&index[..grid.nk]);
        grid_index.extend(grid.r.grid_index(&index[grid.nk..]));
        cert.winning_cell = Some(WinningCell {
            index: grid_index,
            k_lo: cell.k_lo,
            k_hi: cell.k_hi,
            r_lo: cell.r_lo,
            r_hi: cell.r_hi,
        });
    }
    Ok(cert)
}

/// Worst-case expected loss over fair distributions within `rho`, allowing
/// arbitrary within-cell shifts. Needs a finite loss bound `M`.
pub fn certify_general(stats: &StatsTable, rho: f64, t: usize, skew: SkewOptions) -> Result<Certificate> {
    certify_general_with(stats, rho, &GeneralOptions::new(t, skew))
}

pub fn certify_general_with(stats: &StatsTable, rho: f64, opts: &GeneralOptions) -> Result<Certificate> {
    let m = check_bound(stats)?;
    let inputs = CellInputs::exact(stats, m);
    run(stats, rho, opts, &inputs, 1.0)
}

/// Finite-sample version, valid with probability at least `1 - 3 S C delta`
/// (reported as zero when negative).
pub fn certify_general_fs(
    stats: &StatsTable,
    rho: f64,
    t: usize,
    delta: f64,
    skew: SkewOptions,
) -> Result<Certificate> {
    certify_general_fs_with(stats, rho, delta, &GeneralOptions::new(t, skew))
}

pub fn certify_general_fs_with(stats: &StatsTable, rho: f64, delta: f64, opts: &GeneralOptions) -> Result<Certificate> {
    check_unit_open("delta", delta)?;
    check_bound(stats)?;
    let confidence = union_confidence(3 * stats.s_count() * stats.c_count(), delta);
    let it = IntervalTable::from_stats(stats, delta)?;
    let inputs = CellInputs::finite_sample(&it);
    run(stats, rho, opts, &inputs, confidence)
}
