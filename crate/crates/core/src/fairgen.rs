//! Simulation of fair shifted distributions for empirical validation of
//! certificates.
//!
//! Two protocols are provided for binary sensitive attribute and label.
//! Sensitive shifting resamples each (s, y) cell to product-form masses
//! `q = k (x) r`. General shifting mixes each cell with a support-disjoint
//! copy of itself under mixing weights that keep base rates equal.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hellinger::{mixture_shift_distance, sensitive_shift_distance, MassVector};
use crate::stats::{compute_loss, LossKind, SampleRecord, SubpopKey, MASS_TOLERANCE};

/// Attempts per trial when drawing general-shifting mixing weights.
pub const MAX_ALPHA_DRAWS: usize = 1000;

/// Offset moving non-sensitive features off the original support.
pub const DEFAULT_OFFSET: f64 = 1e6;

/// SplitMix64 finalizer, used to derive independent per-trial seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of trial `i` under base seed `seed`.
pub fn trial_seed(seed: u64, i: u64) -> u64 {
    splitmix64(seed ^ splitmix64(i))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: [f64; 2],
    pub sigma: f64,
    pub weight: f64,
}

/// Two isotropic Gaussians labeled 0 and 1. The sensitive attribute is the
/// sign of coordinate 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureSpec {
    pub components: [GaussianComponent; 2],
}

impl Default for GaussianMixtureSpec {
    fn default() -> Self {
        Self {
            components: [
                GaussianComponent {
                    mean: [-2.0, -0.5],
                    sigma: 1.0,
                    weight: 0.5,
                },
                GaussianComponent {
                    mean: [2.0, 0.5],
                    sigma: 1.0,
                    weight: 0.5,
                },
            ],
        }
    }
}

impl GaussianMixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let [a, b] = &self.components;
        for c in [a, b] {
            if !(c.sigma >= 0.0) || !c.weight.is_finite() || c.weight < 0.0 || c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::InvalidDistribution(format!("bad mixture component {c:?}")));
            }
        }
        if (a.weight + b.weight - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidDistribution("mixture weights must sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSample {
    pub x: [f64; 2],
    pub s: usize,
    pub y: usize,
}

/// Sensitive bit of a feature vector: 1 when coordinate 1 is positive.
pub fn sensitive_bit(x: &[f64; 2]) -> usize {
    usize::from(x[1] > 0.0)
}

/// Draws `n` labeled samples; the label is the component index.
pub fn gen_gaussian_mixture(spec: &GaussianMixtureSpec, n: usize, seed: u64) -> Result<Vec<GaussianSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = (0..n)
        .map(|_| {
            let y = usize::from(rng.random::<f64>() >= spec.components[0].weight);
            let c = &spec.components[y];
            let z0: f64 = StandardNormal.sample(&mut rng);
            let z1: f64 = StandardNormal.sample(&mut rng);
            let x = [c.mean[0] + c.sigma * z0, c.mean[1] + c.sigma * z1];
            GaussianSample {
                x,
                s: sensitive_bit(&x),
                y,
            }
        })
        .collect();
    Ok(out)
}

/// Fixed logistic scorer `Pr[y = 1 | x] = sigmoid(w . x + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearScorer {
    pub weights: [f64; 2],
    pub bias: f64,
}

impl Default for LinearScorer {
    fn default() -> Self {
        Self {
            weights: [4.0, 1.0],
            bias: 0.0,
        }
    }
}

impl LinearScorer {
    pub fn predict(&self, x: &[f64; 2]) -> Vec<f64> {
        let z = self.weights[0] * x[0] + self.weights[1] * x[1] + self.bias;
        let p1 = 1.0 / (1.0 + (-z).exp());
        vec![1.0 - p1, p1]
    }
}

/// Moves every non-sensitive feature (coordinate 0) by a constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisjointShift {
    pub offset: f64,
}

impl Default for DisjointShift {
    fn default() -> Self {
        Self { offset: DEFAULT_OFFSET }
    }
}

impl DisjointShift {
    pub fn apply(&self, x: &[f64; 2]) -> [f64; 2] {
        [x[0] + self.offset, x[1]]
    }
}

/// One sample's loss, plus its loss after the disjoint transform when known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSample {
    pub key: SubpopKey,
    pub loss: f64,
    pub shifted_loss: Option<f64>,
}

/// Scores Gaussian samples, on the original and on the shifted features.
pub fn score_gaussian(
    samples: &[GaussianSample],
    scorer: &LinearScorer,
    shift: &DisjointShift,
    kind: LossKind,
) -> Result<Vec<LossSample>> {
    samples
        .iter()
        .map(|g| {
            Ok(LossSample {
                key: SubpopKey::new(g.s, g.y),
                loss: compute_loss(&scorer.predict(&g.x), g.y, kind)?,
                shifted_loss: Some(compute_loss(&scorer.predict(&shift.apply(&g.x)), g.y, kind)?),
            })
        })
        .collect()
}

/// Loss-mode records for `aggregate_stats`.
pub fn to_records(samples: &[LossSample]) -> Vec<SampleRecord> {
    samples
        .iter()
        .map(|l| SampleRecord::with_loss(l.key.s, l.key.y, l.loss))
        .collect()
}

/// Per-cell loss pools of a 2x2 dataset, row-major in `(s, y)`.
#[derive(Debug, Clone)]
pub struct ShiftDataset {
    losses: [Vec<f64>; 4],
    shifted: Option<[Vec<f64>; 4]>,
}

impl ShiftDataset {
    pub fn new(samples: &[LossSample]) -> Result<Self> {
        let mut losses: [Vec<f64>; 4] = Default::default();
        let mut shifted: [Vec<f64>; 4] = Default::default();
        let mut all_shifted = true;
        for l in samples {
            if l.key.s >= 2 || l.key.y >= 2 {
                return Err(Error::KeyOutOfRange {
                    s: l.key.s,
                    y: l.key.y,
                    s_count: 2,
                    c_count: 2,
                });
            }
            let i = l.key.s * 2 + l.key.y;
            losses[i].push(l.loss);
            match l.shifted_loss {
                Some(v) => shifted[i].push(v),
                None => all_shifted = false,
            }
        }
        if samples.is_empty() {
            return Err(Error::InvalidTable("no samples".into()));
        }
        Ok(Self {
            losses,
            shifted: all_shifted.then_some(shifted),
        })
    }

    pub fn counts(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.losses[i].len())
    }

    /// Empirical cell proportions `p`.
    pub fn masses(&self) -> Vec<f64> {
        let c = self.counts();
        let n: usize = c.iter().sum();
        c.iter().map(|&v| v as f64 / n as f64).collect()
    }

    pub fn overall_loss(&self) -> f64 {
        let n: usize = self.counts().iter().sum();
        self.losses.iter().flatten().sum::<f64>() / n as f64
    }
}

/// One generated fair distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftTrial {
    pub seed: u64,
    /// Analytic Hellinger distance from the training distribution.
    pub distance: f64,
    /// Mean loss over the drawn sample.
    pub loss: f64,
    /// Number of samples drawn.
    pub n: usize,
    /// Cell masses of the generated distribution, row-major in `(s, y)`.
    pub q: Vec<f64>,
    /// Retained fraction per cell (general shifting only).
    pub alpha: Option<Vec<f64>>,
    /// Weight of the disjoint copy per cell (general shifting only).
    pub alpha_prime: Option<Vec<f64>>,
}

impl ShiftTrial {
    /// Scale of the sampling error of `loss` for losses in `[0, m]`.
    pub fn half_width(&self, m: f64) -> f64 {
        m / (2.0 * (self.n as f64).sqrt())
    }
}

/// A pool of losses to draw from and its share of the generated distribution.
struct Part<'a> {
    pool: &'a [f64],
    frac: f64,
    cell: usize,
}

/// Draws cell subsamples in proportion to `frac`. The binding pool, the one
/// needing the largest overall sample, is used in full; every other part
/// keeps at least one sample.
///
/// The returned loss weights each part's subsample mean by its exact share,
/// so count rounding does not move the loss away from the stated masses.
fn draw(parts: &[Part<'_>], rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let mut total = f64::INFINITY;
    let mut binding = usize::MAX;
    for (j, part) in parts.iter().enumerate() {
        if part.frac <= 0.0 {
            continue;
        }
        if part.pool.is_empty() {
            return Err(Error::SparseCell {
                s: part.cell / 2,
                y: part.cell % 2,
                n: 0,
            });
        }
        let cap = part.pool.len() as f64 / part.frac;
        if cap < total {
            total = cap;
            binding = j;
        }
    }
    let mut loss = 0.0;
    let mut weight = 0.0;
    let mut count = 0usize;
    for (j, part) in parts.iter().enumerate() {
        if part.frac <= 0.0 {
            continue;
        }
        let len = part.pool.len();
        let take = if j == binding {
            len
        } else {
            ((total * part.frac + 1e-9).floor() as usize).clamp(1, len)
        };
        let sum: f64 = index::sample(rng, len, take).into_iter().map(|i| part.pool[i]).sum();
        loss += part.frac * sum / take as f64;
        weight += part.frac;
        count += take;
    }
    if count == 0 {
        return Err(Error::MalformedProblem("generated distribution drew no samples".into()));
    }
    Ok((loss / weight, count))
}

fn check_fair(q: &[f64]) -> Result<()> {
    if q.len() != 4 {
        return Err(Error::LengthMismatch { left: q.len(), right: 4 });
    }
    MassVector::new(q.to_vec())?;
    for s in 0..2 {
        for y in 0..2 {
            let prod = (q[s * 2] + q[s * 2 + 1]) * (q[y] + q[2 + y]);
            if (q[s * 2 + y] - prod).abs() > 1e-9 {
                return Err(Error::MalformedProblem(format!("masses {q:?} do not have equal base rates")));
            }
        }
    }
    Ok(())
}

/// Sensitive-shifting trial with prescribed fair cell masses `q`.
pub fn sensitive_trial_from_q(data: &ShiftDataset, q: &[f64], seed: u64) -> Result<ShiftTrial> {
    check_fair(q)?;
    let p = data.masses();
    let distance = sensitive_shift_distance(&MassVector::new(p)?, &MassVector::new(q.to_vec())?)?;
    let parts: Vec<Part<'_>> = (0..4)
        .map(|i| Part {
            pool: &data.losses[i],
            frac: q[i],
            cell: i,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (loss, n) = draw(&parts, &mut rng)?;
    Ok(ShiftTrial {
        seed,
        distance,
        loss,
        n,
        q: q.to_vec(),
        alpha: None,
        alpha_prime: None,
    })
}

fn sensitive_trial(data: &ShiftDataset, seed: u64) -> Result<ShiftTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k: f64 = rng.random();
    let r: f64 = rng.random();
    let q = [k * r, k * (1.0 - r), (1.0 - k) * r, (1.0 - k) * (1.0 - r)];
    sensitive_trial_from_q(data, &q, rng.random())
        .map(|t| ShiftTrial { seed, ..t })
}

/// `n_trials` sensitive-shifting trials with `k, r` independent uniform.
pub fn gen_sensitive_trials(data: &ShiftDataset, n_trials: usize, seed: u64) -> Result<Vec<ShiftTrial>> {
    (0..n_trials as u64)
        .into_par_iter()
        .map(|i| sensitive_trial(data, trial_seed(seed, i)))
        .collect()
}

/// Cell masses of the mixture `alpha p + alpha' q'` when the disjoint copy
/// keeps the training proportions.
fn mixture_masses(p: &[f64], alpha: &[f64], alpha_prime: &[f64]) -> Vec<f64> {
    (0..4).map(|i| p[i] * (alpha[i] + alpha_prime[i])).collect()
}

/// General-shifting trial with prescribed mixing weights.
pub fn general_trial_from_alpha(
    data: &ShiftDataset,
    alpha: &[f64],
    alpha_prime: &[f64],
    seed: u64,
) -> Result<ShiftTrial> {
    let shifted = data
        .shifted
        .as_ref()
        .ok_or_else(|| Error::Schema("general shifting needs losses on the transformed samples".into()))?;
    for (name, v) in [("alpha", alpha), ("alpha'", alpha_prime)] {
        if v.len() != 4 {
            return Err(Error::LengthMismatch { left: v.len(), right: 4 });
        }
        if let Some(&bad) = v.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::OutOfRange {
                name,
                value: bad,
                range: "[0, 1]",
            });
        }
    }
    let p = data.masses();
    let q = mixture_masses(&p, alpha, alpha_prime);
    check_fair(&q)?;
    let distance = mixture_shift_distance(&MassVector::new(p.clone())?, alpha)?;
    let mut parts = Vec::with_capacity(8);
    for i in 0..4 {
        parts.push(Part {
            pool: &data.losses[i],
            frac: alpha[i] * p[i],
            cell: i,
        });
        parts.push(Part {
            pool: &shifted[i],
            frac: alpha_prime[i] * p[i],
            cell: i,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (loss, n) = draw(&parts, &mut rng)?;
    Ok(ShiftTrial {
        seed,
        distance,
        loss,
        n,
        q,
        alpha: Some(alpha.to_vec()),
        alpha_prime: Some(alpha_prime.to_vec()),
    })
}

/// Draws six weights uniformly and solves the parity and unit-mass
/// equalities for the remaining two, rejecting out-of-range solutions.
fn draw_alpha(p: &[f64], rng: &mut ChaCha8Rng) -> Result<([f64; 4], [f64; 4])> {
    for _ in 0..MAX_ALPHA_DRAWS {
        let alpha: [f64; 4] = std::array::from_fn(|_| rng.random());
        let ap00: f64 = rng.random();
        let ap01: f64 = rng.random();
        let a00 = p[0] * (alpha[0] + ap00);
        let a01 = p[1] * (alpha[1] + ap01);
        let rest = 1.0 - a00 - a01;
        if a01 <= 0.0 || rest < 0.0 {
            continue;
        }
        let ratio = a00 / a01;
        let a11 = rest / (1.0 + ratio);
        let a10 = ratio * a11;
        let ap10 = a10 / p[2] - alpha[2];
        let ap11 = a11 / p[3] - alpha[3];
        if (0.0..=1.0).contains(&ap10) && (0.0..=1.0).contains(&ap11) {
            return Ok((alpha, [ap00, ap01, ap10, ap11]));
        }
    }
    Err(Error::SamplingExhausted(MAX_ALPHA_DRAWS))
}

fn general_trial(data: &ShiftDataset, p: &[f64], seed: u64) -> Result<ShiftTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (alpha, alpha_prime) = draw_alpha(p, &mut rng)?;
    general_trial_from_alpha(data, &alpha, &alpha_prime, rng.random()).map(|t| ShiftTrial { seed, ..t })
}

/// `n_trials` general-shifting trials.
pub fn gen_general_trials(data: &ShiftDataset, n_trials: usize, seed: u64) -> Result<Vec<ShiftTrial>> {
    if data.shifted.is_none() {
        return Err(Error::Schema("general shifting needs losses on the transformed samples".into()));
    }
    let p = data.masses();
    if let Some(i) = p.iter().position(|&v| v == 0.0) {
        return Err(Error::SparseCell { s: i / 2, y: i % 2, n: 0 });
    }
    (0..n_trials as u64)
        .into_par_iter()
        .map(|i| general_trial(data, &p, trial_seed(seed, i)))
        .collect()
}

/// Certificate value at one radius; `None` when infeasible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub rho: f64,
    pub bound: Option<f64>,
}

/// Trials falling between two consecutive radii of the curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketGap {
    pub rho_lo: f64,
    pub rho_hi: f64,
    pub bound: f64,
    pub max_loss: f64,
    pub trials: usize,
}

impl BucketGap {
    pub fn gap(&self) -> f64 {
        self.bound - self.max_loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub max_violation: f64,
    pub violations: usize,
    pub tightness_gap: f64,
    /// Non-empty buckets in order of radius.
    #[serde(skip)]
    pub buckets: Vec<BucketGap>,
    /// Trials farther than the largest radius of the curve.
    #[serde(skip)]
    pub out_of_range: usize,
}

impl ValidationReport {
    /// Bucket whose radius range holds `distance`.
    pub fn bucket_of(&self, distance: f64) -> Option<&BucketGap> {
        self.buckets
            .iter()
            .find(|b| distance > b.rho_lo + BUCKET_TOL && distance <= b.rho_hi + BUCKET_TOL)
            .or_else(|| self.buckets.first().filter(|b| distance <= b.rho_hi + BUCKET_TOL))
    }
}

const BUCKET_TOL: f64 = 1e-9;

/// Piecewise-linear interpolation through the feasible points; constant
/// below the first one. `None` beyond the largest radius.
fn interpolate(feasible: &[(f64, f64)], rho: f64) -> Option<f64> {
    let (first, last) = (feasible[0], feasible[feasible.len() - 1]);
    if rho > last.0 + BUCKET_TOL {
        return None;
    }
    if rho <= first.0 {
        return Some(first.1);
    }
    if rho >= last.0 {
        return Some(last.1);
    }
    let j = feasible.partition_point(|&(r, _)| r < rho);
    let (r0, b0) = feasible[j - 1];
    let (r1, b1) = feasible[j];
    Some(b0 + (b1 - b0) * (rho - r0) / (r1 - r0))
}

/// Compares trial losses with a certificate curve.
pub fn validate(trials: &[ShiftTrial], curve: &[CurvePoint]) -> Result<ValidationReport> {
    validate_with_slack(trials, curve, |_| 0.0)
}

/// As [`validate`], with each trial's loss reduced by `slack(trial)` before
/// it is compared with the curve.
pub fn validate_with_slack(
    trials: &[ShiftTrial],
    curve: &[CurvePoint],
    slack: impl Fn(&ShiftTrial) -> f64,
) -> Result<ValidationReport> {
    if trials.is_empty() || curve.is_empty() {
        return Err(Error::MalformedProblem("validation needs trials and a curve".into()));
    }
    if curve.windows(2).any(|w| !(w[0].rho < w[1].rho)) {
        return Err(Error::MalformedProblem("curve radii must be strictly increasing".into()));
    }
    let feasible: Vec<(f64, f64)> = curve.iter().filter_map(|c| c.bound.map(|b| (c.rho, b))).collect();
    if feasible.is_empty() {
        return Err(Error::MalformedProblem("curve has no feasible point".into()));
    }
    let mut buckets: Vec<Option<BucketGap>> = vec![None; curve.len()];
    let mut max_violation = f64::NEG_INFINITY;
    let mut violations = 0;
    let mut out_of_range = 0;
    for t in trials {
        let Some(bound) = interpolate(&feasible, t.distance) else {
            out_of_range += 1;
            continue;
        };
        let v = t.loss - slack(t) - bound;
        max_violation = max_violation.max(v);
        if v > 0.0 {
            violations += 1;
        }
        let i = curve.partition_point(|c| c.rho + BUCKET_TOL < t.distance).min(curve.len() - 1);
        let b = buckets[i].get_or_insert(BucketGap {
            rho_lo: if i == 0 { 0.0 } else { curve[i - 1].rho },
            rho_hi: curve[i].rho,
            bound: interpolate(&feasible, curve[i].rho).unwrap_or(f64::NAN),
            max_loss: f64::NEG_INFINITY,
            trials: 0,
        });
        b.max_loss = b.max_loss.max(t.loss);
        b.trials += 1;
    }
    let buckets: Vec<BucketGap> = buckets.into_iter().flatten().collect();
    if buckets.is_empty() {
        return Err(Error::MalformedProblem("no trial lies within the curve's radius range".into()));
    }
    let tightness_gap = buckets.iter().map(BucketGap::gap).fold(f64::INFINITY, f64::min);
    Ok(ValidationReport {
        max_violation,
        violations,
        tightness_gap,
        buckets,
        out_of_range,
    })
}
