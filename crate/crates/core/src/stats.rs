//! Subpopulation loss statistics and group-fairness gaps.
//!
//! Everything the certifiers know about a model is a [`StatsTable`]: for each
//! (sensitive value `s`, label `y`) cell the sample count, the mean and
//! variance of the loss, and the cell's share of the training mass. Indices
//! are 0-based throughout.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for "sums to one" checks on masses and probability vectors.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Floor applied to the predicted probability of the true label in BCE.
pub const BCE_FLOOR: f64 = 1e-12;

/// A (sensitive value, label) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubpopKey {
    pub s: usize,
    pub y: usize,
}

impl SubpopKey {
    pub fn new(s: usize, y: usize) -> Self {
        Self { s, y }
    }
}

impl fmt::Display for SubpopKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(s={}, y={})", self.s, self.y)
    }
}

/// Per-sample observation: either a precomputed loss or a predicted
/// probability vector from which the loss is computed.
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Loss(f64),
    Prediction(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub key: SubpopKey,
    pub observation: Observation,
}

impl SampleRecord {
    pub fn with_loss(s: usize, y: usize, loss: f64) -> Self {
        Self {
            key: SubpopKey::new(s, y),
            observation: Observation::Loss(loss),
        }
    }

    pub fn with_prediction(s: usize, y: usize, prediction: Vec<f64>) -> Self {
        Self {
            key: SubpopKey::new(s, y),
            observation: Observation::Prediction(prediction),
        }
    }
}

/// A sample with a predicted class distribution, used by the DP/EO gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub key: SubpopKey,
    pub prediction: Vec<f64>,
}

/// Loss functions understood by the aggregator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Misclassification indicator, bounded by 1.
    ZeroOne,
    /// Binary cross-entropy `-ln p[label]`, unbounded.
    Bce,
    /// Jensen-Shannon divergence (base 2) to the one-hot label, bounded by 1.
    Jsd,
}

impl LossKind {
    /// Upper bound `M` on the loss, `None` when unbounded.
    pub fn loss_bound(self) -> Option<f64> {
        match self {
            LossKind::ZeroOne | LossKind::Jsd => Some(1.0),
            LossKind::Bce => None,
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zeroone" | "zero-one" | "error" => Ok(LossKind::ZeroOne),
            "bce" => Ok(LossKind::Bce),
            "jsd" => Ok(LossKind::Jsd),
            other => Err(Error::Unsupported(format!("unknown loss kind '{other}'"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            LossKind::ZeroOne => "zeroone",
            LossKind::Bce => "bce",
            LossKind::Jsd => "jsd",
        };
        f.write_str(name)
    }
}

/// Statistics of one (s, y) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubpopStats {
    /// Sample count. Zero is allowed for hand-built exact-statistics tables.
    pub n: u64,
    /// Mean loss `E_{s,y}`.
    pub mean: f64,
    /// Loss variance `V_{s,y}`.
    pub variance: f64,
    /// Population mass `p_{s,y}`.
    pub mass: f64,
}

impl SubpopStats {
    pub fn new(n: u64, mean: f64, variance: f64, mass: f64) -> Self {
        Self {
            n,
            mean,
            variance,
            mass,
        }
    }
}

/// Complete S x C grid of cell statistics plus the loss bound `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsTable {
    s_count: usize,
    c_count: usize,
    loss_bound: Option<f64>,
    cells: Vec<SubpopStats>,
}

impl StatsTable {
    /// Builds a table from row-major cells (`index = s * C + y`).
    pub fn new(
        s_count: usize,
        c_count: usize,
        loss_bound: Option<f64>,
        cells: Vec<SubpopStats>,
    ) -> Result<Self> {
        if s_count == 0 || c_count == 0 {
            return Err(Error::InvalidTable("S and C must be positive".into()));
        }
        if cells.len() != s_count * c_count {
            return Err(Error::InvalidTable(format!(
                "expected {} cells, found {}",
                s_count * c_count,
                cells.len()
            )));
        }
        if let Some(m) = loss_bound {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::InvalidTable(format!("loss bound M = {m} must be positive")));
            }
        }
        let mut total = 0.0;
        for (i, c) in cells.iter().enumerate() {
            let key = SubpopKey::new(i / c_count, i % c_count);
            if !(c.mean.is_finite() && c.variance.is_finite() && c.mass.is_finite()) {
                return Err(Error::InvalidTable(format!("non-finite statistic in cell {key}")));
            }
            if c.mean < 0.0 || c.variance < 0.0 {
                return Err(Error::InvalidTable(format!(
                    "cell {key}: mean and variance must be non-negative"
                )));
            }
            if !(0.0..=1.0).contains(&c.mass) {
                return Err(Error::InvalidTable(format!("cell {key}: mass {} outside [0,1]", c.mass)));
            }
            if let Some(m) = loss_bound {
                if c.mean > m + 1e-12 {
                    return Err(Error::InvalidTable(format!(
                        "cell {key}: mean {} exceeds loss bound {m}",
                        c.mean
                    )));
                }
            }
            total += c.mass;
        }
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidTable(format!("masses sum to {total}, expected 1")));
        }
        Ok(Self {
            s_count,
            c_count,
            loss_bound,
            cells,
        })
    }

    /// Convenience constructor from row-major mean/variance/mass slices with
    /// zero counts (exact-statistics mode).
    pub fn from_moments(
        s_count: usize,
        c_count: usize,
        loss_bound: Option<f64>,
        means: &[f64],
        variances: &[f64],
        masses: &[f64],
    ) -> Result<Self> {
        let n = s_count * c_count;
        if means.len() != n || variances.len() != n || masses.len() != n {
            return Err(Error::InvalidTable("moment slices must have S*C entries".into()));
        }
        let cells = (0..n)
            .map(|i| SubpopStats::new(0, means[i], variances[i], masses[i]))
            .collect();
        Self::new(s_count, c_count, loss_bound, cells)
    }

    pub fn s_count(&self) -> usize {
        self.s_count
    }

    pub fn c_count(&self) -> usize {
        self.c_count
    }

    pub fn loss_bound(&self) -> Option<f64> {
        self.loss_bound
    }

    /// Replaces the loss bound (e.g. a clip level for BCE).
    pub fn with_loss_bound(self, m: f64) -> Result<Self> {
        Self::new(self.s_count, self.c_count, Some(m), self.cells)
    }

    pub fn cells(&self) -> &[SubpopStats] {
        &self.cells
    }

    pub fn index(&self, s: usize, y: usize) -> usize {
        s * self.c_count + y
    }

    pub fn cell(&self, s: usize, y: usize) -> &SubpopStats {
        &self.cells[self.index(s, y)]
    }

    pub fn means(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.mean).collect()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.variance).collect()
    }

    pub fn masses(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.mass).collect()
    }

    pub fn total_count(&self) -> u64 {
        self.cells.iter().map(|c| c.n).sum()
    }

    /// Expected loss under the training distribution.
    pub fn overall_mean(&self) -> f64 {
        self.cells.iter().map(|c| c.mass * c.mean).sum()
    }
}

fn validate_prediction(prediction: &[f64]) -> Result<()> {
    if prediction.is_empty() {
        return Err(Error::InvalidDistribution("empty prediction".into()));
    }
    let mut sum = 0.0;
    for &v in prediction {
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidDistribution(format!("entry {v} outside [0,1]")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > MASS_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
    }
    Ok(())
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(prediction: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in prediction.iter().enumerate().skip(1) {
        if v > prediction[best] {
            best = i;
        }
    }
    best
}

fn xlog2_ratio(a: f64, b: f64) -> f64 {
    if a <= 0.0 {
        0.0
    } else {
        a * (a / b).log2()
    }
}

/// Loss of one prediction against its label.
pub fn compute_loss(prediction: &[f64], label: usize, kind: LossKind) -> Result<f64> {
    validate_prediction(prediction)?;
    if label >= prediction.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: prediction.len(),
        });
    }
    let loss = match kind {
        LossKind::ZeroOne => {
            if argmax(prediction) == label {
                0.0
            } else {
                1.0
            }
        }
        LossKind::Bce => -prediction[label].max(BCE_FLOOR).ln(),
        LossKind::Jsd => {
            let mut kl_pred = 0.0;
            let mut kl_onehot = 0.0;
            for (i, &p) in prediction.iter().enumerate() {
                let e = if i == label { 1.0 } else { 0.0 };
                let m = 0.5 * (p + e);
                kl_pred += xlog2_ratio(p, m);
                kl_onehot += xlog2_ratio(e, m);
            }
            (0.5 * (kl_pred + kl_onehot)).clamp(0.0, 1.0)
        }
    };
    Ok(loss)
}

fn check_key(key: SubpopKey, s_count: usize, c_count: usize) -> Result<()> {
    if key.s >= s_count || key.y >= c_count {
        return Err(Error::KeyOutOfRange {
            s: key.s,
            y: key.y,
            s_count,
            c_count,
        });
    }
    Ok(())
}

/// Mean and unbiased variance of a loss sample.
///
/// The variance equals the pairwise estimator
/// `1/(n(n-1)) * sum_{i<j} (l_i - l_j)^2`, evaluated through the identity
/// `sum_{i<j} (l_i - l_j)^2 = n * sum_i (l_i - mean)^2`.
pub fn mean_and_variance(losses: &[f64]) -> (f64, f64) {
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    if losses.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = losses.iter().map(|l| (l - mean) * (l - mean)).sum();
    (mean, ss / (n - 1.0))
}

/// Folds raw samples into a [`StatsTable`].
pub fn aggregate_stats(
    samples: &[SampleRecord],
    s_count: usize,
    c_count: usize,
    kind: LossKind,
) -> Result<StatsTable> {
    if s_count == 0 || c_count == 0 {
        return Err(Error::InvalidTable("S and C must be positive".into()));
    }
    let bound = kind.loss_bound();
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); s_count * c_count];
    for rec in samples {
        check_key(rec.key, s_count, c_count)?;
        let loss = match &rec.observation {
            Observation::Loss(l) => *l,
            Observation::Prediction(p) => {
                if p.len() != c_count {
                    return Err(Error::LengthMismatch {
                        left: p.len(),
                        right: c_count,
                    });
                }
                compute_loss(p, rec.key.y, kind)?
            }
        };
        if !loss.is_finite() || loss < 0.0 {
            return Err(Error::OutOfRange {
                name: "loss",
                value: loss,
                range: "[0, inf)",
            });
        }
        if let Some(m) = bound {
            if loss > m {
                return Err(Error::OutOfRange {
                    name: "loss",
                    value: loss,
                    range: "[0, M]",
                });
            }
        }
        buckets[rec.key.s * c_count + rec.key.y].push(loss);
    }
    let total = samples.len() as f64;
    let mut cells = Vec::with_capacity(buckets.len());
    for (i, losses) in buckets.iter().enumerate() {
        if losses.len() < 2 {
            return Err(Error::SparseCell {
                s: i / c_count,
                y: i % c_count,
                n: losses.len(),
            });
        }
        let (mean, variance) = mean_and_variance(losses);
        cells.push(SubpopStats::new(
            losses.len() as u64,
            mean,
            variance,
            losses.len() as f64 / total,
        ));
    }
    StatsTable::new(s_count, c_count, bound, cells)
}

fn check_binary(s_count: usize, c_count: usize, records: &[PredictionRecord]) -> Result<()> {
    if c_count != 2 {
        return Err(Error::Unsupported(format!(
            "DP/EO gaps are defined for binary labels, got C={c_count}"
        )));
    }
    for r in records {
        check_key(r.key, s_count, c_count)?;
        if r.prediction.len() != 2 {
            return Err(Error::LengthMismatch {
                left: r.prediction.len(),
                right: 2,
            });
        }
        validate_prediction(&r.prediction)?;
    }
    Ok(())
}

fn max_spread(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if hi >= lo {
        hi - lo
    } else {
        0.0
    }
}

/// Demographic-parity gap: `max_{i,j} |Pr[h=1 | s=i] - Pr[h=1 | s=j]|`.
pub fn dp_gap(records: &[PredictionRecord], s_count: usize, c_count: usize) -> Result<f64> {
    check_binary(s_count, c_count, records)?;
    let mut positive = vec![0u64; s_count];
    let mut total = vec![0u64; s_count];
    for r in records {
        total[r.key.s] += 1;
        if argmax(&r.prediction) == 1 {
            positive[r.key.s] += 1;
        }
    }
    if let Some(s) = total.iter().position(|&n| n == 0) {
        return Err(Error::EmptyGroup(s));
    }
    Ok(max_spread(
        positive
            .iter()
            .zip(&total)
            .map(|(&k, &n)| k as f64 / n as f64),
    ))
}

/// Equalized-odds gap: `max_{y,i,j} |Pr[h=1 | Y=y, s=i] - Pr[h=1 | Y=y, s=j]|`.
pub fn eo_gap(records: &[PredictionRecord], s_count: usize, c_count: usize) -> Result<f64> {
    check_binary(s_count, c_count, records)?;
    let mut positive = vec![0u64; s_count * 2];
    let mut total = vec![0u64; s_count * 2];
    for r in records {
        let i = r.key.s * 2 + r.key.y;
        total[i] += 1;
        if argmax(&r.prediction) == 1 {
            positive[i] += 1;
        }
    }
    if let Some(i) = total.iter().position(|&n| n == 0) {
        return Err(Error::SparseCell {
            s: i / 2,
            y: i % 2,
            n: 0,
        });
    }
    let gap = (0..2)
        .map(|y| {
            max_spread((0..s_count).map(|s| {
                let i = s * 2 + y;
                positive[i] as f64 / total[i] as f64
            }))
        })
        .fold(0.0, f64::max);
    Ok(gap)
}
