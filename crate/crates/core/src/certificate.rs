//! Certificate records shared by both certifiers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::SolveStatus;

/// Union-bound confidence `1 - quantities * delta`, floored at zero. A zero
/// value means the per-quantity intervals hold individually but the bound
/// carries no joint guarantee.
pub(crate) fn union_confidence(quantities: usize, delta: f64) -> f64 {
    let c = 1.0 - quantities as f64 * delta;
    if c <= 0.0 {
        log::warn!("{quantities} intervals at delta = {delta} leave no joint confidence");
    }
    c.max(0.0)
}

/// Which family of test distributions a certificate covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Only the (group, label) proportions shift.
    Sensitive,
    /// Within-cell feature distributions may shift as well.
    General,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sensitive" => Ok(Scenario::Sensitive),
            "general" => Ok(Scenario::General),
            other => Err(Error::Unsupported(format!("unknown scenario '{other}'"))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::Sensitive => "sensitive",
            Scenario::General => "general",
        })
    }
}

/// Non-skewness limits on the test distribution's marginals.
///
/// `delta_s` confines the sensitive marginal `k` to `0.5 +- delta_s / 2`,
/// `delta_l` does the same for the label marginal `r`. Both need a binary
/// dimension.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SkewOptions {
    pub delta_s: Option<f64>,
    pub delta_l: Option<f64>,
}

impl SkewOptions {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn sensitive(delta: f64) -> Self {
        Self {
            delta_s: Some(delta),
            delta_l: None,
        }
    }

    pub fn label(delta: f64) -> Self {
        Self {
            delta_s: None,
            delta_l: Some(delta),
        }
    }

    pub fn validate(&self, s_count: usize, c_count: usize) -> Result<()> {
        for (name, value, dim) in [
            ("skew_s", self.delta_s, s_count),
            ("skew_y", self.delta_l, c_count),
        ] {
            if let Some(d) = value {
                if !(0.0..=1.0).contains(&d) {
                    return Err(Error::OutOfRange {
                        name,
                        value: d,
                        range: "[0, 1]",
                    });
                }
                if dim != 2 {
                    return Err(Error::Unsupported(format!(
                        "{name} needs a binary dimension, got {dim} values"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Box `[lo, hi]` for every entry of `k` (all of `[0,1]` when unset).
    pub fn k_range(&self) -> (f64, f64) {
        skew_range(self.delta_s)
    }

    /// Box `[lo, hi]` for every entry of `r`.
    pub fn r_range(&self) -> (f64, f64) {
        skew_range(self.delta_l)
    }
}

fn skew_range(delta: Option<f64>) -> (f64, f64) {
    match delta {
        Some(d) => ((0.5 - d / 2.0).max(0.0), (0.5 + d / 2.0).min(1.0)),
        None => (0.0, 1.0),
    }
}

/// Solver summary attached to a certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub status: SolveStatus,
    pub iterations: usize,
    pub violation: f64,
    /// True when global optimality rests on multi-start search only.
    pub heuristic_global: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells_total: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells_solved: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells_pruned: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells_infeasible: Option<usize>,
}

impl Diagnostics {
    pub fn new(status: SolveStatus, iterations: usize, violation: f64, heuristic_global: bool) -> Self {
        Self {
            status,
            iterations,
            violation,
            heuristic_global,
            cells_total: None,
            cells_solved: None,
            cells_pruned: None,
            cells_infeasible: None,
        }
    }
}

/// Grid cell that produced a general-shifting bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinningCell {
    /// Per-axis grid indices (partitioned axes only).
    pub index: Vec<usize>,
    pub k_lo: Vec<f64>,
    pub k_hi: Vec<f64>,
    pub r_lo: Vec<f64>,
    pub r_hi: Vec<f64>,
}

/// A worst-case loss bound at one radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub scenario: Scenario,
    pub rho: f64,
    pub feasible: bool,
    /// The bound; `None` when no fair distribution lies within `rho`.
    pub value: Option<f64>,
    pub k: Vec<f64>,
    pub r: Vec<f64>,
    pub confidence: f64,
    pub min_feasible_rho: f64,
    pub diagnostics: Diagnostics,
    /// Optimizing cell masses in finite-sampling mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<f64>>,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub granularity: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub winning_cell: Option<WinningCell>,
    /// Per-cell `x` values (rows indexed by `s`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<Vec<f64>>>,
}

impl Certificate {
    /// Worst-case test weights `q_{s,y} = k_s r_y` in row-major order.
    pub fn q_star(&self) -> Vec<f64> {
        self.k
            .iter()
            .flat_map(|&k| self.r.iter().map(move |&r| k * r))
            .collect()
    }
}
