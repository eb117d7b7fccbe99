//! Concentration intervals for cell statistics and the Gramian bound on the
//! mean of a shifted bounded loss.

use serde::{Deserialize, Serialize};

use crate::error::{check_unit_open, Error, Result};
use crate::stats::StatsTable;

/// Guard on `M - E` denominators.
pub const GAP_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi, "interval [{lo}, {hi}] is reversed");
        Self { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

fn check_bound(m: f64) -> Result<()> {
    if m.is_finite() && m > 0.0 {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name: "M",
            value: m,
            range: "(0, inf)",
        })
    }
}

/// Hoeffding interval for a mean of `n` losses in `[0, M]`.
pub fn mean_interval(mean_hat: f64, n: u64, m: f64, delta: f64) -> Result<Interval> {
    check_unit_open("delta", delta)?;
    check_bound(m)?;
    if n == 0 {
        return Err(Error::OutOfRange {
            name: "n",
            value: 0.0,
            range: "[1, inf)",
        });
    }
    let half = m * ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt();
    Ok(Interval::new(
        (mean_hat - half).clamp(0.0, m),
        (mean_hat + half).clamp(0.0, m),
    ))
}

/// Interval for the standard deviation around the sample value `s_n`.
///
/// The upper end is also capped at `M/2`, the largest standard deviation a
/// `[0, M]`-valued variable can have.
pub fn std_interval(s_n: f64, n: u64, m: f64, delta: f64) -> Result<Interval> {
    check_unit_open("delta", delta)?;
    check_bound(m)?;
    if n < 2 {
        return Err(Error::OutOfRange {
            name: "n",
            value: n as f64,
            range: "[2, inf)",
        });
    }
    let half = m * (2.0 * (2.0 / delta).ln() / (n as f64 - 1.0)).sqrt();
    let hi = (s_n + half).min(m / 2.0);
    let lo = (s_n - half).max(0.0).min(hi);
    Ok(Interval::new(lo, hi))
}

/// Interval for a cell's mass `count / total`.
pub fn proportion_interval(count: u64, total: u64, delta: f64) -> Result<Interval> {
    check_unit_open("delta", delta)?;
    if total == 0 || count > total {
        return Err(Error::OutOfRange {
            name: "count",
            value: count as f64,
            range: "[0, total] with total >= 1",
        });
    }
    let center = count as f64 / total as f64;
    let half = ((2.0 / delta).ln() / (2.0 * total as f64)).sqrt();
    Ok(Interval::new(
        (center - half).clamp(0.0, 1.0),
        (center + half).clamp(0.0, 1.0),
    ))
}

fn check_moments(e: f64, v: f64, m: f64) -> Result<()> {
    check_bound(m)?;
    if !(e >= 0.0 && e <= m + 1e-12) {
        return Err(Error::OutOfRange {
            name: "E",
            value: e,
            range: "[0, M]",
        });
    }
    if !(v >= 0.0) {
        return Err(Error::OutOfRange {
            name: "V",
            value: v,
            range: "[0, inf)",
        });
    }
    Ok(())
}

/// `C = M - E - V / (M - E)`, with the `V = 0` limit taken exactly.
pub fn cell_constant(e: f64, v: f64, m: f64) -> f64 {
    let gap = m - e;
    if v == 0.0 {
        gap
    } else {
        gap - v / gap.max(GAP_FLOOR)
    }
}

/// Squared applicability radius `1 - (1 + (M-E)^2 / V)^(-1/2)`.
pub fn gamma_bar_sq(e: f64, v: f64, m: f64) -> Result<f64> {
    check_moments(e, v, m)?;
    Ok(gamma_bar_sq_unchecked(e, v, m))
}

pub(crate) fn gamma_bar_sq_unchecked(e: f64, v: f64, m: f64) -> f64 {
    let gap = (m - e).max(0.0);
    if v == 0.0 {
        return 1.0;
    }
    if gap == 0.0 {
        return 0.0;
    }
    (1.0 - (1.0 + gap * gap / v).powf(-0.5)).clamp(0.0, 1.0)
}

/// Upper bound on the mean loss of any distribution within Hellinger
/// distance `rho` of one with mean `E` and variance `V`, losses in `[0, M]`.
pub fn gramian_upper_bound(e: f64, v: f64, m: f64, rho: f64) -> Result<f64> {
    check_moments(e, v, m)?;
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::OutOfRange {
            name: "rho",
            value: rho,
            range: "[0, 1]",
        });
    }
    if rho == 0.0 {
        return Ok(e);
    }
    let r2 = rho * rho;
    let g = gamma_bar_sq_unchecked(e, v, m);
    if r2 > g + 1e-12 {
        return Err(Error::OutsideApplicabilityRadius {
            rho_sq: r2,
            gamma_bar_sq: g,
        });
    }
    let c = cell_constant(e, v, m);
    let c_rho = (r2 * (1.0 - r2) * (1.0 - r2) * (2.0 - r2)).sqrt();
    let bound = e + 2.0 * c_rho * v.sqrt() + r2 * (2.0 - r2) * c;
    Ok(bound.clamp(e, m.max(e)))
}

/// Confidence intervals for every cell of a table plus the derived
/// quantities the finite-sampling certifiers need.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalTable {
    pub delta: f64,
    pub m: f64,
    /// Intervals on `E`.
    pub mean: Vec<Interval>,
    /// Intervals on `sqrt(V)`.
    pub std: Vec<Interval>,
    /// Intervals on `p`.
    pub mass: Vec<Interval>,
    /// Lower `C`, from the upper mean and upper variance.
    pub c_lo: Vec<f64>,
    /// Upper `C`, from the lower mean and lower variance.
    pub c_hi: Vec<f64>,
    /// Upper applicability radius, from the lower mean and upper variance.
    pub gamma_bar_sq_hi: Vec<f64>,
}

impl IntervalTable {
    /// Builds intervals for every cell. Needs a finite `M` and `n >= 2`
    /// samples in each cell.
    pub fn from_stats(table: &StatsTable, delta: f64) -> Result<Self> {
        check_unit_open("delta", delta)?;
        let m = table.loss_bound().ok_or(Error::UnboundedLoss)?;
        let total = table.total_count();
        let cols = table.c_count();
        let mut out = Self {
            delta,
            m,
            mean: Vec::new(),
            std: Vec::new(),
            mass: Vec::new(),
            c_lo: Vec::new(),
            c_hi: Vec::new(),
            gamma_bar_sq_hi: Vec::new(),
        };
        for (i, cell) in table.cells().iter().enumerate() {
            if cell.n < 2 {
                return Err(Error::SparseCell {
                    s: i / cols,
                    y: i % cols,
                    n: cell.n as usize,
                });
            }
            let e = mean_interval(cell.mean, cell.n, m, delta)?;
            let sd = std_interval(cell.variance.sqrt(), cell.n, m, delta)?;
            let p = proportion_interval(cell.n, total, delta)?;
            let (v_lo, v_hi) = (sd.lo * sd.lo, sd.hi * sd.hi);
            out.c_lo.push(cell_constant(e.hi, v_hi, m));
            out.c_hi.push(cell_constant(e.lo, v_lo, m));
            out.gamma_bar_sq_hi.push(gamma_bar_sq_unchecked(e.lo, v_hi, m));
            out.mean.push(e);
            out.std.push(sd);
            out.mass.push(p);
        }
        Ok(out)
    }

    /// Lower/upper `p` bounds as two vectors.
    pub fn mass_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.mass.iter().map(|i| i.lo).collect(),
            self.mass.iter().map(|i| i.hi).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hellinger::{hellinger_discrete, MassVector};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mean_interval_examples() {
        let wide = mean_interval(0.5, 100, 1.0, 0.1).unwrap();
        assert_abs_diff_eq!((wide.hi - wide.lo) / 2.0, 0.122_387_341_534_040_83, epsilon = 1e-15);
        assert!(mean_interval(0.5, 1_000_000_000, 1.0, 0.1).unwrap().width() < 1e-4);
        assert_eq!(mean_interval(0.0, 10, 1.0, 0.1).unwrap().lo, 0.0);
        assert!(mean_interval(0.5, 0, 1.0, 0.1).is_err());
        assert!(mean_interval(0.5, 10, 1.0, 1.0).is_err());
    }

    #[test]
    fn std_interval_examples() {
        let i = std_interval(0.0, 2, 1.0, 0.1).unwrap();
        assert_eq!(i.lo, 0.0);
        // sqrt(2 ln 20) = 2.4477 exceeds M/2, so the cap applies
        assert_eq!(i.hi, 0.5);
        let m = 100.0;
        let w101 = std_interval(10.0, 101, m, 0.1).unwrap().width();
        let w401 = std_interval(10.0, 401, m, 0.1).unwrap().width();
        // both intervals are clipped at 0 from below; compare the upper halves
        let h101 = std_interval(10.0, 101, m, 0.1).unwrap().hi - 10.0;
        let h401 = std_interval(10.0, 401, m, 0.1).unwrap().hi - 10.0;
        assert!(w401 < w101);
        assert_abs_diff_eq!(h101 / h401, 2.0, epsilon = 1e-12);
        assert!(std_interval(0.2, 1_000_000_000, 1.0, 0.1).unwrap().width() < 1e-3);
        assert!(std_interval(0.2, 1, 1.0, 0.1).is_err());
    }

    #[test]
    fn proportion_interval_examples() {
        let i = proportion_interval(50, 100, 0.1).unwrap();
        assert_abs_diff_eq!((i.lo + i.hi) / 2.0, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!((i.hi - i.lo) / 2.0, 0.122_387_341_534_040_83, epsilon = 1e-15);
        assert_eq!(proportion_interval(0, 100, 0.1).unwrap().lo, 0.0);
        let near_one = proportion_interval(50, 100, 1.0 - 1e-12).unwrap();
        assert_abs_diff_eq!(near_one.hi - 0.5, (2f64.ln() / 200.0).sqrt(), epsilon = 1e-9);
        assert!(proportion_interval(101, 100, 0.1).is_err());
    }

    #[test]
    fn gamma_bar_examples() {
        assert_eq!(gamma_bar_sq(0.3, 0.0, 1.0).unwrap(), 1.0);
        assert_eq!(gamma_bar_sq(1.0, 0.1, 1.0).unwrap(), 0.0);
        assert_abs_diff_eq!(
            gamma_bar_sq(0.2, 0.01, 1.0).unwrap(),
            0.875_965_265_410_791_5,
            epsilon = 1e-14
        );
        assert!(gamma_bar_sq(1.5, 0.01, 1.0).is_err());
    }

    #[test]
    fn gramian_examples() {
        assert_eq!(gramian_upper_bound(0.2, 0.01, 1.0, 0.0).unwrap(), 0.2);
        assert_abs_diff_eq!(
            gramian_upper_bound(0.0, 0.0, 1.0, 0.5f64.sqrt()).unwrap(),
            0.75,
            epsilon = 1e-15
        );
        let b = gramian_upper_bound(0.2, 0.01, 1.0, 0.1).unwrap();
        assert_abs_diff_eq!(b, 0.243_602_587_239_738_45, epsilon = 1e-14);
        // same value through the x = (1 - rho^2)^2 parameterization
        let x: f64 = (1.0 - 0.01f64).powi(2);
        let c = 1.0 - 0.2 - 0.01 / 0.8;
        let alt = 0.2 + c + 2.0 * (x * (1.0 - x)).sqrt() * 0.1 - x * c;
        assert_abs_diff_eq!(b, alt, epsilon = 1e-14);
        assert!(matches!(
            gramian_upper_bound(0.9, 0.05, 1.0, 0.9),
            Err(Error::OutsideApplicabilityRadius { .. })
        ));
        // E = M with V = 0 pins the bound at M
        assert_eq!(gramian_upper_bound(1.0, 0.0, 1.0, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn gramian_dominates_two_point_shifts() {
        // P: loss 0 w.p. 0.8, loss 0.6 w.p. 0.2 -> E=0.12, V=0.0576
        let (e, v, m) = (0.12, 0.0576, 1.0);
        let rho = 0.1;
        let b = gramian_upper_bound(e, v, m, rho).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = MassVector::new(vec![0.8, 0.2, 0.0]).unwrap();
        let losses = [0.0, 0.6, 1.0];
        let mut checked = 0;
        for _ in 0..100_000 {
            let a: f64 = rng.random();
            let c: f64 = rng.random::<f64>() * (1.0 - a);
            let q = MassVector::new(vec![a, c, 1.0 - a - c]).unwrap();
            if hellinger_discrete(&p, &q).unwrap() <= rho {
                let mean: f64 = q.as_slice().iter().zip(&losses).map(|(w, l)| w * l).sum();
                assert!(mean <= b + 1e-9, "mean {mean} > bound {b}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn interval_table_orders_derived_quantities() {
        let t = StatsTable::new(
            1,
            2,
            Some(1.0),
            vec![
                crate::stats::SubpopStats::new(400, 0.3, 0.04, 0.4),
                crate::stats::SubpopStats::new(600, 0.1, 0.01, 0.6),
            ],
        )
        .unwrap();
        let it = IntervalTable::from_stats(&t, 0.1).unwrap();
        for i in 0..2 {
            let exact = cell_constant(t.cells()[i].mean, t.cells()[i].variance, 1.0);
            assert!(it.c_lo[i] <= exact && exact <= it.c_hi[i]);
            assert!(it.mass[i].contains(t.cells()[i].mass));
        }
        let unbounded = StatsTable::new(1, 1, None, vec![crate::stats::SubpopStats::new(5, 1.0, 0.1, 1.0)]).unwrap();
        assert!(matches!(IntervalTable::from_stats(&unbounded, 0.1), Err(Error::UnboundedLoss)));
    }

    proptest! {
        #[test]
        fn gramian_monotone_and_bracketed(
            e in 0.0f64..1.0,
            sd in 0.0f64..0.5,
            t1 in 0.0f64..1.0,
            t2 in 0.0f64..1.0,
        ) {
            let m = 1.0;
            let v = sd * sd;
            let g = gamma_bar_sq(e, v, m).unwrap();
            let (a, b) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let r1 = (a * g).sqrt();
            let r2 = (b * g).sqrt();
            let b1 = gramian_upper_bound(e, v, m, r1).unwrap();
            let b2 = gramian_upper_bound(e, v, m, r2).unwrap();
            prop_assert!(b1 <= b2 + 1e-12);
            prop_assert!(b1 >= e && b2 <= m);
        }

        #[test]
        fn gramian_dominates_finite_shifts(
            raw_p in prop::collection::vec(0.01f64..1.0, 2..8),
            raw_l in prop::collection::vec(0.0f64..1.0, 8),
            seed in 0u64..1000,
        ) {
            let k = raw_p.len();
            let tp: f64 = raw_p.iter().sum();
            let p: Vec<f64> = raw_p.iter().map(|w| w / tp).collect();
            let losses = &raw_l[..k];
            let e: f64 = p.iter().zip(losses).map(|(w, l)| w * l).sum();
            let v: f64 = p.iter().zip(losses).map(|(w, l)| w * (l - e) * (l - e)).sum();
            let g = gamma_bar_sq(e, v, 1.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rho = g.sqrt() * rng.random::<f64>();
            let bound = gramian_upper_bound(e, v, 1.0, rho).unwrap();
            let pm = MassVector::new(p.clone()).unwrap();
            for _ in 0..200 {
                let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
                let tr: f64 = raw.iter().sum();
                let t: f64 = rng.random();
                let q: Vec<f64> = p.iter().zip(&raw).map(|(a, b)| (1.0 - t) * a + t * b / tr).collect();
                let qm = MassVector::new(q.clone()).unwrap();
                if hellinger_discrete(&pm, &qm).unwrap() <= rho {
                    let mean: f64 = q.iter().zip(losses).map(|(w, l)| w * l).sum();
                    prop_assert!(mean <= bound + 1e-9);
                }
            }
        }
    }
}
