//! Certificates when only the (group, label) proportions shift.
//!
//! A fair test distribution has cell masses `q_{s,y} = k_s r_y`; under a
//! proportion-only shift its distance to `P` is `sqrt(1 - sum sqrt(p q))` and
//! its expected loss is `sum k_s r_y E_{s,y}`. Maximizing the latter gives a
//! bound that the returned `(k, r)` attains.

use crate::bounds::IntervalTable;
use crate::certificate::{union_confidence, Certificate, Diagnostics, Scenario, SkewOptions};
use crate::error::{check_rho, check_unit_open, Result};
use crate::solver::{maximize_bilinear_simplex, min_feasible_rho, BilinearProblem, SolveStatus};
use crate::stats::StatsTable;

fn boxes(skew: &SkewOptions) -> (Option<(Vec<f64>, Vec<f64>)>, Option<(Vec<f64>, Vec<f64>)>) {
    let mk = |(lo, hi): (f64, f64)| (vec![lo; 2], vec![hi; 2]);
    (skew.delta_s.map(|_| mk(skew.k_range())), skew.delta_l.map(|_| mk(skew.r_range())))
}

fn certify(
    stats: &StatsTable,
    rho: f64,
    skew: &SkewOptions,
    e: &[f64],
    p_intervals: Option<(Vec<f64>, Vec<f64>)>,
    confidence: f64,
) -> Result<Certificate> {
    check_rho(rho)?;
    skew.validate(stats.s_count(), stats.c_count())?;
    let masses = stats.masses();
    let (k_box, r_box) = boxes(skew);
    let with_p = p_intervals.is_some();
    let prob = BilinearProblem {
        s_count: stats.s_count(),
        c_count: stats.c_count(),
        e,
        p: &masses,
        rho,
        k_box,
        r_box,
        p_intervals,
    };
    let report = maximize_bilinear_simplex(&prob)?;
    let rho_min = min_feasible_rho(&prob)?;
    let feasible = report.status != SolveStatus::Infeasible;
    let (s, c) = (stats.s_count(), stats.c_count());
    let (k, r, p) = if feasible {
        let k = report.argmax[..s].to_vec();
        let r = report.argmax[s..s + c].to_vec();
        let p = with_p.then(|| report.argmax[s + c..].to_vec());
        (k, r, p)
    } else {
        (Vec::new(), Vec::new(), None)
    };
    Ok(Certificate {
        scenario: Scenario::Sensitive,
        rho,
        feasible,
        value: feasible.then_some(report.value),
        k,
        r,
        confidence,
        min_feasible_rho: rho_min,
        diagnostics: Diagnostics::new(report.status, report.iterations, report.violation, report.heuristic_global),
        p,
        granularity: None,
        winning_cell: None,
        x: None,
    })
}

/// Worst-case expected loss over fair proportion shifts within `rho`.
///
/// Needs only the cell means, so unbounded losses are accepted.
pub fn certify_sensitive(stats: &StatsTable, rho: f64, skew: SkewOptions) -> Result<Certificate> {
    certify(stats, rho, &skew, &stats.means(), None, 1.0)
}

/// Finite-sample version: upper confidence means in the objective and the
/// training masses free within their confidence intervals. Holds with
/// probability at least `1 - 2 S C delta` (reported as zero when negative).
pub fn certify_sensitive_fs(stats: &StatsTable, rho: f64, delta: f64, skew: SkewOptions) -> Result<Certificate> {
    check_unit_open("delta", delta)?;
    let confidence = union_confidence(2 * stats.s_count() * stats.c_count(), delta);
    let intervals = IntervalTable::from_stats(stats, delta)?;
    let e_hi: Vec<f64> = intervals.mean.iter().map(|i| i.hi).collect();
    certify(stats, rho, &skew, &e_hi, Some(intervals.mass_bounds()), confidence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hellinger::{sensitive_shift_distance, MassVector};
    use crate::solver::water_fill;
    use crate::stats::SubpopStats;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn table(e: [f64; 4], p: [f64; 4]) -> StatsTable {
        StatsTable::from_moments(2, 2, Some(1.0), &e, &[0.01; 4], &p).unwrap()
    }

    fn counted(e: [f64; 4], counts: [u64; 4]) -> StatsTable {
        let total: u64 = counts.iter().sum();
        let cells = (0..4)
            .map(|i| SubpopStats::new(counts[i], e[i], 0.02, counts[i] as f64 / total as f64))
            .collect();
        StatsTable::new(2, 2, Some(1.0), cells).unwrap()
    }

    #[test]
    fn constant_loss() {
        let t = table([0.25; 4], [0.1, 0.2, 0.3, 0.4]);
        let c = certify_sensitive(&t, 0.3, SkewOptions::none()).unwrap();
        assert!(c.feasible);
        assert_abs_diff_eq!(c.value.unwrap(), 0.25, epsilon = 1e-12);
        assert_eq!(c.confidence, 1.0);
    }

    #[test]
    fn uniform_masses_reach_the_worst_cell() {
        let t = table([0.1, 0.2, 0.3, 0.4], [0.25; 4]);
        let c = certify_sensitive(&t, 0.8, SkewOptions::none()).unwrap();
        assert_abs_diff_eq!(c.value.unwrap(), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn zero_skew_pins_k() {
        let t = table([0.1, 0.2, 0.3, 0.4], [0.25; 4]);
        let c = certify_sensitive(&t, 0.8, SkewOptions::sensitive(0.0)).unwrap();
        assert_abs_diff_eq!(c.k[0], 0.5, epsilon = 1e-15);
        // max over r of sum_y r_y (E_0y + E_1y) / 2 with r on the simplex
        let reduced = (0..=10_000)
            .map(|i| {
                let r0 = i as f64 / 10_000.0;
                let a = 2.0 * 0.125f64.sqrt() * (r0.sqrt() + (1.0 - r0).sqrt());
                if a >= 1.0 - 0.64 {
                    r0 * 0.2 + (1.0 - r0) * 0.3
                } else {
                    f64::NEG_INFINITY
                }
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert_abs_diff_eq!(c.value.unwrap(), 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(c.value.unwrap(), reduced, epsilon = 1e-6);
    }

    #[test]
    fn skew_needs_binary_dimension() {
        let t = StatsTable::from_moments(3, 2, Some(1.0), &[0.1; 6], &[0.0; 6], &[1.0 / 6.0; 6]).unwrap();
        assert!(certify_sensitive(&t, 0.5, SkewOptions::sensitive(0.5)).is_err());
    }

    #[test]
    fn diagonal_masses_are_infeasible_below_the_radius() {
        let t = table([0.1, 0.2, 0.3, 0.4], [0.9, 0.0, 0.0, 0.1]);
        let c = certify_sensitive(&t, 0.1, SkewOptions::none()).unwrap();
        assert!(!c.feasible);
        assert!(c.value.is_none());
        assert_abs_diff_eq!(c.min_feasible_rho, (1.0 - 0.9f64.sqrt()).sqrt(), epsilon = 1e-9);
        assert!(certify_sensitive(&t, 0.3, SkewOptions::none()).unwrap().feasible);
    }

    #[test]
    fn finite_sampling_converges_and_orders() {
        let e = [0.1, 0.35, 0.2, 0.05];
        let big = counted(e, [30_000_000, 20_000_000, 10_000_000, 40_000_000]);
        let exact = certify_sensitive(&big, 0.3, SkewOptions::none()).unwrap().value.unwrap();
        let fs = certify_sensitive_fs(&big, 0.3, 0.1, SkewOptions::none()).unwrap();
        assert_abs_diff_eq!(fs.confidence, 0.2, epsilon = 1e-12);
        assert!(fs.value.unwrap() >= exact - 1e-9);
        assert!(fs.value.unwrap() - exact <= 1e-3);

        let small = counted(e, [300, 200, 100, 400]);
        let exact = certify_sensitive(&small, 0.3, SkewOptions::none()).unwrap().value.unwrap();
        let fs_wide = certify_sensitive_fs(&small, 0.3, 0.01, SkewOptions::none()).unwrap().value.unwrap();
        let fs_narrow = certify_sensitive_fs(&small, 0.3, 0.1, SkewOptions::none()).unwrap().value.unwrap();
        assert!(fs_narrow >= exact - 1e-9);
        assert!(fs_wide >= fs_narrow - 1e-9);
        assert_eq!(certify_sensitive_fs(&small, 0.3, 0.2, SkewOptions::none()).unwrap().confidence, 0.0);
    }

    #[test]
    fn finite_sampling_matches_nested_grid() {
        let t = counted([0.3, 0.1, 0.05, 0.2], [120, 400, 300, 180]);
        let rho = 0.25;
        let cert = certify_sensitive_fs(&t, rho, 0.05, SkewOptions::none()).unwrap();
        let it = IntervalTable::from_stats(&t, 0.05).unwrap();
        let (plo, phi) = it.mass_bounds();
        let e_hi: Vec<f64> = it.mean.iter().map(|i| i.hi).collect();
        // Outer grid over (k0, r0); inner p by projected gradient ascent on
        // the box-and-simplex, independent of the water-filling path.
        let inner = |w: &[f64]| -> f64 {
            let mut p = vec![0.25; 4];
            let proj = |z: &mut Vec<f64>| {
                let (mut lo, mut hi) = (-2.0, 2.0);
                for _ in 0..100 {
                    let tau: f64 = 0.5 * (lo + hi);
                    let s: f64 = (0..4).map(|i| (z[i] - tau).clamp(plo[i], phi[i])).sum();
                    if s > 1.0 { lo = tau } else { hi = tau }
                }
                for i in 0..4 {
                    z[i] = (z[i] - 0.5 * (lo + hi)).clamp(plo[i], phi[i]);
                }
            };
            proj(&mut p);
            for it in 0..400 {
                let step = 0.02 / (1.0 + it as f64 * 0.05);
                let mut z: Vec<f64> = (0..4).map(|i| p[i] + step * 0.5 * (w[i] / p[i].max(1e-12)).sqrt()).collect();
                proj(&mut z);
                p = z;
            }
            (0..4).map(|i| (p[i] * w[i]).sqrt()).sum()
        };
        let mut best = f64::NEG_INFINITY;
        let n = 120;
        for i in 0..=n {
            for j in 0..=n {
                let (k0, r0) = (i as f64 / n as f64, j as f64 / n as f64);
                let k = [k0, 1.0 - k0];
                let r = [r0, 1.0 - r0];
                let w: Vec<f64> = (0..4).map(|c| k[c / 2] * r[c % 2]).collect();
                let v: f64 = (0..4).map(|c| w[c] * e_hi[c]).sum();
                if v > best && inner(&w) >= 1.0 - rho * rho - 1e-6 {
                    best = v;
                }
            }
        }
        let got = cert.value.unwrap();
        assert!(got >= best - 1e-6, "certificate {got} below grid {best}");
        assert!(got <= best + 1e-2, "certificate {got} far above grid {best}");
        // water-filling is the exact inner maximizer
        let k = &cert.k;
        let r = &cert.r;
        let w: Vec<f64> = (0..4).map(|c| k[c / 2] * r[c % 2]).collect();
        let wf = water_fill(&w, &plo, &phi);
        let a: f64 = (0..4).map(|c| (wf[c] * w[c]).sqrt()).sum();
        assert!(a >= inner(&w) - 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn certificate_is_attained(
            raw_p in prop::collection::vec(0.01f64..1.0, 4),
            e in prop::collection::vec(0.0f64..1.0, 4),
            rho in 0.05f64..1.0,
        ) {
            let t: f64 = raw_p.iter().sum();
            let p: Vec<f64> = raw_p.iter().map(|v| v / t).collect();
            let st = StatsTable::from_moments(2, 2, Some(1.0), &e, &[0.0; 4], &p).unwrap();
            let c = certify_sensitive(&st, rho, SkewOptions::none()).unwrap();
            if c.feasible {
                let q = c.q_star();
                let v: f64 = q.iter().zip(&e).map(|(a, b)| a * b).sum();
                prop_assert!((v - c.value.unwrap()).abs() <= 1e-9);
                for s in 0..2 {
                    for y in 0..2 {
                        let col: f64 = (0..2).map(|s2| q[s2 * 2 + y]).sum();
                        let row: f64 = (0..2).map(|y2| q[s * 2 + y2]).sum();
                        prop_assert!((q[s * 2 + y] - col * row).abs() <= 1e-9);
                    }
                }
                let d = sensitive_shift_distance(&MassVector::new(p.clone()).unwrap(), &MassVector::new(q).unwrap()).unwrap();
                prop_assert!(d <= rho + 1e-9);
            } else {
                prop_assert!(rho < c.min_feasible_rho + 1e-6);
            }
        }

        #[test]
        fn monotone_in_rho_and_skew(
            raw_p in prop::collection::vec(0.01f64..1.0, 4),
            e in prop::collection::vec(0.0f64..1.0, 4),
        ) {
            let t: f64 = raw_p.iter().sum();
            let p: Vec<f64> = raw_p.iter().map(|v| v / t).collect();
            let st = StatsTable::from_moments(2, 2, Some(1.0), &e, &[0.0; 4], &p).unwrap();
            let mut prev: Option<f64> = None;
            let mut seen_feasible = false;
            for i in 1..=10 {
                let c = certify_sensitive(&st, i as f64 / 10.0, SkewOptions::none()).unwrap();
                if seen_feasible {
                    prop_assert!(c.feasible);
                }
                if let Some(v) = c.value {
                    seen_feasible = true;
                    if let Some(pv) = prev {
                        prop_assert!(v >= pv - 1e-9);
                    }
                    prev = Some(v);
                }
            }
            let free = certify_sensitive(&st, 0.6, SkewOptions::none()).unwrap().value;
            let full = certify_sensitive(&st, 0.6, SkewOptions::sensitive(1.0)).unwrap().value;
            match (free, full) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-8),
                (a, b) => prop_assert_eq!(a.is_some(), b.is_some()),
            }
        }
    }
}
