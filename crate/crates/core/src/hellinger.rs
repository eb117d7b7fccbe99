//! Hellinger distances between discrete distributions and the closed forms
//! used by the shift simulator.

use crate::error::{Error, Result};
use crate::stats::MASS_TOLERANCE;

/// Non-negative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct MassVector(Vec<f64>);

impl MassVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let mut total = 0.0;
        for &w in &weights {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidDistribution(format!("weight {w} is negative or non-finite")));
            }
            total += w;
        }
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("weights sum to {total}")));
        }
        Ok(Self(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl AsRef<[f64]> for MassVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

/// `sqrt(max(0, min(1, 1 - affinity)))`.
fn from_affinity(affinity: f64) -> f64 {
    (1.0 - affinity).clamp(0.0, 1.0).sqrt()
}

/// Bhattacharyya coefficient `sum sqrt(p_i q_i)`.
pub fn affinity(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a * b).sqrt()).sum()
}

/// `H(p, q) = sqrt(1/2 sum (sqrt p_i - sqrt q_i)^2)`.
pub fn hellinger_discrete(p: &MassVector, q: &MassVector) -> Result<f64> {
    same_len(p.len(), q.len())?;
    let half_sq: f64 = p
        .0
        .iter()
        .zip(&q.0)
        .map(|(a, b)| {
            let d = a.sqrt() - b.sqrt();
            d * d
        })
        .sum::<f64>()
        * 0.5;
    Ok(half_sq.clamp(0.0, 1.0).sqrt())
}

/// Distance between `sum p_i P_i` and `sum q_i Q_i` where `H(P_i, Q_i) = h_i`
/// and components have mutually disjoint supports.
pub fn compose_hellinger(p: &MassVector, q: &MassVector, sub_distances: &[f64]) -> Result<f64> {
    same_len(p.len(), q.len())?;
    same_len(p.len(), sub_distances.len())?;
    let mut aff = 0.0;
    for ((a, b), &h) in p.0.iter().zip(&q.0).zip(sub_distances) {
        if !(0.0..=1.0).contains(&h) {
            return Err(Error::OutOfRange {
                name: "sub-distance",
                value: h,
                range: "[0, 1]",
            });
        }
        aff += (a * b).sqrt() * (1.0 - h * h);
    }
    Ok(from_affinity(aff))
}

/// Distance when only the cell proportions move: `sqrt(1 - sum sqrt(p q))`.
pub fn sensitive_shift_distance(p: &MassVector, q: &MassVector) -> Result<f64> {
    same_len(p.len(), q.len())?;
    Ok(from_affinity(affinity(&p.0, &q.0)))
}

/// Distance when each cell keeps a fraction `alpha` of its original samples
/// and fills the rest from a disjoint copy: `sqrt(1 - sum sqrt(alpha) p)`.
pub fn mixture_shift_distance(p: &MassVector, alpha: &[f64]) -> Result<f64> {
    same_len(p.len(), alpha.len())?;
    let mut aff = 0.0;
    for (&w, &a) in p.0.iter().zip(alpha) {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::OutOfRange {
                name: "alpha",
                value: a,
                range: "[0, 1]",
            });
        }
        aff += a.sqrt() * w;
    }
    Ok(from_affinity(aff))
}

/// `(W2, H)` between two isotropic unit-variance Gaussians whose means
/// differ by a vector of norm `delta_norm`.
pub fn gaussian_shift_distances(delta_norm: f64) -> Result<(f64, f64)> {
    if !(delta_norm >= 0.0) {
        return Err(Error::OutOfRange {
            name: "delta_norm",
            value: delta_norm,
            range: "[0, inf)",
        });
    }
    let h = (-(-delta_norm * delta_norm / 8.0).exp_m1()).clamp(0.0, 1.0).sqrt();
    Ok((delta_norm, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn mv(v: &[f64]) -> MassVector {
        MassVector::new(v.to_vec()).unwrap()
    }

    fn normalize(raw: &[f64]) -> Vec<f64> {
        let t: f64 = raw.iter().sum();
        raw.iter().map(|v| v / t).collect()
    }

    #[test]
    fn discrete_examples() {
        assert_eq!(hellinger_discrete(&mv(&[0.3, 0.7]), &mv(&[0.3, 0.7])).unwrap(), 0.0);
        assert_abs_diff_eq!(
            hellinger_discrete(&mv(&[1.0, 0.0]), &mv(&[0.0, 1.0])).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        // 1/2 [(1 - sqrt .5)^2 + .5] = 1 - sqrt .5
        let h = hellinger_discrete(&mv(&[1.0, 0.0]), &mv(&[0.5, 0.5])).unwrap();
        assert_abs_diff_eq!(h, 0.541_196_100_146_197, epsilon = 1e-12);
        assert!(hellinger_discrete(&mv(&[1.0]), &mv(&[0.5, 0.5])).is_err());
        assert!(MassVector::new(vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn composition_limits() {
        let p = mv(&[0.25; 4]);
        assert_eq!(compose_hellinger(&p, &p, &[0.0; 4]).unwrap(), 0.0);
        assert_eq!(compose_hellinger(&p, &p, &[1.0; 4]).unwrap(), 1.0);
        assert!(compose_hellinger(&p, &p, &[1.5, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn shift_distance_examples() {
        let p = mv(&[0.25; 4]);
        assert_eq!(sensitive_shift_distance(&p, &p).unwrap(), 0.0);
        let q = mv(&[1.0, 0.0, 0.0, 0.0]);
        assert_abs_diff_eq!(
            sensitive_shift_distance(&p, &q).unwrap(),
            0.5f64.sqrt(),
            epsilon = 1e-15
        );
        assert_eq!(mixture_shift_distance(&p, &[1.0; 4]).unwrap(), 0.0);
        assert_eq!(mixture_shift_distance(&p, &[0.0; 4]).unwrap(), 1.0);
        assert_abs_diff_eq!(
            mixture_shift_distance(&p, &[0.25; 4]).unwrap(),
            0.5f64.sqrt(),
            epsilon = 1e-15
        );
        assert!(mixture_shift_distance(&p, &[1.1, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn gaussian_examples() {
        assert_eq!(gaussian_shift_distances(0.0).unwrap(), (0.0, 0.0));
        assert!(gaussian_shift_distances(100.0).unwrap().1 > 0.999_999);
        let (w, h) = gaussian_shift_distances(2.0).unwrap();
        assert_eq!(w, 2.0);
        // 1 - e^{-1/2} = 0.393469340287366...
        assert_abs_diff_eq!(h, 0.393_469_340_287_366_6f64.sqrt(), epsilon = 1e-14);
        assert!(gaussian_shift_distances(-1.0).is_err());
    }

    /// Flatten disjoint components `P_i` (supports of size `m`) into one joint.
    fn flatten(weights: &[f64], comps: &[Vec<f64>]) -> Vec<f64> {
        weights
            .iter()
            .zip(comps)
            .flat_map(|(w, c)| c.iter().map(move |v| w * v))
            .collect()
    }

    proptest! {
        #[test]
        fn composition_matches_flattened_joint(
            pw in prop::collection::vec(0.01f64..1.0, 4),
            qw in prop::collection::vec(0.01f64..1.0, 4),
            pc in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 4),
            qc in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 4),
        ) {
            let pw = normalize(&pw);
            let qw = normalize(&qw);
            let pc: Vec<Vec<f64>> = pc.iter().map(|c| normalize(c)).collect();
            let qc: Vec<Vec<f64>> = qc.iter().map(|c| normalize(c)).collect();
            let subs: Vec<f64> = pc
                .iter()
                .zip(&qc)
                .map(|(a, b)| hellinger_discrete(&mv(a), &mv(b)).unwrap())
                .collect();
            let composed = compose_hellinger(&mv(&pw), &mv(&qw), &subs).unwrap();
            let joint = hellinger_discrete(&mv(&flatten(&pw, &pc)), &mv(&flatten(&qw, &qc))).unwrap();
            prop_assert!((composed - joint).abs() <= 1e-12);
            let plain = sensitive_shift_distance(&mv(&pw), &mv(&qw)).unwrap();
            prop_assert_eq!(compose_hellinger(&mv(&pw), &mv(&qw), &[0.0; 4]).unwrap(), plain);
        }

        #[test]
        fn metric_properties(
            a in prop::collection::vec(0.001f64..1.0, 5),
            b in prop::collection::vec(0.001f64..1.0, 5),
            c in prop::collection::vec(0.001f64..1.0, 5),
        ) {
            let (a, b, c) = (mv(&normalize(&a)), mv(&normalize(&b)), mv(&normalize(&c)));
            let ab = hellinger_discrete(&a, &b).unwrap();
            prop_assert_eq!(ab, hellinger_discrete(&b, &a).unwrap());
            let ac = hellinger_discrete(&a, &c).unwrap();
            let cb = hellinger_discrete(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn mixture_monotone_in_alpha(
            p in prop::collection::vec(0.01f64..1.0, 4),
            alpha in prop::collection::vec(0.0f64..1.0, 4),
            idx in 0usize..4,
            bump in 0.0f64..1.0,
        ) {
            let p = mv(&normalize(&p));
            let base = mixture_shift_distance(&p, &alpha).unwrap();
            let mut more = alpha.clone();
            more[idx] = (more[idx] + bump).min(1.0);
            let after = mixture_shift_distance(&p, &more).unwrap();
            prop_assert!(base <= 1.0);
            prop_assert!(after <= base + 1e-15);
        }

        #[test]
        fn gaussian_monotone(a in 0.0f64..50.0, b in 0.0f64..50.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let h_lo = gaussian_shift_distances(lo).unwrap().1;
            let h_hi = gaussian_shift_distances(hi).unwrap().1;
            prop_assert!(h_lo <= h_hi);
            prop_assert!(h_hi < 1.0 || hi > 10.0);
        }
    }
}
