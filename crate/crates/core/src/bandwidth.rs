//! Rate-optimal anisotropic bandwidths and the matching variance bounds.
//!
//! With 1/β̄₃ = (1/(d−2)) Σ_{l≥3} 1/β_l the exponents are
//! a_l = β̄₃ / (β_l (2β̄₃ + d − 2)) for l ≥ 3, with a₁, a₂ strictly above the
//! same expression, and h_l(T) = (log T / T)^{a_l}.

use crate::error::{invalid, Result};
use crate::estimator::BandwidthVector;
use serde::{Deserialize, Serialize};

/// Largest admissible bandwidth after clipping.
pub const H_MAX: f64 = 0.499;

/// Relative lift of a₁, a₂ above their thresholds.
pub const DEFAULT_SLACK: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessSpec {
    pub beta: Vec<f64>,
    #[serde(rename = "L")]
    pub l: Vec<f64>,
}

impl SmoothnessSpec {
    pub fn new(beta: Vec<f64>, l: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.len() != l.len() {
            return invalid("beta and L must be nonempty and of equal length");
        }
        if beta.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
            return invalid("smoothness indices must be positive and finite");
        }
        if beta.windows(2).any(|w| w[0] > w[1]) {
            return invalid("smoothness indices must be sorted ascending");
        }
        if l.iter().any(|v| !(*v > 0.0)) {
            return invalid("Hölder radii must be positive");
        }
        Ok(Self { beta, l })
    }

    pub fn unit_radii(beta: Vec<f64>) -> Result<Self> {
        let l = vec![1.0; beta.len()];
        Self::new(beta, l)
    }

    pub fn isotropic(beta: f64, d: usize) -> Result<Self> {
        Self::unit_radii(vec![beta; d])
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    /// Harmonic mean over all d indices.
    pub fn harmonic_mean(&self) -> f64 {
        self.dim() as f64 / self.beta.iter().map(|b| 1.0 / b).sum::<f64>()
    }

    /// (1/2)(1/β₁ + 1/β₂) > 1/β̄₃.
    pub fn strictly_anisotropic(&self) -> Result<bool> {
        let b3 = harmonic_mean_beta3(self)?;
        Ok(0.5 * (1.0 / self.beta[0] + 1.0 / self.beta[1]) > 1.0 / b3)
    }
}

pub fn harmonic_mean_beta3(spec: &SmoothnessSpec) -> Result<f64> {
    let d = spec.dim();
    if d < 3 {
        return invalid(format!("need d ≥ 3, got {d}"));
    }
    Ok((d - 2) as f64 / spec.beta[2..].iter().map(|b| 1.0 / b).sum::<f64>())
}

/// 2β̄₃ / (2β̄₃ + d − 2).
pub fn rate_exponent(spec: &SmoothnessSpec) -> Result<f64> {
    let b3 = harmonic_mean_beta3(spec)?;
    Ok(2.0 * b3 / (2.0 * b3 + (spec.dim() - 2) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    LogRegime,
    NoLogRegime,
}

/// How a₁ and a₂ are placed above their thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "slack", rename_all = "snake_case")]
pub enum LeadingExponents {
    /// a_i = (1 + slack) · threshold_i.
    Slack(f64),
    /// a₁ = a₂ = (1 + slack) · max threshold.
    Equal(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthPlan {
    pub exponents: Vec<f64>,
    pub h: BandwidthVector,
    pub regime: Regime,
    pub clipped: bool,
}

pub fn exponent_thresholds(spec: &SmoothnessSpec) -> Result<Vec<f64>> {
    let b3 = harmonic_mean_beta3(spec)?;
    let denom = 2.0 * b3 + (spec.dim() - 2) as f64;
    Ok(spec.beta.iter().map(|b| b3 / (b * denom)).collect())
}

pub fn optimal_bandwidths(spec: &SmoothnessSpec, t: f64, slack: f64) -> Result<BandwidthPlan> {
    optimal_bandwidths_with(spec, t, LeadingExponents::Slack(slack))
}

pub fn optimal_bandwidths_with(spec: &SmoothnessSpec, t: f64, rule: LeadingExponents) -> Result<BandwidthPlan> {
    if !(t > std::f64::consts::E) {
        return invalid(format!("need T > e, got {t}"));
    }
    let mut a = exponent_thresholds(spec)?;
    match rule {
        LeadingExponents::Slack(s) | LeadingExponents::Equal(s) if !(s > 0.0) => {
            return invalid("slack must be positive");
        }
        LeadingExponents::Slack(s) => {
            a[0] *= 1.0 + s;
            a[1] *= 1.0 + s;
        }
        LeadingExponents::Equal(s) => {
            let v = (1.0 + s) * a[0].max(a[1]);
            a[0] = v;
            a[1] = v;
        }
    }
    let base = t.ln() / t;
    let mut clipped = false;
    let h: Vec<f64> = a
        .iter()
        .map(|ai| {
            let v = base.powf(*ai);
            if v > H_MAX {
                clipped = true;
                H_MAX
            } else {
                v
            }
        })
        .collect();
    let regime = regime_of(&h)?;
    Ok(BandwidthPlan { exponents: a, h: BandwidthVector::new(h)?, regime, clipped })
}

/// h = T^{−1/(2β + d − 2)} in every direction.
pub fn isotropic_bandwidth(beta: f64, d: usize, t: f64) -> Result<BandwidthVector> {
    if !(t > 1.0) {
        return invalid("need T > 1");
    }
    if d < 3 {
        return invalid("need d ≥ 3");
    }
    if !(beta > 0.0) {
        return invalid("beta must be positive");
    }
    let v = t.powf(-1.0 / (2.0 * beta + d as f64 - 2.0)).min(H_MAX);
    BandwidthVector::new(vec![v; d])
}

/// Log regime iff h₁h₂ < (∏_{l≥3} h_l)^{2/(d−2)}; equality goes to the
/// no-log side.
pub fn regime_of(h: &[f64]) -> Result<Regime> {
    let d = h.len();
    if d < 3 {
        return invalid("regime test needs d ≥ 3");
    }
    let rhs = h[2..].iter().product::<f64>().powf(2.0 / (d - 2) as f64);
    // Rounding in the power must not push an exact tie into the log regime.
    Ok(if h[0] * h[1] < rhs * (1.0 - 1e-12) { Regime::LogRegime } else { Regime::NoLogRegime })
}

/// c/T · Σ|log h_j| / ∏_{l≥3} h_l in the log regime, c/T / ∏_{l≥3} h_l
/// otherwise.
pub fn variance_bound(h: &BandwidthVector, t: f64, c: f64) -> Result<(f64, Regime)> {
    if !(t > 0.0) || !(c > 0.0) {
        return invalid("need T > 0 and c > 0");
    }
    let regime = regime_of(&h.h)?;
    let tail: f64 = h.h[2..].iter().product();
    let value = match regime {
        Regime::LogRegime => c / t * h.h.iter().map(|v| v.ln().abs()).sum::<f64>() / tail,
        Regime::NoLogRegime => c / t / tail,
    };
    Ok((value, regime))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn spec(b: &[f64]) -> SmoothnessSpec {
        SmoothnessSpec::unit_radii(b.to_vec()).unwrap()
    }

    #[test]
    fn harmonic_mean_examples() {
        assert_abs_diff_eq!(harmonic_mean_beta3(&spec(&[2.0; 3])).unwrap(), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(harmonic_mean_beta3(&spec(&[1.0, 2.0, 2.0, 4.0, 4.0])).unwrap(), 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(harmonic_mean_beta3(&spec(&[1.5, 2.0, 5.0])).unwrap(), 5.0, epsilon = 1e-15);
        assert!(harmonic_mean_beta3(&spec(&[1.5, 2.0])).is_err());
    }

    #[test]
    fn rate_examples() {
        assert_abs_diff_eq!(rate_exponent(&spec(&[2.0; 3])).unwrap(), 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(rate_exponent(&spec(&[1.0, 2.0, 2.0, 4.0, 4.0])).unwrap(), 2.0 / 3.0, epsilon = 1e-14);
        let r = rate_exponent(&spec(&[1.0, 1.0, 1e12])).unwrap();
        assert!(r < 1.0 && r > 1.0 - 1e-11);
    }

    #[test]
    fn exponent_examples() {
        let p = optimal_bandwidths(&spec(&[2.0; 3]), 1e6, 0.1).unwrap();
        assert_abs_diff_eq!(p.exponents[2], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(p.exponents[0], 0.22, epsilon = 1e-15);
        let s = spec(&[1.0, 2.0, 2.0, 4.0, 4.0]);
        let p = optimal_bandwidths(&s, 1e6, 0.1).unwrap();
        assert_abs_diff_eq!(p.exponents[2], 1.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.exponents[3], 1.0 / 12.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.exponents[4], 1.0 / 12.0, epsilon = 1e-15);
        let tail: f64 = p.exponents[2..].iter().sum();
        assert_abs_diff_eq!(2.0 * 2.0 * p.exponents[2], 1.0 - tail, epsilon = 1e-15);
        assert!(optimal_bandwidths(&s, 2.0, 0.1).is_err());
        assert!(optimal_bandwidths(&s, 10.0, 0.0).is_err());
    }

    #[test]
    fn equal_rule_sets_matching_leading_exponents() {
        let p = optimal_bandwidths_with(&spec(&[1.5, 2.0, 3.0]), 1e6, LeadingExponents::Equal(0.1)).unwrap();
        assert_eq!(p.exponents[0], p.exponents[1]);
    }

    #[test]
    fn isotropic_examples() {
        assert_abs_diff_eq!(isotropic_bandwidth(2.0, 3, 1e5).unwrap().h[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(isotropic_bandwidth(2.0, 4, 1e6).unwrap().h[0], 0.1, epsilon = 1e-15);
        assert_eq!(isotropic_bandwidth(1e15, 3, 1e6).unwrap().h[0], H_MAX);
        assert!(isotropic_bandwidth(2.0, 3, 1.0).is_err());
    }

    #[test]
    fn regime_examples() {
        let h = BandwidthVector::new(vec![1e-3, 1e-3, 10f64.powf(-0.5)]).unwrap();
        let (v, r) = variance_bound(&h, 100.0, 1.0).unwrap();
        assert_eq!(r, Regime::LogRegime);
        let expected = (2.0 * 1e-3f64.ln().abs() + 10f64.powf(-0.5).ln().abs()) / 100.0 / 10f64.powf(-0.5);
        assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
        let h = BandwidthVector::new(vec![0.4, 0.4, 0.01]).unwrap();
        assert_eq!(variance_bound(&h, 100.0, 1.0).unwrap().1, Regime::NoLogRegime);
        let h = BandwidthVector::new(vec![0.2; 4]).unwrap();
        assert_eq!(variance_bound(&h, 100.0, 1.0).unwrap().1, Regime::NoLogRegime);
    }

    #[test]
    fn plan_serializes_with_expected_keys() {
        let p = optimal_bandwidths(&spec(&[2.0; 3]), 1e6, 0.1).unwrap();
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        for key in ["exponents", "h", "regime", "clipped"] {
            assert!(v.get(key).is_some());
        }
        assert_eq!(v["regime"], "log_regime");
    }

    fn ascending(d: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
        d.prop_flat_map(|n| prop::collection::vec(1.0001f64..5.9999, n)).prop_map(|mut v| {
            v.sort_by(|a, b| a.total_cmp(b));
            v
        })
    }

    proptest! {
        #[test]
        fn balance_system_holds(beta in ascending(3..=6), t in 10.0f64..1e9) {
            let s = spec(&beta);
            let p = optimal_bandwidths(&s, t, 0.1).unwrap();
            let d = beta.len();
            for i in 2..d - 1 {
                prop_assert!((beta[i] * p.exponents[i] - beta[i + 1] * p.exponents[i + 1]).abs() < 1e-12);
            }
            let tail: f64 = p.exponents[2..].iter().sum();
            prop_assert!((2.0 * beta[d - 1] * p.exponents[d - 1] - (1.0 - tail)).abs() < 1e-12);
            prop_assert!(harmonic_mean_beta3(&s).unwrap() >= s.harmonic_mean() - 1e-12);
        }

        #[test]
        fn rate_is_monotone_in_tail_smoothness(beta in ascending(3..=6), bump in 0.0f64..3.0) {
            let s = spec(&beta);
            let mut up = beta.clone();
            let last = up.len() - 1;
            up[last] += bump;
            let r0 = rate_exponent(&s).unwrap();
            let r1 = rate_exponent(&spec(&up)).unwrap();
            prop_assert!(r1 >= r0 - 1e-15);
            prop_assert!(r0 > 0.0 && r0 < 1.0);
        }

        #[test]
        fn anisotropic_plans_sit_in_log_regime(beta in ascending(3..=6)) {
            let s = spec(&beta);
            prop_assume!(s.strictly_anisotropic().unwrap());
            for t in [1e3, 1e6, 1e9] {
                let p = optimal_bandwidths(&s, t, 0.1).unwrap();
                if !p.clipped {
                    prop_assert_eq!(p.regime, Regime::LogRegime);
                }
            }
        }
    }

    #[test]
    fn anisotropic_plan_without_clipping_is_log_regime() {
        let s = spec(&[1.1, 1.2, 1.5, 1.6]);
        assert!(s.strictly_anisotropic().unwrap());
        for t in [1e3, 1e6, 1e9] {
            let p = optimal_bandwidths(&s, t, 0.1).unwrap();
            assert!(!p.clipped);
            assert_eq!(p.regime, Regime::LogRegime);
        }
    }
}
