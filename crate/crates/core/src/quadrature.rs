//! Node tables for Gauss rules, cached per size.

use gauss_quad::{GaussHermite, GaussLegendre};
use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex, OnceLock};

pub type Rule = Arc<Vec<(f64, f64)>>;

fn cache(kind: u8, n: usize, build: impl FnOnce() -> Vec<(f64, f64)>) -> Rule {
    static TABLES: OnceLock<Mutex<HashMap<(u8, usize), Rule>>> = OnceLock::new();
    let tables = TABLES.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = tables.lock().expect("quadrature cache poisoned");
    guard.entry((kind, n)).or_insert_with(|| Arc::new(build())).clone()
}

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn legendre(n: usize) -> Rule {
    cache(0, n, || {
        let rule = GaussLegendre::new(NonZeroUsize::new(n).expect("node count must be positive"));
        let mut v: Vec<(f64, f64)> = rule.as_node_weight_pairs().to_vec();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    })
}

/// Gauss–Hermite nodes and weights for the weight e^{-x^2}.
pub fn hermite(n: usize) -> Rule {
    cache(1, n, || {
        let rule = GaussHermite::new(NonZeroUsize::new(n).expect("node count must be positive"));
        let mut v: Vec<(f64, f64)> = rule.as_node_weight_pairs().to_vec();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    })
}

/// ∫_a^b f with an n-point Gauss–Legendre rule.
pub fn integrate(a: f64, b: f64, n: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    legendre(n).iter().map(|&(x, w)| w * f(mid + half * x)).sum::<f64>() * half
}

/// Composite Gauss–Legendre over consecutive breakpoints.
pub fn integrate_panels(breaks: &[f64], n: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    breaks.windows(2).map(|w| integrate(w[0], w[1], n, &mut f)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn legendre_is_exact_for_polynomials() {
        let v = integrate(-1.0, 2.0, 8, |x| x.powi(9) - 3.0 * x * x);
        let exact = (2f64.powi(10) - 1.0) / 10.0 - (8.0 + 1.0);
        assert_relative_eq!(v, exact, max_relative = 1e-13);
    }

    #[test]
    fn hermite_weights_sum_to_sqrt_pi() {
        let s: f64 = hermite(30).iter().map(|p| p.1).sum();
        assert_relative_eq!(s, std::f64::consts::PI.sqrt(), max_relative = 1e-13);
        let m2: f64 = hermite(30).iter().map(|p| p.1 * p.0 * p.0).sum();
        assert_relative_eq!(m2, std::f64::consts::PI.sqrt() / 2.0, max_relative = 1e-12);
    }
}
