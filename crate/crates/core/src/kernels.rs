//! Polynomial kernels on [-1, 1] and the anisotropic product kernel.
//!
//! Estimation kernels are even polynomials built in the Legendre basis so
//! that the zeroth moment is one, the even moments up to the order vanish
//! and the kernel is zero at the endpoints. Odd moments vanish by symmetry.

use crate::error::{invalid, Result};
use crate::quadrature;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Estimation,
    Bump,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub order: usize,
    /// Monomial coefficients, lowest degree first.
    pub coefficients: Vec<f64>,
}

/// Monomial coefficients of the Legendre polynomials P_0..=P_n.
fn legendre_monomials(n: usize) -> Vec<Vec<f64>> {
    let mut p = vec![vec![1.0], vec![0.0, 1.0]];
    for k in 1..n {
        let kf = k as f64;
        let mut next = vec![0.0; k + 2];
        for (j, c) in p[k].iter().enumerate() {
            next[j + 1] += (2.0 * kf + 1.0) * c / (kf + 1.0);
        }
        for (j, c) in p[k - 1].iter().enumerate() {
            next[j] -= kf * c / (kf + 1.0);
        }
        p.push(next);
    }
    p.truncate(n + 1);
    p
}

fn horner(coefficients: &[f64], u: f64) -> f64 {
    coefficients.iter().rev().fold(0.0, |acc, c| acc * u + c)
}

/// ∫_{-1}^{1} u^k du.
fn power_integral(k: usize) -> f64 {
    if k % 2 == 1 {
        0.0
    } else {
        2.0 / (k as f64 + 1.0)
    }
}

pub fn build_estimation_kernel(order: usize) -> Result<KernelSpec> {
    if order == 0 {
        return invalid("kernel order must be at least 1");
    }
    let top = 2 * (order / 2) + 2;
    let basis = legendre_monomials(top);
    let even: Vec<usize> = (0..=top).step_by(2).collect();
    let n = even.len();
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    // Rows 0..n-1: moments of order 0, 2, .., top-2. Last row: value at u = 1.
    for (row, l) in (0..top - 1).step_by(2).enumerate() {
        for (col, &k) in even.iter().enumerate() {
            a[(row, col)] = basis[k].iter().enumerate().map(|(j, c)| c * power_integral(j + l)).sum();
        }
    }
    rhs[0] = 1.0;
    for col in 0..n {
        a[(n - 1, col)] = 1.0;
    }
    let c = a.lu().solve(&rhs).expect("moment system is nonsingular for every order");
    let mut coefficients = vec![0.0; top + 1];
    for (col, &k) in even.iter().enumerate() {
        for (j, b) in basis[k].iter().enumerate() {
            coefficients[j] += c[col] * b;
        }
    }
    Ok(KernelSpec { kind: KernelKind::Estimation, order, coefficients })
}

/// (1 - u^2)^4 (1 - 11 u^2): unit peak, zero mass, C^1 at the endpoints.
pub fn build_bump_kernel() -> KernelSpec {
    let q = [1.0, 0.0, -11.0];
    let base = [1.0, 0.0, -4.0, 0.0, 6.0, 0.0, -4.0, 0.0, 1.0];
    let mut coefficients = vec![0.0; base.len() + q.len() - 1];
    for (i, b) in base.iter().enumerate() {
        for (j, c) in q.iter().enumerate() {
            coefficients[i + j] += b * c;
        }
    }
    KernelSpec { kind: KernelKind::Bump, order: 0, coefficients }
}

impl KernelSpec {
    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        if u.abs() > 1.0 {
            0.0
        } else {
            horner(&self.coefficients, u)
        }
    }

    pub fn derivative(&self, u: f64) -> f64 {
        if u.abs() > 1.0 {
            return 0.0;
        }
        let d: Vec<f64> = self.coefficients.iter().enumerate().skip(1).map(|(j, c)| j as f64 * c).collect();
        horner(&d, u)
    }

    pub fn second_derivative(&self, u: f64) -> f64 {
        if u.abs() > 1.0 {
            return 0.0;
        }
        let d: Vec<f64> = self.coefficients.iter().enumerate().skip(2).map(|(j, c)| (j * (j - 1)) as f64 * c).collect();
        horner(&d, u)
    }

    /// ∫_{-1}^{1} K(u) u^l du by 64-node Gauss–Legendre.
    pub fn moment(&self, l: u32) -> f64 {
        quadrature::integrate(-1.0, 1.0, 64, |u| self.eval(u) * u.powi(l as i32))
    }

    /// ∫_{-1}^{t} K(u) du, exact from the coefficients.
    pub fn cumulative(&self, t: f64) -> f64 {
        let t = t.clamp(-1.0, 1.0);
        let anti = |x: f64| -> f64 {
            self.coefficients.iter().enumerate().rev().fold(0.0, |acc, (j, c)| acc * x + c / (j as f64 + 1.0)) * x
        };
        anti(t) - anti(-1.0)
    }

    /// max |K| over a regular grid.
    pub fn sup_norm(&self, points: usize) -> f64 {
        (0..=points).map(|i| self.eval(-1.0 + 2.0 * i as f64 / points as f64).abs()).fold(0.0, f64::max)
    }

    pub fn is_even(&self) -> bool {
        self.coefficients.iter().skip(1).step_by(2).all(|c| *c == 0.0)
    }
}

pub fn eval_kernel(spec: &KernelSpec, u: f64) -> f64 {
    spec.eval(u)
}

/// (∏ h_l)^{-1} ∏ K((x_m - y_m)/h_m).
pub fn eval_product_kernel(spec: &KernelSpec, h: &[f64], x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != h.len() || y.len() != h.len() {
        return invalid(format!("dimension mismatch: h has {}, x has {}, y has {}", h.len(), x.len(), y.len()));
    }
    if h.iter().any(|v| !(*v > 0.0)) {
        return invalid("bandwidths must be positive");
    }
    Ok(product_kernel_unchecked(spec, h, x, y))
}

#[inline]
pub(crate) fn product_kernel_unchecked(spec: &KernelSpec, h: &[f64], x: &[f64], y: &[f64]) -> f64 {
    let mut value = 1.0;
    for m in 0..h.len() {
        let u = (x[m] - y[m]) / h[m];
        if u.abs() > 1.0 {
            return 0.0;
        }
        value *= spec.eval(u) / h[m];
    }
    value
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn order_one_is_epanechnikov() {
        let k = build_estimation_kernel(1).unwrap();
        assert_abs_diff_eq!(k.coefficients[0], 0.75, epsilon = 1e-14);
        assert_abs_diff_eq!(k.coefficients[2], -0.75, epsilon = 1e-14);
        assert_abs_diff_eq!(eval_kernel(&k, 0.0), k.coefficients[0], epsilon = 0.0);
        assert_eq!(eval_kernel(&k, 2.0), 0.0);
        assert!(k.is_even());
    }

    #[test]
    fn moments_vanish_up_to_order() {
        for m in 1..=6 {
            let k = build_estimation_kernel(m).unwrap();
            assert_abs_diff_eq!(k.moment(0), 1.0, epsilon = 1e-10);
            for l in 1..=m as u32 {
                assert_abs_diff_eq!(k.moment(l), 0.0, epsilon = 1e-10);
            }
            assert_eq!(k.eval(1.5), 0.0);
            assert_abs_diff_eq!(k.eval(1.0), 0.0, epsilon = 1e-12);
            let s = k.sup_norm(10_000);
            assert!(s.is_finite() && s > 0.0);
        }
    }

    #[test]
    fn order_three_second_moment_vanishes() {
        let k = build_estimation_kernel(3).unwrap();
        assert_abs_diff_eq!(k.moment(2), 0.0, epsilon = 1e-12);
        // Order 3 needs a nonzero fourth moment, otherwise it would be order 5.
        assert!(k.moment(4).abs() > 1e-3);
    }

    #[test]
    fn bump_conditions() {
        let k = build_bump_kernel();
        assert_eq!(k.eval(0.0), 1.0);
        assert_abs_diff_eq!(k.moment(0), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(k.eval(1.0), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(k.eval(-1.0), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(k.derivative(1.0), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(k.derivative(-1.0), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(k.cumulative(1.0), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn cumulative_matches_quadrature() {
        let k = build_estimation_kernel(4).unwrap();
        for t in [-0.7, 0.0, 0.3, 0.99] {
            let q = quadrature::integrate(-1.0, t, 32, |u| k.eval(u));
            assert_abs_diff_eq!(k.cumulative(t), q, epsilon = 1e-13);
        }
    }

    #[test]
    fn product_kernel_examples() {
        let k = build_estimation_kernel(1).unwrap();
        let v = eval_product_kernel(&k, &[0.1; 3], &[0.2; 3], &[0.2; 3]).unwrap();
        assert_abs_diff_eq!(v, k.eval(0.0).powi(3) * 1000.0, epsilon = 1e-10);
        let v = eval_product_kernel(&k, &[0.1; 3], &[0.0; 3], &[0.11, 0.0, 0.0]).unwrap();
        assert_eq!(v, 0.0);
        let v = eval_product_kernel(&k, &[0.5], &[0.25], &[0.0]).unwrap();
        assert_abs_diff_eq!(v, k.eval(0.5) / 0.5, epsilon = 1e-15);
        assert!(eval_product_kernel(&k, &[0.1; 2], &[0.0; 3], &[0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn product_kernel_has_unit_mass(
            m in 1usize..=6,
            h in prop::collection::vec(0.001f64..0.4999, 1..=3),
        ) {
            let k = build_estimation_kernel(m).unwrap();
            let d = h.len();
            let rule = quadrature::legendre(16);
            let x = vec![0.3; d];
            let mut total = 0.0;
            let mut idx = vec![0usize; d];
            loop {
                let mut w = 1.0;
                let mut y = vec![0.0; d];
                for j in 0..d {
                    let (u, wu) = rule[idx[j]];
                    y[j] = x[j] + h[j] * u;
                    w *= wu * h[j];
                }
                total += w * eval_product_kernel(&k, &h, &x, &y).unwrap();
                let mut j = 0;
                while j < d {
                    idx[j] += 1;
                    if idx[j] < rule.len() { break; }
                    idx[j] = 0;
                    j += 1;
                }
                if j == d { break; }
            }
            prop_assert!((total - 1.0).abs() < 1e-8);
        }

        #[test]
        fn product_kernel_is_symmetric(
            x in prop::collection::vec(-1.0f64..1.0, 3),
            y in prop::collection::vec(-1.0f64..1.0, 3),
            m in 1usize..=6,
        ) {
            let k = build_estimation_kernel(m).unwrap();
            let h = [0.45, 0.3, 0.49];
            let a = eval_product_kernel(&k, &h, &x, &y).unwrap();
            let b = eval_product_kernel(&k, &h, &y, &x).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
