//! Adjoint generator of the jump SDE and the drift that makes a prescribed
//! density stationary.
//!
//! A*g = A*_c g + A*_d g with
//! A*_c g = ½ Σ_ij (aaᵀ)_ij ∂_ij g − Σ_i (g ∂_i b^i + b^i ∂_i g) and
//! A*_d g = ∫ [g(x − γz) − g(x) + γz·∇g(x)] F(z) dz, split coordinatewise as
//! A*_{d,i} g = ∫ [g(x̄_i) − g(x̄_{i−1}) + (γz)_i ∂_i g(x)] F(z) dz where x̄_i
//! shifts the first i coordinates by −γz.
//!
//! The half-line integral of A*_{d,i} g inside b^i_g is evaluated by swapping
//! the w and z integrals: for each jump node the w integral collapses to
//! partial line integrals of g, which densities supply directly.

use crate::error::{invalid, Error, Result};
use crate::model::{tab_cell_centre, Drift, JumpLaw, JumpMeasureSpec, ModelSpec};
use crate::quadrature;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Smooth one-dimensional factor of a product density.
pub trait Marginal: Send + Sync {
    fn value(&self, y: f64) -> f64;
    fn d1(&self, y: f64) -> f64;
    fn d2(&self, y: f64) -> f64;
    /// ∫_{−∞}^t.
    fn lower(&self, t: f64) -> f64;
    /// ∫_t^∞.
    fn upper(&self, t: f64) -> f64;
    fn mass(&self) -> f64 {
        self.lower(0.0) + self.upper(0.0)
    }
    /// Points where the marginal changes character, used to split panels of
    /// one-dimensional rules.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// Unnormalised exp(−(y−m)²/(2σ²)).
#[derive(Debug, Clone, Copy)]
pub struct GaussianMarginal {
    pub mean: f64,
    pub sd: f64,
}

impl Marginal for GaussianMarginal {
    fn value(&self, y: f64) -> f64 {
        let u = (y - self.mean) / self.sd;
        (-0.5 * u * u).exp()
    }
    fn d1(&self, y: f64) -> f64 {
        -(y - self.mean) / (self.sd * self.sd) * self.value(y)
    }
    fn d2(&self, y: f64) -> f64 {
        let s2 = self.sd * self.sd;
        let u = y - self.mean;
        (u * u / (s2 * s2) - 1.0 / s2) * self.value(y)
    }
    fn lower(&self, t: f64) -> f64 {
        let c = self.sd * (std::f64::consts::PI / 2.0).sqrt();
        c * statrs::function::erf::erfc(-(t - self.mean) / (self.sd * std::f64::consts::SQRT_2))
    }
    fn upper(&self, t: f64) -> f64 {
        let c = self.sd * (std::f64::consts::PI / 2.0).sqrt();
        c * statrs::function::erf::erfc((t - self.mean) / (self.sd * std::f64::consts::SQRT_2))
    }
}

pub trait Density: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        (0..x.len())
            .map(|i| {
                let h = 1e-5 * x[i].abs().max(1.0);
                y[i] = x[i] + h;
                let up = self.value(&y);
                y[i] = x[i] - h;
                let dn = self.value(&y);
                y[i] = x[i];
                (up - dn) / (2.0 * h)
            })
            .collect()
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = x.len();
        let mut m = DMatrix::zeros(d, d);
        let mut y = x.to_vec();
        let f0 = self.value(x);
        for i in 0..d {
            let hi = 1e-4 * x[i].abs().max(1.0);
            y[i] = x[i] + hi;
            let up = self.value(&y);
            y[i] = x[i] - hi;
            let dn = self.value(&y);
            y[i] = x[i];
            m[(i, i)] = (up - 2.0 * f0 + dn) / (hi * hi);
            for j in 0..i {
                let hj = 1e-4 * x[j].abs().max(1.0);
                let mut s = 0.0;
                for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                    y[i] = x[i] + si * hi;
                    y[j] = x[j] + sj * hj;
                    s += si * sj * self.value(&y);
                }
                y[i] = x[i];
                y[j] = x[j];
                m[(i, j)] = s / (4.0 * hi * hj);
                m[(j, i)] = m[(i, j)];
            }
        }
        m
    }

    /// ∫_{−∞}^t g(x with x_i = u) du.
    fn lower_integral(&self, i: usize, x: &[f64], t: f64) -> f64 {
        half_line(
            |u| {
                let mut y = x.to_vec();
                y[i] = u;
                self.value(&y)
            },
            t,
            -1.0,
        )
    }

    /// ∫_t^∞ g(x with x_i = u) du.
    fn upper_integral(&self, i: usize, x: &[f64], t: f64) -> f64 {
        half_line(
            |u| {
                let mut y = x.to_vec();
                y[i] = u;
                self.value(&y)
            },
            t,
            1.0,
        )
    }

    fn as_product(&self) -> Option<&ProductDensity> {
        None
    }
}

/// ∫ over the half line starting at t in direction `dir`, through
/// u = t + dir (1−v)/v on geometric panels in v ∈ (0, 1].
fn half_line(mut f: impl FnMut(f64) -> f64, t: f64, dir: f64) -> f64 {
    let mut total = 0.0;
    let mut hi = 1.0f64;
    for _ in 0..60 {
        let lo = hi * 0.5;
        total += quadrature::integrate(lo, hi, 20, |v| f(t + dir * (1.0 - v) / v) / (v * v));
        hi = lo;
    }
    total
}

/// c_n ∏ π_j(x_j).
#[derive(Clone)]
pub struct ProductDensity {
    pub marginals: Vec<Arc<dyn Marginal>>,
    pub c_n: f64,
}

impl ProductDensity {
    /// Normalises so the density integrates to one.
    pub fn normalized(marginals: Vec<Arc<dyn Marginal>>) -> Self {
        let c_n = 1.0 / marginals.iter().map(|m| m.mass()).product::<f64>();
        Self { marginals, c_n }
    }

    pub fn standard_gaussian(d: usize) -> Self {
        Self::normalized(
            (0..d).map(|_| Arc::new(GaussianMarginal { mean: 0.0, sd: 1.0 }) as Arc<dyn Marginal>).collect(),
        )
    }

    fn others(&self, x: &[f64], skip: usize) -> f64 {
        self.marginals.iter().enumerate().filter(|(j, _)| *j != skip).map(|(j, m)| m.value(x[j])).product::<f64>()
            * self.c_n
    }
}

impl Density for ProductDensity {
    fn dim(&self) -> usize {
        self.marginals.len()
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.c_n * self.marginals.iter().zip(x).map(|(m, v)| m.value(*v)).product::<f64>()
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len()).map(|i| self.others(x, i) * self.marginals[i].d1(x[i])).collect()
    }
    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = x.len();
        let v: Vec<f64> = self.marginals.iter().zip(x).map(|(m, y)| m.value(*y)).collect();
        let g: Vec<f64> = self.marginals.iter().zip(x).map(|(m, y)| m.d1(*y)).collect();
        DMatrix::from_fn(d, d, |i, j| {
            let mut p = self.c_n;
            for l in 0..d {
                p *= if l == i && l == j {
                    self.marginals[l].d2(x[l])
                } else if l == i || l == j {
                    g[l]
                } else {
                    v[l]
                };
            }
            p
        })
    }
    fn lower_integral(&self, i: usize, x: &[f64], t: f64) -> f64 {
        self.others(x, i) * self.marginals[i].lower(t)
    }
    fn upper_integral(&self, i: usize, x: &[f64], t: f64) -> f64 {
        self.others(x, i) * self.marginals[i].upper(t)
    }
    fn as_product(&self) -> Option<&ProductDensity> {
        Some(self)
    }
}

/// Pointwise sum of densities (used for a base density plus a bump).
#[derive(Clone)]
pub struct SumDensity {
    pub parts: Vec<Arc<dyn Density>>,
}

impl Density for SumDensity {
    fn dim(&self) -> usize {
        self.parts[0].dim()
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.parts.iter().map(|p| p.value(x)).sum()
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for p in &self.parts {
            for (o, v) in out.iter_mut().zip(p.gradient(x)) {
                *o += v;
            }
        }
        out
    }
    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        self.parts.iter().fold(DMatrix::zeros(x.len(), x.len()), |acc, p| acc + p.hessian(x))
    }
    fn lower_integral(&self, i: usize, x: &[f64], t: f64) -> f64 {
        self.parts.iter().map(|p| p.lower_integral(i, x, t)).sum()
    }
    fn upper_integral(&self, i: usize, x: &[f64], t: f64) -> f64 {
        self.parts.iter().map(|p| p.upper_integral(i, x, t)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum GaussianRule {
    /// Tensor Gauss–Hermite.
    Hermite,
    /// Tensor Gauss–Legendre on [−radius·σ, radius·σ] per principal axis.
    Legendre { radius: f64 },
    /// Coordinatewise expectations for product densities when γz has
    /// independent Gaussian coordinates: composite Gauss–Legendre on
    /// [−radius·σ_j, radius·σ_j] split at the marginal's breakpoints, with
    /// `z_nodes` per panel. Other densities fall back to the tensor Legendre
    /// rule with the same radius and node count.
    Separable { radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    /// Nodes per z-dimension.
    pub z_nodes: usize,
    pub gaussian_rule: GaussianRule,
    /// Nodes per dimension inside each cell of a tabulated law.
    pub cell_nodes: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self { z_nodes: 24, gaussian_rule: GaussianRule::Hermite, cell_nodes: 4 }
    }
}

impl QuadratureSpec {
    pub fn with_nodes(z_nodes: usize) -> Self {
        Self { z_nodes, ..Self::default() }
    }
}

/// Jump displacements c = γz with weights summing to λ.
#[derive(Debug, Clone)]
pub struct JumpQuadrature {
    pub nodes: Vec<(Vec<f64>, f64)>,
    pub separable: Option<Separable>,
}

/// Independent centred Gaussian displacement coordinates with standard
/// deviations `sd`, integrated one coordinate at a time.
#[derive(Debug, Clone)]
pub struct Separable {
    pub lambda: f64,
    pub sd: Vec<f64>,
    pub radius: f64,
    pub nodes: usize,
}

impl Separable {
    /// E[φ(y − c)] for c ~ N(0, sd_j²), with the breakpoints of φ.
    pub fn expect(&self, j: usize, y: f64, breaks: &[f64], phi: impl Fn(f64) -> f64) -> f64 {
        let sd = self.sd[j];
        let r = self.radius * sd;
        let mut cuts: Vec<f64> = breaks.iter().map(|b| y - b).filter(|c| c.abs() < r).collect();
        let k = (4.0 * self.radius).ceil() as usize;
        cuts.extend((0..=k).map(|q| -r + 2.0 * r * q as f64 / k as f64));
        cuts.sort_by(f64::total_cmp);
        cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-14 * r);
        let norm = 1.0 / (sd * (2.0 * std::f64::consts::PI).sqrt());
        quadrature::integrate_panels(&cuts, self.nodes, |c| phi(y - c) * (-0.5 * (c / sd).powi(2)).exp()) * norm
    }

    fn shifted(&self, g: &ProductDensity, x: &[f64], j: usize) -> f64 {
        let m = &g.marginals[j];
        self.expect(j, x[j], &m.breakpoints(), |v| m.value(v))
    }

    fn partial(&self, g: &ProductDensity, x: &[f64], i: usize) -> f64 {
        let mut p = self.lambda * g.c_n;
        for j in (i + 1)..x.len() {
            p *= g.marginals[j].value(x[j]);
        }
        for j in 0..i {
            p *= self.shifted(g, x, j);
        }
        p * (self.shifted(g, x, i) - g.marginals[i].value(x[i]))
    }

    fn full(&self, g: &ProductDensity, x: &[f64]) -> f64 {
        let shifted: f64 = (0..x.len()).map(|j| self.shifted(g, x, j)).product();
        self.lambda * (g.c_n * shifted - g.value(x))
    }

    fn half_line(&self, g: &ProductDensity, x: &[f64], i: usize, use_lower: bool) -> f64 {
        let mut p = self.lambda * g.c_n;
        for j in (i + 1)..x.len() {
            p *= g.marginals[j].value(x[j]);
        }
        for j in 0..i {
            p *= self.shifted(g, x, j);
        }
        let m = &g.marginals[i];
        let b = m.breakpoints();
        // E[c] = 0 removes the compensator term from both forms.
        let diff = if use_lower {
            self.expect(i, x[i], &b, |v| m.lower(v)) - m.lower(x[i])
        } else {
            -(self.expect(i, x[i], &b, |v| m.upper(v)) - m.upper(x[i]))
        };
        p * diff
    }
}

impl JumpQuadrature {
    pub fn new(jumps: &JumpMeasureSpec, gamma: &DMatrix<f64>, quad: &QuadratureSpec) -> Result<Self> {
        let d = jumps.dim();
        if gamma.shape() != (d, d) {
            return invalid("gamma shape does not match jump dimension");
        }
        let lambda = jumps.intensity;
        if lambda == 0.0 {
            return Ok(Self { nodes: Vec::new(), separable: None });
        }
        let mut separable = None;
        let mut quad = *quad;
        if let GaussianRule::Separable { radius } = quad.gaussian_rule {
            let JumpLaw::Gaussian { cov } = &jumps.jump_law else {
                return invalid("separable rule needs a Gaussian jump law");
            };
            let c = gamma * DMatrix::from_fn(d, d, |i, j| cov[i][j]) * gamma.transpose();
            let scale = c.diagonal().max();
            let coupled = (0..d).any(|i| (0..d).any(|j| i != j && c[(i, j)].abs() > 1e-14 * scale));
            if coupled || c.diagonal().min() <= 0.0 {
                return invalid("separable rule needs independent, nondegenerate displacement coordinates");
            }
            separable = Some(Separable {
                lambda,
                sd: c.diagonal().iter().map(|v| v.sqrt()).collect(),
                radius,
                nodes: quad.z_nodes,
            });
            quad.gaussian_rule = GaussianRule::Legendre { radius };
        }
        let quad = &quad;
        if quad.z_nodes == 0 {
            return invalid("need at least one quadrature node");
        }
        let mut z_nodes: Vec<(Vec<f64>, f64)> = Vec::new();
        match &jumps.jump_law {
            JumpLaw::PointMass { z0 } => z_nodes.push((z0.clone(), lambda)),
            JumpLaw::Gaussian { cov } => {
                let m = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
                let eig = m.symmetric_eigen();
                let sd = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
                let (rule, scale, wnorm): (Vec<(f64, f64)>, f64, f64) = match quad.gaussian_rule {
                    GaussianRule::Hermite => (
                        quadrature::hermite(quad.z_nodes).to_vec(),
                        std::f64::consts::SQRT_2,
                        std::f64::consts::PI.sqrt(),
                    ),
                    GaussianRule::Legendre { radius } | GaussianRule::Separable { radius } => {
                        let r = quadrature::legendre(quad.z_nodes);
                        let pts = r
                            .iter()
                            .map(|&(u, w)| {
                                let t = radius * u;
                                (t, w * radius * (-0.5 * t * t).exp())
                            })
                            .collect();
                        (pts, 1.0, (2.0 * std::f64::consts::PI).sqrt())
                    }
                };
                for_each_tensor(d, rule.len(), |idx| {
                    let mut w = lambda;
                    let mut u = vec![0.0; d];
                    for k in 0..d {
                        let (t, wk) = rule[idx[k]];
                        u[k] = scale * t * sd[k];
                        w *= wk / wnorm;
                    }
                    let z: Vec<f64> = (0..d).map(|i| (0..d).map(|k| eig.eigenvectors[(i, k)] * u[k]).sum()).collect();
                    z_nodes.push((z, w));
                });
            }
            JumpLaw::Tabulated { lower, upper, cells, weights } => {
                let total: f64 = weights.iter().sum();
                let rule = quadrature::legendre(quad.cell_nodes.max(1));
                for (cell, wc) in weights.iter().enumerate() {
                    if *wc == 0.0 {
                        continue;
                    }
                    let centre = tab_cell_centre(lower, upper, *cells, cell);
                    for_each_tensor(d, rule.len(), |idx| {
                        let mut w = lambda * wc / total;
                        let mut z = vec![0.0; d];
                        for k in 0..d {
                            let half = 0.5 * (upper[k] - lower[k]) / *cells as f64;
                            let (t, wk) = rule[idx[k]];
                            z[k] = centre[k] + half * t;
                            w *= 0.5 * wk;
                        }
                        z_nodes.push((z, w));
                    });
                }
            }
        }
        let nodes = z_nodes
            .into_iter()
            .map(|(z, w)| ((0..d).map(|i| (0..d).map(|j| gamma[(i, j)] * z[j]).sum()).collect(), w))
            .collect();
        Ok(Self { nodes, separable })
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.separable.is_none()
    }

    fn product<'a>(&'a self, g: &'a dyn Density) -> Option<(&'a Separable, &'a ProductDensity)> {
        Some((self.separable.as_ref()?, g.as_product()?))
    }

    /// A*_{d,i} g(x), zero-based i.
    pub fn adjoint_partial(&self, g: &dyn Density, x: &[f64], i: usize) -> f64 {
        if let Some((s, p)) = self.product(g) {
            return s.partial(p, x, i);
        }
        if self.nodes.is_empty() {
            return 0.0;
        }
        let gi = g.gradient(x)[i];
        let mut y = x.to_vec();
        let mut s = 0.0;
        for (c, w) in &self.nodes {
            for j in 0..i {
                y[j] = x[j] - c[j];
            }
            let prev = g.value(&y);
            y[i] = x[i] - c[i];
            let cur = g.value(&y);
            y[..=i].copy_from_slice(&x[..=i]);
            s += w * (cur - prev + c[i] * gi);
        }
        s
    }

    /// A*_d g(x).
    pub fn adjoint(&self, g: &dyn Density, x: &[f64]) -> f64 {
        if let Some((s, p)) = self.product(g) {
            return s.full(p, x);
        }
        if self.nodes.is_empty() {
            return 0.0;
        }
        let grad = g.gradient(x);
        let g0 = g.value(x);
        let mut y = x.to_vec();
        let mut s = 0.0;
        for (c, w) in &self.nodes {
            for j in 0..x.len() {
                y[j] = x[j] - c[j];
            }
            let dot: f64 = c.iter().zip(&grad).map(|(a, b)| a * b).sum();
            s += w * (g.value(&y) - g0 + dot);
        }
        s
    }

    /// ∫_{−∞}^{x_i} A*_{d,i} g(w_i) dw (lower) or −∫_{x_i}^{∞} A*_{d,i} g(w_i) dw (upper).
    pub fn half_line_integral(&self, g: &dyn Density, x: &[f64], i: usize, side: HalfLine) -> f64 {
        let use_lower = match side {
            HalfLine::Lower => true,
            HalfLine::Upper => false,
            HalfLine::Auto => x[i] < 0.0,
        };
        if let Some((s, p)) = self.product(g) {
            return s.half_line(p, x, i, use_lower);
        }
        if self.nodes.is_empty() {
            return 0.0;
        }
        let gx = g.value(x);
        let mut y = x.to_vec();
        let mut s = 0.0;
        for (c, w) in &self.nodes {
            for j in 0..i {
                y[j] = x[j] - c[j];
            }
            let term = if use_lower {
                g.lower_integral(i, &y, x[i] - c[i]) - g.lower_integral(i, &y, x[i]) + c[i] * gx
            } else {
                -(g.upper_integral(i, &y, x[i] - c[i]) - g.upper_integral(i, &y, x[i]) - c[i] * gx)
            };
            s += w * term;
        }
        s
    }
}

fn for_each_tensor(d: usize, n: usize, mut f: impl FnMut(&[usize])) {
    let mut idx = vec![0usize; d];
    loop {
        f(&idx);
        let mut j = 0;
        while j < d {
            idx[j] += 1;
            if idx[j] < n {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
        if j == d {
            return;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HalfLine {
    /// Lower form for x_i < 0, upper form otherwise.
    #[default]
    Auto,
    Lower,
    Upper,
}

/// Pieces of A*_c g at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousTerms {
    /// ½ Σ (aaᵀ)_ij ∂_ij g.
    pub diffusion: f64,
    /// Σ g ∂_i b^i.
    pub divergence: f64,
    /// Σ b^i ∂_i g.
    pub transport: f64,
}

impl ContinuousTerms {
    pub fn total(&self) -> f64 {
        self.diffusion - self.divergence - self.transport
    }
}

pub const DRIFT_FD_STEP: f64 = 1e-4;

pub fn continuous_terms(g: &dyn Density, b: &dyn Drift, a: &DMatrix<f64>, x: &[f64]) -> ContinuousTerms {
    let d = x.len();
    let aat = a * a.transpose();
    let hess = g.hessian(x);
    let grad = g.gradient(x);
    let gx = g.value(x);
    let diffusion = 0.5 * (0..d).map(|i| (0..d).map(|j| aat[(i, j)] * hess[(i, j)]).sum::<f64>()).sum::<f64>();
    let bx = b.value(x);
    let mut y = x.to_vec();
    let mut divergence = 0.0;
    for i in 0..d {
        y[i] = x[i] + DRIFT_FD_STEP;
        let up = b.value(&y)[i];
        y[i] = x[i] - DRIFT_FD_STEP;
        let dn = b.value(&y)[i];
        y[i] = x[i];
        divergence += gx * (up - dn) / (2.0 * DRIFT_FD_STEP);
    }
    let transport = (0..d).map(|i| bx[i] * grad[i]).sum();
    ContinuousTerms { diffusion, divergence, transport }
}

/// A*_{c,b} g(x) with ∂_i b^i by central differences.
pub fn adjoint_continuous(g: &dyn Density, b: &dyn Drift, a: &DMatrix<f64>, x: &[f64]) -> f64 {
    continuous_terms(g, b, a, x).total()
}

/// A*_{d,i} g(x) for zero-based coordinate `i`.
pub fn adjoint_discrete_partial(
    g: &dyn Density,
    gamma: &DMatrix<f64>,
    jumps: &JumpMeasureSpec,
    i: usize,
    x: &[f64],
    quad: &QuadratureSpec,
) -> Result<f64> {
    if i >= x.len() {
        return invalid(format!("coordinate {i} out of range"));
    }
    Ok(JumpQuadrature::new(jumps, gamma, quad)?.adjoint_partial(g, x, i))
}

pub fn adjoint_discrete(
    g: &dyn Density,
    gamma: &DMatrix<f64>,
    jumps: &JumpMeasureSpec,
    x: &[f64],
    quad: &QuadratureSpec,
) -> Result<f64> {
    Ok(JumpQuadrature::new(jumps, gamma, quad)?.adjoint(g, x))
}

/// Evaluates A*_d g with `quad` and with doubled nodes, failing when the two
/// disagree by more than `tol` relative.
pub fn adjoint_discrete_checked(
    g: &dyn Density,
    gamma: &DMatrix<f64>,
    jumps: &JumpMeasureSpec,
    x: &[f64],
    quad: &QuadratureSpec,
    tol: f64,
) -> Result<f64> {
    let coarse = adjoint_discrete(g, gamma, jumps, x, quad)?;
    let fine_spec = QuadratureSpec { z_nodes: 2 * quad.z_nodes, cell_nodes: 2 * quad.cell_nodes, ..*quad };
    let fine = adjoint_discrete(g, gamma, jumps, x, &fine_spec)?;
    let scale = fine.abs().max(g.value(x) * jumps.intensity).max(f64::MIN_POSITIVE);
    if (coarse - fine).abs() > tol * scale {
        return Err(Error::Numerical(format!(
            "jump quadrature not converged at {x:?}: {coarse} with {} nodes vs {fine} with {}",
            quad.z_nodes, fine_spec.z_nodes
        )));
    }
    Ok(fine)
}

/// Drift whose coordinates are b^i_g.
#[derive(Clone)]
pub struct DensityDrift {
    pub g: Arc<dyn Density>,
    pub aat: DMatrix<f64>,
    pub jumps: JumpQuadrature,
    pub side: HalfLine,
    pub label: String,
}

impl DensityDrift {
    pub fn new(
        g: Arc<dyn Density>,
        a: &DMatrix<f64>,
        gamma: &DMatrix<f64>,
        jumps: &JumpMeasureSpec,
        quad: &QuadratureSpec,
        label: impl Into<String>,
    ) -> Result<Self> {
        let d = g.dim();
        if a.shape() != (d, d) {
            return invalid("diffusion matrix shape does not match density");
        }
        Ok(Self {
            g,
            aat: a * a.transpose(),
            jumps: JumpQuadrature::new(jumps, gamma, quad)?,
            side: HalfLine::Auto,
            label: format!("{}:{}:{:?}", label.into(), quad.z_nodes, quad.gaussian_rule),
        })
    }

    pub fn with_side(mut self, side: HalfLine) -> Self {
        self.side = side;
        self
    }

    /// Continuous part (1/(2g)) Σ_j (aaᵀ)_ij ∂_j g.
    pub fn continuous_component(&self, i: usize, x: &[f64], grad: &[f64], gx: f64) -> f64 {
        0.5 * (0..x.len()).map(|j| self.aat[(i, j)] * grad[j]).sum::<f64>() / gx
    }

    pub fn component(&self, i: usize, x: &[f64]) -> f64 {
        let gx = self.g.value(x);
        let grad = self.g.gradient(x);
        self.continuous_component(i, x, &grad, gx)
            + self.jumps.half_line_integral(self.g.as_ref(), x, i, self.side) / gx
    }
}

impl Drift for DensityDrift {
    fn dim(&self) -> usize {
        self.g.dim()
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let gx = self.g.value(x);
        let grad = self.g.gradient(x);
        for (i, o) in out.iter_mut().enumerate().take(x.len()) {
            *o = self.continuous_component(i, x, &grad, gx)
                + self.jumps.half_line_integral(self.g.as_ref(), x, i, self.side) / gx;
        }
    }
    fn describe(&self) -> String {
        format!("density-drift:{}", self.label)
    }
}

/// b^i_g(x) for zero-based coordinate `i`.
pub fn drift_from_density(
    g: &dyn Density,
    a: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    jumps: &JumpMeasureSpec,
    i: usize,
    x: &[f64],
    quad: &QuadratureSpec,
) -> Result<f64> {
    drift_from_density_side(g, a, gamma, jumps, i, x, quad, HalfLine::Auto)
}

#[allow(clippy::too_many_arguments)]
pub fn drift_from_density_side(
    g: &dyn Density,
    a: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    jumps: &JumpMeasureSpec,
    i: usize,
    x: &[f64],
    quad: &QuadratureSpec,
    side: HalfLine,
) -> Result<f64> {
    let d = g.dim();
    if x.len() != d || i >= d || a.shape() != (d, d) {
        return invalid("dimension mismatch in drift_from_density");
    }
    let gx = g.value(x);
    if !(gx > 0.0) {
        return invalid(format!("density is not positive at {x:?}"));
    }
    let aat = a * a.transpose();
    let grad = g.gradient(x);
    let cont = 0.5 * (0..d).map(|j| aat[(i, j)] * grad[j]).sum::<f64>() / gx;
    if jumps.intensity == 0.0 {
        return Ok(cont);
    }
    let jq = JumpQuadrature::new(jumps, gamma, quad)?;
    Ok(cont + jq.half_line_integral(g, x, i, side) / gx)
}

/// Uniform table with Catmull–Rom interpolation.
#[derive(Debug, Clone)]
struct Table {
    lo: f64,
    step: f64,
    v: Vec<f64>,
}

impl Table {
    fn build(lo: f64, hi: f64, step: f64, f: impl Fn(f64) -> f64 + Sync) -> Self {
        let n = ((hi - lo) / step).ceil() as usize + 1;
        let v = (0..n).into_par_iter().map(|k| f(lo + k as f64 * step)).collect();
        Self { lo, step, v }
    }

    fn eval(&self, y: f64) -> Option<f64> {
        let u = (y - self.lo) / self.step;
        let k = u.floor();
        if k < 1.0 || k as usize + 2 >= self.v.len() {
            return None;
        }
        let k = k as usize;
        let t = u - k as f64;
        let (p0, p1, p2, p3) = (self.v[k - 1], self.v[k], self.v[k + 1], self.v[k + 2]);
        Some(p1 + 0.5 * t * (p2 - p0 + t * (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3 + t * (3.0 * (p1 - p2) + p3 - p0))))
    }
}

/// b_g for a product density when aaᵀ is diagonal and γz has independent
/// Gaussian coordinates. Then
/// b^i(x) = ½(aaᵀ)_ii π_i'/π_i + λ ∏_{j<i} (E[π_j(x_j − c_j)]/π_j(x_j)) · D_i(x_i)/π_i(x_i)
/// with D_i(y) = E[L_i(y − c)] − L_i(y). The Gaussian expectations are smooth
/// and are tabulated per axis on [−half_width, half_width]; past the table
/// they are computed directly.
#[derive(Clone)]
pub struct SeparableDrift {
    g: ProductDensity,
    half_diag: Vec<f64>,
    rule: Option<Separable>,
    shifted: Vec<Table>,
    lower: Vec<Table>,
    upper: Vec<Table>,
    label: String,
}

impl SeparableDrift {
    pub fn new(
        g: ProductDensity,
        a: &DMatrix<f64>,
        gamma: &DMatrix<f64>,
        jumps: &JumpMeasureSpec,
        quad: &QuadratureSpec,
        half_width: f64,
        step: f64,
    ) -> Result<Self> {
        let d = g.dim();
        if a.shape() != (d, d) {
            return invalid("diffusion matrix shape does not match density");
        }
        let aat = a * a.transpose();
        if (0..d).any(|i| (0..d).any(|j| i != j && aat[(i, j)] != 0.0)) {
            return invalid("separable drift needs a diagonal aaᵀ");
        }
        if !(step > 0.0 && half_width > 2.0 * step) {
            return invalid("table needs step > 0 and half_width > 2 step");
        }
        let rule = if jumps.intensity == 0.0 {
            None
        } else {
            if !matches!(quad.gaussian_rule, GaussianRule::Separable { .. }) {
                return invalid("separable drift needs the separable jump rule");
            }
            JumpQuadrature::new(jumps, gamma, quad)?.separable
        };
        let mut shifted = Vec::new();
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        if let Some(r) = &rule {
            let (lo, hi) = (-half_width, half_width);
            for j in 0..d {
                let m = g.marginals[j].clone();
                let b = m.breakpoints();
                if j + 1 < d {
                    shifted.push(Table::build(lo, hi, step, |y| r.expect(j, y, &b, |v| m.value(v))));
                }
                lower.push(Table::build(lo, step, step, |y| r.expect(j, y, &b, |v| m.lower(v))));
                upper.push(Table::build(-step, hi, step, |y| r.expect(j, y, &b, |v| m.upper(v))));
            }
        }
        let label = format!(
            "separable:{}:{}:{}:{}",
            quad.z_nodes,
            half_width,
            step,
            serde_json::to_string(jumps).expect("serializable")
        );
        Ok(Self { g, half_diag: (0..d).map(|i| 0.5 * aat[(i, i)]).collect(), rule, shifted, lower, upper, label })
    }

    fn shifted_ratio(&self, r: &Separable, j: usize, y: f64) -> f64 {
        let m = &self.g.marginals[j];
        let e = self.shifted[j].eval(y).unwrap_or_else(|| r.expect(j, y, &m.breakpoints(), |v| m.value(v)));
        e / m.value(y)
    }

    fn jump_ratio(&self, r: &Separable, i: usize, y: f64) -> f64 {
        let m = &self.g.marginals[i];
        let diff = if y < 0.0 {
            let e = self.lower[i].eval(y).unwrap_or_else(|| r.expect(i, y, &m.breakpoints(), |v| m.lower(v)));
            e - m.lower(y)
        } else {
            let e = self.upper[i].eval(y).unwrap_or_else(|| r.expect(i, y, &m.breakpoints(), |v| m.upper(v)));
            m.upper(y) - e
        };
        diff / m.value(y)
    }
}

impl Drift for SeparableDrift {
    fn dim(&self) -> usize {
        self.g.dim()
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let mut prefix = 1.0;
        for i in 0..x.len() {
            let m = &self.g.marginals[i];
            out[i] = self.half_diag[i] * m.d1(x[i]) / m.value(x[i]);
            if let Some(r) = &self.rule {
                out[i] += r.lambda * prefix * self.jump_ratio(r, i, x[i]);
                if i + 1 < x.len() {
                    prefix *= self.shifted_ratio(r, i, x[i]);
                }
            }
        }
    }
    fn describe(&self) -> String {
        self.label.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResidual {
    pub x: Vec<f64>,
    /// |A*_c g + A*_d g| over the largest constituent term.
    pub residual: f64,
    pub absolute: f64,
    pub continuous_part: f64,
    pub discrete_part: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub points: Vec<PointResidual>,
    pub max_residual: f64,
}

/// Evaluates A*_{b} g = A*_{c,b} g + A*_d g for the model's drift, with the
/// discrete part computed from `quad`.
pub fn verify_stationarity(
    g: &dyn Density,
    model: &ModelSpec,
    points: &[Vec<f64>],
    quad: &QuadratureSpec,
) -> Result<StationarityReport> {
    if g.dim() != model.dim {
        return invalid("density and model dimensions differ");
    }
    let jq = JumpQuadrature::new(&model.jumps, &model.gamma, quad)?;
    let rows: Vec<PointResidual> = points
        .par_iter()
        .map(|x| {
            let terms = continuous_terms(g, model.drift.as_ref(), &model.a, x);
            let disc = jq.adjoint(g, x);
            let cont = terms.total();
            let scale = terms
                .diffusion
                .abs()
                .max(terms.divergence.abs())
                .max(terms.transport.abs())
                .max(disc.abs())
                .max(f64::MIN_POSITIVE);
            let absolute = (cont + disc).abs();
            PointResidual {
                x: x.clone(),
                residual: absolute / scale,
                absolute,
                continuous_part: cont,
                discrete_part: disc,
            }
        })
        .collect();
    let max_residual = rows.iter().map(|r| r.residual).fold(0.0, f64::max);
    Ok(StationarityReport { points: rows, max_residual })
}
