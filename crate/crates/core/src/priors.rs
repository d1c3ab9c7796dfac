//! The two hypothesis densities π₀ and π₁ of the lower bound, the checks that
//! π₀ satisfies Ad, the calibration (M_T, h(T)) and the drift-gap probes.
//!
//! π₀(x) = c_η ∏ f(s_k |x_k|) with s_k = η (aaᵀ)⁻¹_kk. The profile f is 1 on
//! [0, ½], e^{−x} on [1, ∞) and e^{−φ(x)} in between, where φ solves
//! φ″ = φ′² − 16 w(x) for a smooth piecewise-constant weight w. The weight
//! has two free parameters chosen by shooting so that φ(1) = φ′(1) = 1; w is
//! flat at both ends so every derivative of f matches across x = ½ and x = 1.
//! Along the way f″/f = 16w and f′/f = −φ′, which gives the Ad constants
//! c₄ and c₅ directly.

use crate::bandwidth::{harmonic_mean_beta3, SmoothnessSpec};
use crate::error::{invalid, Error, Result};
use crate::estimator::BandwidthVector;
use crate::generator::{
    Density, DensityDrift, HalfLine, JumpQuadrature, Marginal, ProductDensity, QuadratureSpec, SumDensity,
};
use crate::kernels::{build_bump_kernel, KernelSpec};
use crate::model::{JumpLaw, JumpMeasureSpec};
use crate::quadrature;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::{Arc, OnceLock};

pub const DEFAULT_ETA: f64 = 0.4;

/// Start and end of the interpolation gap of f.
const GAP: (f64, f64) = (0.5, 1.0);
const PROFILE_STEPS: usize = 100_000;
/// Depth of the initial dip of w and the widths of its three transitions.
const RHO: f64 = 0.97;
const RAMP: [f64; 3] = [0.02, 0.2, 0.04];

/// C^∞ step from 0 at t ≤ 0 to 1 at t ≥ 1.
pub fn smooth_step(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        let a = (-1.0 / t).exp();
        let b = (-1.0 / (1.0 - t)).exp();
        a / (a + b)
    }
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    /// Start of the rise of w.
    x1: f64,
    /// Plateau height of w before it settles to 1/16.
    wf: f64,
}

impl Shape {
    fn weight(&self, x: f64) -> f64 {
        let [d0, d1, d2] = RAMP;
        -RHO * smooth_step((x - GAP.0) / d0) + (RHO + self.wf) * smooth_step((x - self.x1) / d1)
            - (self.wf - 1.0 / 16.0) * smooth_step((x - (GAP.1 - d2)) / d2)
    }

    /// (v, φ, I)′ with v = φ′ and I = ∫ e^{−φ}.
    fn rhs(&self, x: f64, s: [f64; 3]) -> [f64; 3] {
        [s[0] * s[0] - 16.0 * self.weight(x), s[0], (-s[1]).exp()]
    }

    fn rk4(&self, x: f64, s: [f64; 3], h: f64) -> [f64; 3] {
        let add = |a: [f64; 3], b: [f64; 3], c: f64| [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2]];
        let k1 = self.rhs(x, s);
        let k2 = self.rhs(x + 0.5 * h, add(s, k1, 0.5 * h));
        let k3 = self.rhs(x + 0.5 * h, add(s, k2, 0.5 * h));
        let k4 = self.rhs(x + h, add(s, k3, h));
        [
            s[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            s[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
            s[2] + h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
        ]
    }

    fn integrate(&self, n: usize) -> Vec<[f64; 3]> {
        let h = (GAP.1 - GAP.0) / n as f64;
        let mut out = Vec::with_capacity(n + 1);
        let mut s = [0.0; 3];
        out.push(s);
        for k in 0..n {
            s = self.rk4(GAP.0 + k as f64 * h, s, h);
            out.push(s);
        }
        out
    }

    fn miss(&self, n: usize) -> [f64; 2] {
        let end = *self.integrate(n).last().expect("nonempty");
        [end[0] - 1.0, end[1] - 1.0]
    }
}

/// Tabulated solution of the profile ODE on the gap.
struct Profile {
    shape: Shape,
    nodes: Vec<[f64; 3]>,
    step: f64,
}

fn solve_shape() -> Shape {
    let mut p = Shape { x1: 0.5945, wf: 0.9374 };
    for _ in 0..40 {
        let r = p.miss(PROFILE_STEPS);
        if r[0].abs().max(r[1].abs()) < 1e-14 {
            break;
        }
        let e = 1e-7;
        let rx = Shape { x1: p.x1 + e, ..p }.miss(PROFILE_STEPS);
        let rw = Shape { wf: p.wf + e, ..p }.miss(PROFILE_STEPS);
        let j = [[(rx[0] - r[0]) / e, (rw[0] - r[0]) / e], [(rx[1] - r[1]) / e, (rw[1] - r[1]) / e]];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        p.x1 -= (j[1][1] * r[0] - j[0][1] * r[1]) / det;
        p.wf -= (-j[1][0] * r[0] + j[0][0] * r[1]) / det;
    }
    p
}

fn profile() -> &'static Profile {
    static P: OnceLock<Profile> = OnceLock::new();
    P.get_or_init(|| {
        let shape = solve_shape();
        Profile { shape, nodes: shape.integrate(PROFILE_STEPS), step: (GAP.1 - GAP.0) / PROFILE_STEPS as f64 }
    })
}

/// f and its first two derivatives at r ≥ 0, and the tail ∫_r^∞ f.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub f: f64,
    pub d1: f64,
    pub d2: f64,
    pub tail: f64,
}

impl Profile {
    fn state(&self, r: f64) -> [f64; 3] {
        let k = (((r - GAP.0) / self.step) as usize).min(PROFILE_STEPS - 1);
        let x = GAP.0 + k as f64 * self.step;
        self.shape.rk4(x, self.nodes[k], r - x)
    }

    fn gap_integral(&self) -> f64 {
        self.nodes[PROFILE_STEPS][2]
    }

    fn eval(&self, r: f64) -> ProfilePoint {
        let e1 = (-1.0f64).exp();
        if r >= GAP.1 {
            let f = (-r).exp();
            ProfilePoint { f, d1: -f, d2: f, tail: f }
        } else if r <= GAP.0 {
            ProfilePoint { f: 1.0, d1: 0.0, d2: 0.0, tail: e1 + self.gap_integral() + (GAP.0 - r) }
        } else {
            let s = self.state(r);
            let f = (-s[1]).exp();
            ProfilePoint {
                f,
                d1: -s[0] * f,
                d2: 16.0 * self.shape.weight(r) * f,
                tail: e1 + self.gap_integral() - s[2],
            }
        }
    }
}

/// Profile values at |r|; d1 carries the sign of r.
pub fn profile_at(r: f64) -> ProfilePoint {
    let mut p = profile().eval(r.abs());
    if r < 0.0 {
        p.d1 = -p.d1;
    }
    p
}

/// Parameters of the interpolation weight found by shooting.
pub fn profile_parameters() -> (f64, f64) {
    let s = profile().shape;
    (s.x1, s.wf)
}

/// One grid check: `worst_margin` is the smallest relative slack observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub worst_margin: f64,
    pub pass: bool,
}

impl Check {
    fn new(name: &str, worst_margin: f64, tol: f64) -> Self {
        Self { name: name.to_string(), worst_margin, pass: worst_margin >= -tol }
    }
}

/// Grid checks of the pieces and bounds of f on [0, 3].
pub fn profile_bounds(points: usize) -> Vec<Check> {
    let grid: Vec<f64> = (0..=points).map(|k| 3.0 * k as f64 / points as f64).collect();
    let gap: Vec<f64> = (1..points).map(|k| GAP.0 + (GAP.1 - GAP.0) * k as f64 / points as f64).collect();
    let mut plateau = f64::INFINITY;
    let mut exponential = f64::INFINITY;
    let mut sandwich = f64::INFINITY;
    let mut first = f64::INFINITY;
    let mut second = f64::INFINITY;
    for &r in &grid {
        let p = profile_at(r);
        let e = (-r).exp();
        if r <= GAP.0 {
            plateau = plateau.min(-(p.f - 1.0).abs().max(p.d1.abs()).max(p.d2.abs()));
        }
        if r >= GAP.1 {
            exponential = exponential.min(-((p.f - e).abs() / e));
        }
        sandwich = sandwich.min((p.f / e - 0.5).min(2.0 - p.f / e) / 2.0);
        first = first.min(1.0 - p.d1.abs() / (2.0 * e));
        second = second.min(1.0 - p.d2.abs() / (2.0 * e));
    }
    let e1 = (-1.0f64).exp();
    let mut monotone = f64::INFINITY;
    let mut prev = 1.0;
    for &r in &gap {
        let f = profile_at(r).f;
        monotone = monotone.min(prev - f).min(f - e1).min(1.0 - f);
        prev = f;
    }
    vec![
        Check::new("plateau", plateau, 0.0),
        Check::new("exponential_branch", exponential, 1e-12),
        Check::new("gap_monotone_in_range", monotone, 0.0),
        Check::new("value_sandwich", sandwich, 0.0),
        Check::new("first_derivative_bound", first, 0.0),
        Check::new("second_derivative_bound", second, 0.0),
    ]
}

/// y ↦ f(s|y|), integrated in closed form from the profile tail.
#[derive(Debug, Clone, Copy)]
pub struct PriorMarginal {
    pub s: f64,
}

impl Marginal for PriorMarginal {
    fn value(&self, y: f64) -> f64 {
        profile_at(self.s * y).f
    }
    fn d1(&self, y: f64) -> f64 {
        self.s * profile_at(self.s * y).d1
    }
    fn d2(&self, y: f64) -> f64 {
        self.s * self.s * profile_at(self.s * y).d2
    }
    fn lower(&self, t: f64) -> f64 {
        let q = profile_at(self.s * t).tail / self.s;
        if t < 0.0 {
            q
        } else {
            self.mass() - q
        }
    }
    fn upper(&self, t: f64) -> f64 {
        self.lower(-t)
    }
    fn mass(&self) -> f64 {
        2.0 * profile_at(0.0).tail / self.s
    }
    /// The gap on both sides, cut finely enough to follow the weight's ramps.
    fn breakpoints(&self) -> Vec<f64> {
        (0..=GAP_PIECES).map(|k| (0.5 + 0.5 * k as f64 / GAP_PIECES as f64) / self.s).flat_map(|r| [-r, r]).collect()
    }
}

const GAP_PIECES: usize = 100;

fn inverse_diagonal(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !a.is_square() || a.nrows() == 0 {
        return invalid("diffusion matrix must be square and nonempty");
    }
    let aat = a * a.transpose();
    let inv = aat.try_inverse().ok_or_else(|| Error::InvalidArgument("aaᵀ is singular".into()))?;
    Ok((0..a.nrows()).map(|k| inv[(k, k)]).collect())
}

/// π₀ for a given η and diffusion matrix.
#[derive(Clone)]
pub struct PriorZero {
    pub eta: f64,
    pub a: DMatrix<f64>,
    /// η (aaᵀ)⁻¹_kk per coordinate.
    pub s: Vec<f64>,
    pub c_eta: f64,
    pub density: Arc<ProductDensity>,
}

impl std::fmt::Debug for PriorZero {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PriorZero").field("eta", &self.eta).field("s", &self.s).field("c_eta", &self.c_eta).finish()
    }
}

impl PriorZero {
    pub fn new(eta: f64, a: DMatrix<f64>) -> Result<Self> {
        if !(eta > 0.0 && eta < 0.5) {
            return invalid(format!("eta must lie in (0, 1/2), got {eta}"));
        }
        let s: Vec<f64> = inverse_diagonal(&a)?.into_iter().map(|v| eta * v).collect();
        let density =
            ProductDensity::normalized(s.iter().map(|&s| Arc::new(PriorMarginal { s }) as Arc<dyn Marginal>).collect());
        Ok(Self { eta, a, s, c_eta: density.c_n, density: Arc::new(density) })
    }

    pub fn identity(eta: f64, d: usize) -> Result<Self> {
        Self::new(eta, DMatrix::identity(d, d))
    }

    pub fn dim(&self) -> usize {
        self.s.len()
    }

    pub fn marginal(&self, k: usize) -> PriorMarginal {
        PriorMarginal { s: self.s[k] }
    }

    /// min_k (aaᵀ)⁻¹_kk.
    pub fn k3(&self) -> f64 {
        self.s.iter().fold(f64::INFINITY, |m, v| m.min(*v)) / self.eta
    }

    /// max_k (aaᵀ)⁻¹_kk.
    pub fn k1(&self) -> f64 {
        self.s.iter().fold(0.0f64, |m, v| m.max(*v)) / self.eta
    }

    /// Half-width B of the working box [−B, B]^d.
    pub fn working_box(&self) -> f64 {
        25.0 / (self.eta * self.k3())
    }
}

pub fn eval_pi0(p: &PriorZero, x: &[f64]) -> f64 {
    p.density.value(x)
}

/// ∫ over [−B, B]^d as a product of composite one-dimensional rules aligned
/// with the breakpoints of f.
pub fn box_mass(p: &PriorZero) -> f64 {
    let b = p.working_box();
    (0..p.dim())
        .map(|k| {
            let m = p.marginal(k);
            let (r0, r1) = (GAP.0 / m.s, GAP.1 / m.s);
            // The gap carries transitions of width ~0.02/s, so split it finely.
            let mut pos: Vec<f64> = (0..=50).map(|k| r0 + (r1 - r0) * k as f64 / 50.0).collect();
            let mut t = r1;
            while t < b {
                t = (t + 2.0 / m.s).min(b);
                pos.push(t);
            }
            let all: Vec<f64> = pos.iter().rev().map(|v| -v).chain(pos.iter().copied()).collect();
            quadrature::integrate_panels(&all, 24, |y| m.value(y))
        })
        .product::<f64>()
        * p.c_eta
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityChecks {
    pub box_mass: f64,
    pub corner_value: f64,
    pub positive: bool,
    pub pass: bool,
}

pub fn check_density(p: &PriorZero) -> DensityChecks {
    let mass = box_mass(p);
    let b = p.working_box();
    let corner = eval_pi0(p, &vec![b; p.dim()]);
    let positive = corner > 0.0;
    DensityChecks { box_mass: mass, corner_value: corner, positive, pass: positive && (mass - 1.0).abs() < 1e-6 }
}

/// (1/M_T) ∏ K((x_l − x₀_l)/h_l).
#[derive(Debug, Clone)]
pub struct BumpDensity {
    pub amplitude: f64,
    pub x0: Vec<f64>,
    pub h: Vec<f64>,
    pub kernel: KernelSpec,
}

impl BumpDensity {
    fn u(&self, j: usize, y: f64) -> f64 {
        (y - self.x0[j]) / self.h[j]
    }

    fn factors(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len()).map(|j| self.kernel.eval(self.u(j, x[j]))).collect()
    }

    fn others(&self, x: &[f64], skip: usize) -> f64 {
        (0..x.len()).filter(|j| *j != skip).map(|j| self.kernel.eval(self.u(j, x[j]))).product::<f64>() * self.amplitude
    }

    pub fn inside(&self, x: &[f64]) -> bool {
        (0..x.len()).all(|j| self.u(j, x[j]).abs() <= 1.0)
    }

    /// k-th partial derivative along axis i, k ≤ 2.
    pub fn axis_derivative(&self, x: &[f64], i: usize, k: usize) -> f64 {
        let u = self.u(i, x[i]);
        let dk = match k {
            0 => self.kernel.eval(u),
            1 => self.kernel.derivative(u),
            2 => self.kernel.second_derivative(u),
            _ => unreachable!("orders above two are rejected by callers"),
        };
        self.others(x, i) * dk / self.h[i].powi(k as i32)
    }
}

impl Density for BumpDensity {
    fn dim(&self) -> usize {
        self.x0.len()
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.amplitude * self.factors(x).iter().product::<f64>()
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len()).map(|i| self.axis_derivative(x, i, 1)).collect()
    }
    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = x.len();
        let v = self.factors(x);
        let g: Vec<f64> = (0..d).map(|j| self.kernel.derivative(self.u(j, x[j])) / self.h[j]).collect();
        let s: Vec<f64> =
            (0..d).map(|j| self.kernel.second_derivative(self.u(j, x[j])) / (self.h[j] * self.h[j])).collect();
        DMatrix::from_fn(d, d, |i, j| {
            let mut p = self.amplitude;
            for l in 0..d {
                p *= if l == i && l == j {
                    s[l]
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
        let o = self.others(x, i);
        if o == 0.0 {
            return 0.0;
        }
        o * self.h[i] * self.kernel.cumulative(self.u(i, t))
    }
    fn upper_integral(&self, i: usize, x: &[f64], t: f64) -> f64 {
        let o = self.others(x, i);
        if o == 0.0 {
            return 0.0;
        }
        o * self.h[i] * (self.kernel.cumulative(1.0) - self.kernel.cumulative(self.u(i, t)))
    }
}

/// π₁ = π₀ + bump.
#[derive(Clone)]
pub struct PriorOne {
    pub base: PriorZero,
    pub x0: Vec<f64>,
    pub m_t: f64,
    pub h: BandwidthVector,
    pub bump: Arc<BumpDensity>,
    pub density: Arc<SumDensity>,
}

impl std::fmt::Debug for PriorOne {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PriorOne").field("x0", &self.x0).field("m_t", &self.m_t).field("h", &self.h.h).finish()
    }
}

pub fn default_x0(d: usize) -> Vec<f64> {
    vec![0.5; d]
}

impl PriorOne {
    pub fn new(base: PriorZero, x0: Vec<f64>, m_t: f64, h: BandwidthVector) -> Result<Self> {
        let d = base.dim();
        if x0.len() != d || h.dim() != d {
            return invalid("x0 and h must match the prior dimension");
        }
        if !(m_t > 0.0 && m_t.is_finite()) {
            return invalid("M_T must be positive and finite");
        }
        let bump =
            Arc::new(BumpDensity { amplitude: 1.0 / m_t, x0: x0.clone(), h: h.h.clone(), kernel: build_bump_kernel() });
        let density = Arc::new(SumDensity { parts: vec![base.density.clone() as Arc<dyn Density>, bump.clone()] });
        let p = Self { base, x0, m_t, h, bump, density };
        let low = p.minimum_bound();
        if !(low > 0.0) {
            return invalid(format!("π₁ is not positive on the bump box (lower bound {low:e})"));
        }
        Ok(p)
    }

    pub fn from_calibration(base: PriorZero, cal: &Calibration) -> Result<Self> {
        let d = base.dim();
        Self::new(base, default_x0(d), cal.m_t, cal.h.clone())
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.bump.kernel
    }

    /// Lower bound of π₁ on K_T: the smallest π₀ value there plus the most
    /// negative product of kernel factors.
    pub fn minimum_bound(&self) -> f64 {
        let far: Vec<f64> = self.x0.iter().zip(&self.h.h).map(|(c, h)| if *c >= 0.0 { c + h } else { c - h }).collect();
        let kmin = (0..=4000).map(|k| self.kernel().eval(k as f64 / 4000.0)).fold(f64::INFINITY, f64::min);
        let d = self.x0.len();
        let worst =
            if kmin < 0.0 { (1..=d).step_by(2).map(|k| kmin.abs().powi(k as i32)).fold(0.0, f64::max) } else { 0.0 };
        eval_pi0(&self.base, &far) - worst / self.m_t
    }

    /// π₁(x) − π₀(x), computed from the bump alone.
    pub fn difference(&self, x: &[f64]) -> f64 {
        self.bump.value(x)
    }

    /// K_T as (lower, upper) corners.
    pub fn bump_box(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.x0.iter().zip(&self.h.h).map(|(c, h)| c - h).collect(),
            self.x0.iter().zip(&self.h.h).map(|(c, h)| c + h).collect(),
        )
    }

    /// ∫_{K_T} (π₁ − π₀) by tensor Gauss–Legendre.
    pub fn bump_integral(&self, nodes: usize) -> f64 {
        let (lo, hi) = self.bump_box();
        let mut acc = 0.0;
        tensor_rule(&lo, &hi, nodes, |x, w| acc += w * self.difference(x));
        acc
    }
}

pub fn eval_pi1(p: &PriorOne, x: &[f64]) -> f64 {
    p.density.value(x)
}

/// Visits the tensor Gauss–Legendre points of a box with their weights.
fn tensor_rule(lo: &[f64], hi: &[f64], n: usize, f: impl FnMut(&[f64], f64)) {
    tensor_rule_with(lo, hi, &vec![n; lo.len()], f)
}

fn tensor_rule_with(lo: &[f64], hi: &[f64], ns: &[usize], mut f: impl FnMut(&[f64], f64)) {
    let rules: Vec<_> = ns.iter().map(|n| quadrature::legendre(*n)).collect();
    let d = lo.len();
    let mut idx = vec![0usize; d];
    let mut x = vec![0.0; d];
    loop {
        let mut w = 1.0;
        for k in 0..d {
            let (t, wk) = rules[k][idx[k]];
            let half = 0.5 * (hi[k] - lo[k]);
            x[k] = lo[k] + half * (t + 1.0);
            w *= wk * half;
        }
        f(&x, w);
        let mut j = 0;
        while j < d {
            idx[j] += 1;
            if idx[j] < ns[j] {
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

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConstraints {
    pub calib_holder: bool,
    pub calib_b: bool,
    pub calib_finale: bool,
    pub bandwidth_cap: bool,
}

/// Calibration with the raw numbers behind each constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(rename = "M_T")]
    pub m_t: f64,
    pub h: Vec<f64>,
    pub epsilon: f64,
    pub constraints: CalibrationConstraints,
    /// max_i 1/(M_T ε h_i^{β_i}); at most one when (calib holder) holds.
    pub holder_ratio: f64,
    /// Σ 1/h_j divided by M_T.
    pub b_ratio: f64,
    /// T M_T⁻² ∏ h_l Σ 1/h_j².
    pub finale_value: f64,
    /// d ε^{−Σ_{l≥3} 1/β_l}, the T-free bound at saturation.
    pub finale_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(rename = "M_T")]
    pub m_t: f64,
    pub h: BandwidthVector,
    pub epsilon: f64,
    pub constraints: CalibrationConstraints,
}

/// T^{β̄₃/(2β̄₃+d−2)}.
pub fn m_t(t: f64, spec: &SmoothnessSpec) -> Result<f64> {
    let b3 = harmonic_mean_beta3(spec)?;
    let d = spec.dim() as f64;
    Ok(t.powf(b3 / (2.0 * b3 + d - 2.0)))
}

pub fn calibration_report(t: f64, spec: &SmoothnessSpec, epsilon: f64) -> Result<CalibrationReport> {
    if !(t > 1.0) || !t.is_finite() {
        return invalid(format!("T must exceed 1, got {t}"));
    }
    if !(epsilon > 0.0) {
        return invalid("epsilon must be positive");
    }
    let d = spec.dim();
    let m = m_t(t, spec)?;
    let beta = &spec.beta;
    let mut h: Vec<f64> = beta.iter().map(|b| (1.0 / (epsilon * m)).powf(1.0 / b)).collect();
    h[0] = h[1];
    let holder_ratio = (0..d).map(|i| 1.0 / (m * epsilon * h[i].powf(beta[i]))).fold(0.0, f64::max);
    let b_ratio = h.iter().map(|v| 1.0 / v).sum::<f64>() / m;
    let prod: f64 = h.iter().product();
    let finale_value = t / (m * m) * prod * h.iter().map(|v| 1.0 / (v * v)).sum::<f64>();
    let finale_bound = d as f64 * epsilon.powf(-beta[2..].iter().map(|b| 1.0 / b).sum::<f64>());
    let constraints = CalibrationConstraints {
        calib_holder: holder_ratio <= 1.0 + 1e-12,
        calib_b: b_ratio <= 1.0 && beta.iter().all(|b| *b > 1.0),
        calib_finale: finale_value.is_finite() && finale_value <= finale_bound * (1.0 + 1e-9),
        bandwidth_cap: h.iter().all(|v| *v < 0.5),
    };
    Ok(CalibrationReport { t, m_t: m, h, epsilon, constraints, holder_ratio, b_ratio, finale_value, finale_bound })
}

pub fn calibrate(t: f64, spec: &SmoothnessSpec, epsilon: f64) -> Result<Calibration> {
    let r = calibration_report(t, spec, epsilon)?;
    let fail = |constraint: &'static str, detail: String| Err(Error::CalibrationInfeasible { constraint, detail });
    if !r.constraints.bandwidth_cap {
        return fail("bandwidth_cap", format!("h = {:?} reaches 1/2", r.h));
    }
    if !r.constraints.calib_holder {
        return fail("calib_holder", format!("max 1/(M_T ε h^β) = {}", r.holder_ratio));
    }
    if !r.constraints.calib_b {
        return fail("calib_b", format!("Σ 1/h_j / M_T = {} with beta {:?}", r.b_ratio, spec.beta));
    }
    if !r.constraints.calib_finale {
        return fail("calib_finale", format!("{} exceeds {}", r.finale_value, r.finale_bound));
    }
    Ok(Calibration { t: r.t, m_t: r.m_t, h: BandwidthVector::new(r.h)?, epsilon, constraints: r.constraints })
}

/// Defaults: β = (2, 2, 2), unit radii.
pub fn default_smoothness() -> SmoothnessSpec {
    SmoothnessSpec::isotropic(2.0, 3).expect("valid default")
}

/// Sampling plan for the Ad checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdPlan {
    pub y_points: usize,
    pub z_points: usize,
}

impl Default for AdPlan {
    fn default() -> Self {
        Self { y_points: 2001, z_points: 61 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdConstants {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub epsilon: f64,
    pub epsilon_tilde: f64,
    pub epsilon0: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    /// Observed sup of |∂_ij π₀|.
    pub c5_tilde: f64,
    #[serde(rename = "R")]
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CHatCheck {
    /// ∫ |z|² e^{ε₀|z|} F(dz) by quadrature.
    pub integral: f64,
    /// k₃ / (4^{d+4} k₁² k₂).
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdReport {
    pub eta: f64,
    pub constants: AdConstants,
    pub points: Vec<Check>,
    pub c_hat: Option<CHatCheck>,
    /// All five points pass. The ĉ condition is reported separately.
    pub pass: bool,
}

fn sample_line(b: f64, n: usize, s: f64) -> Vec<f64> {
    let mut ys: Vec<f64> = (0..n).map(|k| -b + 2.0 * b * k as f64 / (n - 1) as f64).collect();
    let fine = n.max(100);
    for k in 0..=fine {
        let r = GAP.0 + (GAP.1 - GAP.0) * k as f64 / fine as f64;
        ys.push(r / s);
        ys.push(-r / s);
    }
    ys
}

/// Grid verification of the five Ad points for π₀ with ε = ε̃ = η.
pub fn check_ad_conditions(
    p: &PriorZero,
    plan: &AdPlan,
    jumps: Option<(&JumpMeasureSpec, &DMatrix<f64>)>,
) -> Result<AdReport> {
    if plan.y_points < 3 || plan.z_points < 2 {
        return invalid("Ad plan needs at least 3 y points and 2 z points");
    }
    let d = p.dim();
    let eta = p.eta;
    let (k1, k3) = (p.k1(), p.k3());
    let b = p.working_box();
    let c2 = 4.0;
    let c3 = 4.0 / (eta * k3);
    let c4 = 4.0 * eta * k1;
    let c5 = 16.0;
    let r_tail = 1.0 / (eta * k3);

    let mut decay = f64::INFINITY;
    let mut two = f64::INFINITY;
    let mut three = f64::INFINITY;
    let mut tail = f64::INFINITY;
    let mut four = f64::INFINITY;
    let mut logd = vec![0.0f64; d];
    let mut curv = vec![0.0f64; d];
    let mut sup_value = vec![0.0f64; d];
    let mut sup_d1 = vec![0.0f64; d];
    let mut sup_d2 = vec![0.0f64; d];
    for j in 0..d {
        let m = p.marginal(j);
        let s = m.s;
        for y in [-b, b] {
            let worst = m.value(y).max(m.d1(y).abs());
            decay = decay.min(1.0 - worst / 1e-10);
        }
        let ys = sample_line(b, plan.y_points, s);
        let zs: Vec<f64> = (0..plan.z_points).map(|k| b * k as f64 / (plan.z_points - 1) as f64).collect();
        for &y in &ys {
            let v = m.value(y);
            let d1 = m.d1(y);
            let d2 = m.d2(y);
            sup_value[j] = sup_value[j].max(v);
            sup_d1[j] = sup_d1[j].max(d1.abs());
            sup_d2[j] = sup_d2[j].max(d2.abs());
            for &z in &zs {
                let bound = c2 * (s * z.abs()).exp() * v;
                let worst = m.value(y + z).max(m.value(y - z));
                two = two.min(1.0 - worst / bound);
            }
            let ratio = if y < 0.0 { m.lower(y) / v } else { m.upper(y) / v };
            three = three.min(1.0 - ratio / c3);
            let lr = d1 / v;
            logd[j] = logd[j].max(lr.abs());
            curv[j] = curv[j].max((d2 / v).abs());
            four = four.min(1.0 - lr.abs() / c4);
            if y.abs() > r_tail {
                // π′/π ≤ −ε̃ (aaᵀ)⁻¹_jj sgn(y), with ε̃ (aaᵀ)⁻¹_jj = s.
                let slack = (-s * y.signum() - lr) * y.signum() / s;
                tail = tail.min(slack);
            }
        }
    }
    let mut five = f64::INFINITY;
    let mut c5_tilde = 0.0f64;
    for i in 0..d {
        for j in 0..d {
            let (si, sj) = (p.s[i], p.s[j]);
            let ratio = if i == j { curv[i] } else { logd[i] * logd[j] };
            five = five.min(1.0 - ratio / (c5 * si * sj));
            let mut sup = p.c_eta;
            for l in 0..d {
                sup *= if l == i && l == j {
                    sup_d2[l]
                } else if l == i || l == j {
                    sup_d1[l]
                } else {
                    sup_value[l]
                };
            }
            c5_tilde = c5_tilde.max(sup);
        }
    }

    let (k2, epsilon0, c_hat) = match jumps {
        Some((law, gamma)) if law.intensity > 0.0 => {
            if gamma.shape() != (d, d) || law.dim() != d {
                return invalid("jump law and gamma must match the prior dimension");
            }
            let gtg = gamma.transpose() * gamma;
            let k2 = gtg.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let row = (0..d).map(|j| gamma.row(j).norm()).fold(0.0, f64::max);
            let epsilon0 = 1.01 * eta * d as f64 * k1 * row;
            let zq = JumpQuadrature::new(law, &DMatrix::identity(d, d), &QuadratureSpec::with_nodes(32))?;
            let integral: f64 = zq
                .nodes
                .iter()
                .map(|(z, w)| {
                    let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                    w * n * n * (epsilon0 * n).exp()
                })
                .sum();
            let bound = k3 / (4f64.powi(d as i32 + 4) * k1 * k1 * k2);
            (k2, epsilon0, Some(CHatCheck { integral, bound, holds: integral <= bound }))
        }
        _ => (0.0, 0.0, None),
    };

    let points = vec![
        Check::new("point1_decay", decay, 0.0),
        Check::new("point2_shift", two, 1e-12),
        Check::new("point3_tail_ratio", three, 0.0),
        Check::new("point4_log_derivative", tail.min(four), 1e-9),
        Check::new("point5_hessian", five, 1e-12),
    ];
    let pass = points.iter().all(|c| c.pass);
    Ok(AdReport {
        eta,
        constants: AdConstants {
            k1,
            k2,
            k3,
            epsilon: eta,
            epsilon_tilde: eta,
            epsilon0,
            c2,
            c3,
            c4,
            c5,
            c5_tilde,
            r: (d as f64).sqrt() / (eta * k3),
        },
        points,
        c_hat,
        pass,
    })
}

/// (c_K, c′_K) for one axis: ‖K‖^{d−1}‖K^{(r+1)}‖^{β−r}(2‖K^{(r)}‖)^{1−(β−r)} and
/// the largest ‖K‖^{d−1}‖K^{(k)}‖ over k ≤ r, with r the largest integer below β.
pub fn holder_constants(kernel: &KernelSpec, beta: f64, d: usize) -> Result<(f64, f64)> {
    let r = holder_order(beta)?;
    let sup = |k: usize| -> f64 {
        (0..=4000)
            .map(|i| {
                let u = -1.0 + i as f64 / 2000.0;
                match k {
                    0 => kernel.eval(u),
                    1 => kernel.derivative(u),
                    2 => kernel.second_derivative(u),
                    _ => third_derivative(kernel, u),
                }
                .abs()
            })
            .fold(0.0, f64::max)
    };
    let k0 = sup(0).powi(d as i32 - 1);
    let frac = beta - r as f64;
    let c_k = k0 * sup(r + 1).powf(frac) * (2.0 * sup(r)).powf(1.0 - frac);
    let c_kp = (0..=r).map(|k| k0 * sup(k)).fold(0.0, f64::max);
    Ok((c_k, c_kp))
}

fn third_derivative(kernel: &KernelSpec, u: f64) -> f64 {
    kernel
        .coefficients
        .iter()
        .enumerate()
        .skip(3)
        .map(|(j, c)| (j * (j - 1) * (j - 2)) as f64 * c * u.powi(j as i32 - 3))
        .sum()
}

/// Largest integer strictly below β; orders above two are not supported.
fn holder_order(beta: f64) -> Result<usize> {
    if !(beta > 0.0) || beta > 3.0 {
        return invalid(format!("Hölder probe supports 0 < β ≤ 3, got {beta}"));
    }
    Ok((beta.ceil() as usize).saturating_sub(1))
}

/// Largest ε allowed by the Hölder argument for π₁: min_i L_i / max(c_K, c′_K).
pub fn holder_epsilon(spec: &SmoothnessSpec, kernel: &KernelSpec) -> Result<f64> {
    let d = spec.dim();
    let mut eps = f64::INFINITY;
    for (b, l) in spec.beta.iter().zip(&spec.l) {
        let (c, cp) = holder_constants(kernel, *b, d)?;
        eps = eps.min(l / c.max(cp));
    }
    Ok(eps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderAxis {
    pub axis: usize,
    pub order: usize,
    /// sup of |D^r π₁(x+te_i) − D^r π₁(x)| / |t|^{β−r}.
    pub quotient: f64,
    /// sup over k ≤ r of |D^k π₁|.
    pub derivative: f64,
    /// Same two quantities for π₀ alone.
    pub base_quotient: f64,
    pub base_derivative: f64,
    pub bound: f64,
    pub pass: bool,
}

fn pi0_axis_derivative(p: &PriorZero, x: &[f64], i: usize, k: usize) -> f64 {
    let m = p.marginal(i);
    let others: f64 = (0..x.len()).filter(|j| *j != i).map(|j| p.marginal(j).value(x[j])).product();
    let dk = match k {
        0 => m.value(x[i]),
        1 => m.d1(x[i]),
        _ => m.d2(x[i]),
    };
    p.c_eta * others * dk
}

/// Finite-difference Hölder quotients of π₁ along each axis on a grid around
/// and inside K_T, against 2L_i.
pub fn holder_probe(p1: &PriorOne, spec: &SmoothnessSpec) -> Result<Vec<HolderAxis>> {
    let d = p1.base.dim();
    if spec.dim() != d {
        return invalid("smoothness dimension differs from the prior");
    }
    let offsets = [-1.3, -0.9, -0.55, -0.2, 0.0, 0.15, 0.45, 0.8, 1.1];
    let ts: Vec<f64> = (0..10).map(|k| 0.5f64.powi(k)).collect();
    (0..d)
        .map(|i| {
            let r = holder_order(spec.beta[i])?;
            let frac = spec.beta[i] - r as f64;
            let (mut q1, mut d1, mut q0, mut d0) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            let mut idx = vec![0usize; d];
            loop {
                let x: Vec<f64> = (0..d).map(|j| p1.x0[j] + offsets[idx[j]] * p1.h.h[j]).collect();
                let full =
                    |y: &[f64], k: usize| pi0_axis_derivative(&p1.base, y, i, k) + p1.bump.axis_derivative(y, i, k);
                for k in 0..=r {
                    d1 = d1.max(full(&x, k).abs());
                    d0 = d0.max(pi0_axis_derivative(&p1.base, &x, i, k).abs());
                }
                let here1 = full(&x, r);
                let here0 = pi0_axis_derivative(&p1.base, &x, i, r);
                for &tf in &ts {
                    for sign in [-1.0, 1.0] {
                        let t = sign * tf * p1.h.h[i];
                        let mut y = x.clone();
                        y[i] += t;
                        let den = t.abs().powf(frac);
                        q1 = q1.max((full(&y, r) - here1).abs() / den);
                        q0 = q0.max((pi0_axis_derivative(&p1.base, &y, i, r) - here0).abs() / den);
                    }
                }
                let mut j = 0;
                while j < d {
                    idx[j] += 1;
                    if idx[j] < offsets.len() {
                        break;
                    }
                    idx[j] = 0;
                    j += 1;
                }
                if j == d {
                    break;
                }
            }
            let bound = 2.0 * spec.l[i];
            Ok(HolderAxis {
                axis: i,
                order: r,
                quotient: q1,
                derivative: d1,
                base_quotient: q0,
                base_derivative: d0,
                bound,
                pass: q1 <= bound && d1 <= bound,
            })
        })
        .collect()
}

/// Sampling for the drift-gap probes: m + 1 points per axis across K_T (the
/// shell around it uses half as many), and `n` Gauss nodes per panel for the
/// integrals off K_T.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapPlan {
    pub m: usize,
    pub n: usize,
}

impl GapPlan {
    pub fn refined(&self) -> Self {
        Self { m: 2 * self.m, n: 2 * self.n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRatios {
    /// sup_{K_T^c} |Δb| M_T.
    pub outside: f64,
    /// sup_{K_T} |Δb| M_T / Σ 1/h_j.
    pub inside: f64,
    /// max_i ∫_{K_T^c} |Δb^i| π₀ · M_T / ∏ h_l.
    pub integrated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub coarse: GapRatios,
    pub fine: GapRatios,
    /// Raw sup of |Δb| on K_T for the fine plan.
    pub inside_sup: f64,
    pub stable: bool,
}

/// Jump term of the bump for centred Gaussian jumps whose displacement γz
/// has independent coordinates. The bump is narrower than any practical
/// tensor rule's node spacing, so each coordinate is integrated on the
/// window where the shifted bump is supported.
#[derive(Debug, Clone)]
pub struct BumpJumps {
    pub lambda: f64,
    /// Standard deviations of the coordinates of γz.
    pub sd: Vec<f64>,
    pub nodes: usize,
}

impl BumpJumps {
    /// `None` when the law is not of that form or has zero intensity.
    pub fn new(jumps: &JumpMeasureSpec, gamma: &DMatrix<f64>) -> Option<Self> {
        let JumpLaw::Gaussian { cov } = &jumps.jump_law else { return None };
        if jumps.intensity == 0.0 {
            return None;
        }
        let d = cov.len();
        let c = gamma * DMatrix::from_fn(d, d, |i, j| cov[i][j]) * gamma.transpose();
        let scale = c.diagonal().max();
        let off = (0..d).flat_map(|i| (0..d).filter(move |j| *j != i).map(move |j| (i, j)));
        if off.into_iter().any(|(i, j)| c[(i, j)].abs() > 1e-14 * scale) || c.diagonal().min() <= 0.0 {
            return None;
        }
        Some(Self { lambda: jumps.intensity, sd: c.diagonal().iter().map(|v| v.sqrt()).collect(), nodes: 24 })
    }

    fn normal(&self, j: usize, c: f64) -> f64 {
        let s = self.sd[j];
        (-0.5 * (c / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }

    /// E[φ((x − c − x₀)/h)] over c ~ N(0, σ_j²) for φ supported on [−1, 1].
    fn expect(&self, bump: &BumpDensity, j: usize, xj: f64, phi: impl Fn(f64) -> f64) -> f64 {
        let h = bump.h[j];
        let off = xj - bump.x0[j];
        quadrature::integrate(-1.0, 1.0, self.nodes, |u| phi(u) * self.normal(j, off - h * u)) * h
    }

    /// Same quantity as `JumpQuadrature::half_line_integral` for the bump.
    /// Both half-line forms agree because ∫K = 0, and E[c] = 0 removes the
    /// compensator.
    pub fn term(&self, bump: &BumpDensity, x: &[f64], i: usize) -> f64 {
        let mut p = self.lambda * bump.amplitude;
        for j in (i + 1)..x.len() {
            p *= bump.kernel.eval(bump.u(j, x[j]));
            if p == 0.0 {
                return 0.0;
            }
        }
        for j in 0..i {
            p *= self.expect(bump, j, x[j], |u| bump.kernel.eval(u));
        }
        let k = &bump.kernel;
        let shifted = self.expect(bump, i, x[i], |u| k.cumulative(u));
        // Shifts with x_i − c above the box contribute C(1) = ∫K, which is zero.
        p * bump.h[i] * (shifted - k.cumulative(bump.u(i, x[i])))
    }
}

/// b_{π₁} − b_{π₀} for shared a, γ and jump law.
pub struct DriftPair {
    pub b0: DensityDrift,
    pub resolved: Option<BumpJumps>,
    reach: f64,
}

impl DriftPair {
    pub fn new(
        p0: &PriorZero,
        p1: &PriorOne,
        gamma: &DMatrix<f64>,
        jumps: &JumpMeasureSpec,
        quad: &QuadratureSpec,
    ) -> Result<Self> {
        if p0.a != p1.base.a || p0.eta != p1.base.eta {
            return invalid("priors must share a and η");
        }
        let b0 = DensityDrift::new(p0.density.clone(), &p0.a, gamma, jumps, quad, "pi0")?;
        let resolved = BumpJumps::new(jumps, gamma);
        let reach = match &resolved {
            Some(r) => 9.0 * r.sd.iter().fold(0.0f64, |m, v| m.max(*v)),
            None => {
                b0.jumps.nodes.iter().map(|(c, _)| c.iter().fold(0.0f64, |m, v| m.max(v.abs()))).fold(0.0, f64::max)
            }
        };
        Ok(Self { b0, resolved, reach })
    }

    fn bump_term(&self, bump: &BumpDensity, x: &[f64], i: usize) -> f64 {
        match &self.resolved {
            Some(r) => r.term(bump, x, i),
            None => self.b0.jumps.half_line_integral(bump, x, i, HalfLine::Auto),
        }
    }

    pub fn gap(&self, p1: &PriorOne, x: &[f64]) -> Vec<f64> {
        let g0 = self.b0.g.value(x);
        let grad0 = self.b0.g.gradient(x);
        let bump = p1.bump.as_ref();
        let g1 = g0 + bump.value(x);
        let grad1: Vec<f64> = grad0.iter().zip(bump.gradient(x)).map(|(a, b)| a + b).collect();
        (0..x.len())
            .map(|i| {
                let j0 = self.b0.jumps.half_line_integral(self.b0.g.as_ref(), x, i, HalfLine::Auto);
                let jb = self.bump_term(bump, x, i);
                let c0 = self.b0.continuous_component(i, x, &grad0, g0);
                let c1 = self.b0.continuous_component(i, x, &grad1, g1);
                c1 + (j0 + jb) / g1 - c0 - j0 / g0
            })
            .collect()
    }

    /// |Δb^i| π₀ off K_T, where π₁ = π₀ and ∇(π₁ − π₀) = 0, so only the jump
    /// term of the bump survives.
    pub fn outside_weighted(&self, bump: &BumpDensity, x: &[f64], i: usize) -> f64 {
        self.bump_term(bump, x, i).abs()
    }

    /// Distance beyond K_T past which the gap is negligible.
    pub fn reach(&self) -> f64 {
        self.reach
    }

    /// Panel width for integrals off K_T: one jump standard deviation.
    fn panel_width(&self) -> f64 {
        match &self.resolved {
            Some(r) => r.sd.iter().fold(f64::INFINITY, |m, v| m.min(*v)),
            None => self.reach / 8.0,
        }
    }

    pub fn has_jumps(&self) -> bool {
        !self.b0.jumps.is_empty()
    }
}

/// Per-axis panels: K_T's interval plus, when `extend`, unit-σ panels out to
/// `reach` on both sides. The flag marks the K_T interval.
fn axis_panels(lo: f64, hi: f64, reach: f64, width: f64, extend: bool) -> Vec<(f64, f64, bool)> {
    let mut out = vec![(lo, hi, true)];
    if extend {
        let k = (reach / width).ceil().max(1.0) as usize;
        let w = reach / k as f64;
        for q in 0..k {
            out.push((lo - (q + 1) as f64 * w, lo - q as f64 * w, false));
            out.push((hi + q as f64 * w, hi + (q + 1) as f64 * w, false));
        }
    }
    out
}

/// ∫_{K_T^c} f for an integrand that vanishes unless x_j ∈ K_T for j > i.
fn outside_integral(pair: &DriftPair, p1: &PriorOne, n: usize, i: usize, f: impl Fn(&[f64]) -> f64 + Sync) -> f64 {
    let (lo, hi) = p1.bump_box();
    let d = lo.len();
    let width = pair.panel_width();
    let axes: Vec<Vec<(f64, f64, bool)>> =
        (0..d).map(|j| axis_panels(lo[j], hi[j], pair.reach(), width, j <= i)).collect();
    // K_T panels carry the bump polynomial of degree 10, so they get at
    // least six Gauss nodes.
    let on_box = n.max(6);
    let mut blocks = Vec::new();
    let mut idx = vec![0usize; d];
    loop {
        if idx.iter().enumerate().any(|(j, k)| !axes[j][*k].2) {
            let bl: Vec<f64> = (0..d).map(|j| axes[j][idx[j]].0).collect();
            let bh: Vec<f64> = (0..d).map(|j| axes[j][idx[j]].1).collect();
            let ns: Vec<usize> = (0..d).map(|j| if axes[j][idx[j]].2 { on_box } else { n }).collect();
            blocks.push((bl, bh, ns));
        }
        let mut j = 0;
        while j < d {
            idx[j] += 1;
            if idx[j] < axes[j].len() {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
        if j == d {
            break;
        }
    }
    blocks
        .par_iter()
        .map(|(bl, bh, ns)| {
            let mut acc = 0.0;
            tensor_rule_with(bl, bh, ns, |x, w| acc += w * f(x));
            acc
        })
        .sum()
}

/// Per-axis sample coordinates: m + 1 evenly spaced points across K_T and
/// 2m + 1 geometrically spaced points on each side out to the reach. Doubling
/// m gives a superset.
fn axis_samples(x0: f64, h: f64, reach: f64, m: usize) -> Vec<f64> {
    let mut out: Vec<f64> = (0..=m).map(|q| x0 - h + 2.0 * h * q as f64 / m as f64).collect();
    let k = 2 * m + 1;
    let first = 0.01 * reach;
    for q in 0..k {
        let r = first * (reach / first).powf(q as f64 / (k - 1) as f64);
        out.push(x0 - h - r);
        out.push(x0 + h + r);
    }
    out
}

fn tensor_points(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = axes.len();
    let mut out = Vec::new();
    let mut idx = vec![0usize; d];
    loop {
        out.push((0..d).map(|j| axes[j][idx[j]]).collect());
        let mut j = 0;
        while j < d {
            idx[j] += 1;
            if idx[j] < axes[j].len() {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
        if j == d {
            return out;
        }
    }
}

fn gap_ratios(pair: &DriftPair, p1: &PriorOne, plan: &GapPlan) -> (GapRatios, f64) {
    let (lo, hi) = p1.bump_box();
    let d = lo.len();
    let m_t = p1.m_t;
    let inv_h: f64 = p1.h.h.iter().map(|v| 1.0 / v).sum();
    let prod_h: f64 = p1.h.h.iter().product();
    let sup = |pts: &[Vec<f64>]| -> f64 {
        pts.par_iter().map(|x| pair.gap(p1, x).iter().fold(0.0f64, |m, v| m.max(v.abs()))).reduce(|| 0.0, f64::max)
    };
    let grid: Vec<Vec<f64>> =
        (0..d).map(|j| (0..=plan.m).map(|q| lo[j] + (hi[j] - lo[j]) * q as f64 / plan.m as f64).collect()).collect();
    let inside = sup(&tensor_points(&grid));
    let shell_reach = pair.reach().max(4.0 * p1.h.h.iter().fold(0.0, |m: f64, v| m.max(*v)));
    let axes: Vec<Vec<f64>> =
        (0..d).map(|j| axis_samples(p1.x0[j], p1.h.h[j], shell_reach, (plan.m / 2).max(1))).collect();
    let shell: Vec<Vec<f64>> = tensor_points(&axes).into_iter().filter(|x| !p1.bump.inside(x)).collect();
    let outside = sup(&shell);
    let integrated = if !pair.has_jumps() {
        0.0
    } else {
        (0..d)
            .map(|i| outside_integral(pair, p1, plan.n, i, |x| pair.outside_weighted(&p1.bump, x, i)))
            .fold(0.0, f64::max)
    };
    (GapRatios { outside: outside * m_t, inside: inside * m_t / inv_h, integrated: integrated * m_t / prod_h }, inside)
}

fn within_two(a: f64, b: f64) -> bool {
    if a == 0.0 && b == 0.0 {
        return true;
    }
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    lo > 0.0 && hi <= 2.0 * lo
}

/// Fitted constants of the three drift-gap envelopes at two sample
/// refinements.
pub fn drift_gap(
    p0: &PriorZero,
    p1: &PriorOne,
    gamma: &DMatrix<f64>,
    jumps: &JumpMeasureSpec,
    plan: &GapPlan,
    quad: &QuadratureSpec,
) -> Result<GapReport> {
    let pair = DriftPair::new(p0, p1, gamma, jumps, quad)?;
    let (coarse, _) = gap_ratios(&pair, p1, plan);
    let (fine, inside_sup) = gap_ratios(&pair, p1, &plan.refined());
    let all = [coarse.outside, coarse.inside, coarse.integrated, fine.outside, fine.inside, fine.integrated];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite drift gap".into()));
    }
    let stable = within_two(coarse.outside, fine.outside)
        && within_two(coarse.inside, fine.inside)
        && within_two(coarse.integrated, fine.integrated);
    Ok(GapReport { coarse, fine, inside_sup, stable })
}

/// T ∫ |b_{π₁} − b_{π₀}|² π₀ with `n` Gauss nodes per block.
pub fn l2_drift_distance(
    p0: &PriorZero,
    p1: &PriorOne,
    t: f64,
    gamma: &DMatrix<f64>,
    jumps: &JumpMeasureSpec,
    n: usize,
    quad: &QuadratureSpec,
) -> Result<f64> {
    let pair = DriftPair::new(p0, p1, gamma, jumps, quad)?;
    let (lo, hi) = p1.bump_box();
    let inner = {
        let mut pts = Vec::new();
        tensor_rule(&lo, &hi, n, |x, w| pts.push((x.to_vec(), w)));
        pts.par_iter()
            .map(|(x, w)| w * pair.gap(p1, x).iter().map(|v| v * v).sum::<f64>() * eval_pi0(p0, x))
            .sum::<f64>()
    };
    let outer = if !pair.has_jumps() {
        0.0
    } else {
        (0..p0.dim())
            .map(|i| {
                outside_integral(&pair, p1, n, i, |x| pair.outside_weighted(&p1.bump, x, i).powi(2) / eval_pi0(p0, x))
            })
            .sum::<f64>()
    };
    let v = t * (inner + outer);
    if !v.is_finite() {
        return Err(Error::Numerical("non-finite L2 drift distance".into()));
    }
    Ok(v)
}
