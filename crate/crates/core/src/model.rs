//! Jump SDE with constant coefficients and finite-intensity compound-Poisson
//! jumps, simulated by Euler–Maruyama:
//!
//! X_{k+1} = X_k + b(X_k)Δ + a√Δ ξ_k + γ Σ Z − γ λ E[Z] Δ.

use crate::error::{invalid, Error, Result};
use crate::rng::{rng_from_seed, Rng};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

pub trait Drift: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);
    /// Stable textual identity, hashed into path fingerprints.
    fn describe(&self) -> String;

    fn value(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval(x, &mut out);
        out
    }
}

/// b(x) = −4 (x/|x|) exp(−1/(4|x| − 1)) for |x| > 1/4, zero inside.
pub fn reference_drift(x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != 3 {
        return invalid(format!("reference drift is three-dimensional, got {}", x.len()));
    }
    let mut out = vec![0.0; 3];
    ReferenceDrift.eval(x, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceDrift;

impl Drift for ReferenceDrift {
    fn dim(&self) -> usize {
        3
    }
    #[inline]
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        if r <= 0.25 {
            out[..3].fill(0.0);
            return;
        }
        let s = -4.0 * (-1.0 / (4.0 * r - 1.0)).exp() / r;
        for m in 0..3 {
            out[m] = s * x[m];
        }
    }
    fn describe(&self) -> String {
        "reference".into()
    }
}

/// b(x) = c + B x.
#[derive(Debug, Clone)]
pub struct AffineDrift {
    pub offset: Vec<f64>,
    pub matrix: DMatrix<f64>,
}

impl AffineDrift {
    pub fn constant(offset: Vec<f64>) -> Self {
        let d = offset.len();
        Self { offset, matrix: DMatrix::zeros(d, d) }
    }
    pub fn zero(d: usize) -> Self {
        Self::constant(vec![0.0; d])
    }
    pub fn linear(matrix: DMatrix<f64>) -> Self {
        Self { offset: vec![0.0; matrix.nrows()], matrix }
    }
}

impl Drift for AffineDrift {
    fn dim(&self) -> usize {
        self.offset.len()
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.offset.len() {
            out[i] = self.offset[i] + (0..x.len()).map(|j| self.matrix[(i, j)] * x[j]).sum::<f64>();
        }
    }
    fn describe(&self) -> String {
        format!("affine:{:?}:{:?}", self.offset, self.matrix.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum JumpLaw {
    /// Centred Gaussian with covariance `cov` (row-major d×d).
    Gaussian {
        cov: Vec<Vec<f64>>,
    },
    PointMass {
        z0: Vec<f64>,
    },
    /// Histogram density: `weights` over a regular grid of `cells` per axis on
    /// the box [lower, upper], row-major with the first axis slowest.
    Tabulated {
        lower: Vec<f64>,
        upper: Vec<f64>,
        cells: usize,
        weights: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpMeasureSpec {
    pub intensity: f64,
    #[serde(flatten)]
    pub jump_law: JumpLaw,
    pub mean_jump: Vec<f64>,
}

impl JumpMeasureSpec {
    pub fn new(intensity: f64, jump_law: JumpLaw) -> Result<Self> {
        if !(intensity >= 0.0) || !intensity.is_finite() {
            return invalid("jump intensity must be finite and nonnegative");
        }
        let mean_jump = match &jump_law {
            JumpLaw::Gaussian { cov } => {
                let d = cov.len();
                let m = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
                if cov.iter().any(|r| r.len() != d) {
                    return invalid("jump covariance must be square");
                }
                if (&m - m.transpose()).abs().max() > 1e-12 {
                    return invalid("jump covariance must be symmetric");
                }
                if m.clone().symmetric_eigenvalues().min() < -1e-12 {
                    return invalid("jump covariance must be positive semidefinite");
                }
                vec![0.0; d]
            }
            JumpLaw::PointMass { z0 } => z0.clone(),
            JumpLaw::Tabulated { lower, upper, cells, weights } => {
                let d = lower.len();
                if upper.len() != d || *cells == 0 || weights.len() != cells.pow(d as u32) {
                    return invalid("tabulated jump law has inconsistent shape");
                }
                if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
                    return invalid("tabulated weights must be nonnegative with positive sum");
                }
                let total: f64 = weights.iter().sum();
                let mut mean = vec![0.0; d];
                for (idx, w) in weights.iter().enumerate() {
                    let centre = tab_cell_centre(lower, upper, *cells, idx);
                    for j in 0..d {
                        mean[j] += w / total * centre[j];
                    }
                }
                mean
            }
        };
        Ok(Self { intensity, jump_law, mean_jump })
    }

    pub fn none(d: usize) -> Self {
        Self { intensity: 0.0, jump_law: JumpLaw::PointMass { z0: vec![0.0; d] }, mean_jump: vec![0.0; d] }
    }

    pub fn gaussian_identity(intensity: f64, d: usize) -> Result<Self> {
        let cov = (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        Self::new(intensity, JumpLaw::Gaussian { cov })
    }

    pub fn dim(&self) -> usize {
        self.mean_jump.len()
    }
}

pub(crate) fn tab_cell_centre(lower: &[f64], upper: &[f64], cells: usize, mut idx: usize) -> Vec<f64> {
    let d = lower.len();
    let mut c = vec![0.0; d];
    for j in (0..d).rev() {
        let k = idx % cells;
        idx /= cells;
        let w = (upper[j] - lower[j]) / cells as f64;
        c[j] = lower[j] + (k as f64 + 0.5) * w;
    }
    c
}

/// Draws one jump size from the law behind F.
pub fn sample_jump(spec: &JumpMeasureSpec, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(spec.intensity > 0.0) {
        return invalid("cannot sample jumps from a zero-intensity measure");
    }
    Ok(JumpSampler::new(spec)?.draw(rng))
}

struct JumpSampler {
    kind: SamplerKind,
}

enum SamplerKind {
    Gaussian(DMatrix<f64>),
    Point(Vec<f64>),
    Tab { lower: Vec<f64>, upper: Vec<f64>, cells: usize, cdf: Vec<f64> },
}

impl JumpSampler {
    fn new(spec: &JumpMeasureSpec) -> Result<Self> {
        let kind = match &spec.jump_law {
            JumpLaw::Gaussian { cov } => {
                let d = cov.len();
                let m = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
                // Symmetric square root handles singular covariances too.
                let eig = m.symmetric_eigen();
                let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
                let root = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
                SamplerKind::Gaussian(root)
            }
            JumpLaw::PointMass { z0 } => SamplerKind::Point(z0.clone()),
            JumpLaw::Tabulated { lower, upper, cells, weights } => {
                let total: f64 = weights.iter().sum();
                let mut acc = 0.0;
                let cdf = weights
                    .iter()
                    .map(|w| {
                        acc += w / total;
                        acc
                    })
                    .collect();
                SamplerKind::Tab { lower: lower.clone(), upper: upper.clone(), cells: *cells, cdf }
            }
        };
        Ok(Self { kind })
    }

    fn draw(&self, rng: &mut Rng) -> Vec<f64> {
        match &self.kind {
            SamplerKind::Gaussian(root) => {
                let d = root.nrows();
                let xi = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                (root * xi).iter().copied().collect()
            }
            SamplerKind::Point(z) => z.clone(),
            SamplerKind::Tab { lower, upper, cells, cdf } => {
                let u: f64 = rng.random();
                let idx = cdf.partition_point(|c| *c < u).min(cdf.len() - 1);
                let centre = tab_cell_centre(lower, upper, *cells, idx);
                (0..lower.len())
                    .map(|j| {
                        let w = (upper[j] - lower[j]) / *cells as f64;
                        centre[j] + (rng.random::<f64>() - 0.5) * w
                    })
                    .collect()
            }
        }
    }
}

#[derive(Clone)]
pub struct ModelSpec {
    pub dim: usize,
    pub drift: Arc<dyn Drift>,
    pub a: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub jumps: JumpMeasureSpec,
    /// Ellipticity constant c with spectrum of a aᵀ inside [1/c, c].
    pub ellipticity: f64,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("dim", &self.dim)
            .field("drift", &self.drift.describe())
            .field("a", &self.a)
            .field("gamma", &self.gamma)
            .field("jumps", &self.jumps)
            .finish()
    }
}

impl ModelSpec {
    pub fn new(drift: Arc<dyn Drift>, a: DMatrix<f64>, gamma: DMatrix<f64>, jumps: JumpMeasureSpec) -> Result<Self> {
        Self::build(drift, a, gamma, jumps, false)
    }

    /// Skips the ellipticity check. Intended for deterministic test models
    /// with a = 0.
    pub fn new_degenerate(
        drift: Arc<dyn Drift>,
        a: DMatrix<f64>,
        gamma: DMatrix<f64>,
        jumps: JumpMeasureSpec,
    ) -> Result<Self> {
        Self::build(drift, a, gamma, jumps, true)
    }

    fn build(
        drift: Arc<dyn Drift>,
        a: DMatrix<f64>,
        gamma: DMatrix<f64>,
        jumps: JumpMeasureSpec,
        allow_degenerate: bool,
    ) -> Result<Self> {
        let d = drift.dim();
        if d == 0 {
            return invalid("dimension must be at least 1");
        }
        if a.shape() != (d, d) || gamma.shape() != (d, d) || jumps.dim() != d {
            return invalid(format!("coefficient shapes do not match dimension {d}"));
        }
        let eig = (&a * a.transpose()).symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        let ellipticity = if lo > 0.0 { hi.max(1.0 / lo).max(1.0) } else { f64::INFINITY };
        if !allow_degenerate && !(lo > 1e-12) {
            return invalid("a aᵀ is not uniformly elliptic");
        }
        if jumps.intensity > 0.0 && gamma.determinant().abs() < 1e-14 {
            return invalid("gamma must be invertible when jumps are present");
        }
        Ok(Self { dim: d, drift, a, gamma, jumps, ellipticity })
    }

    /// Reference simulation model: bounded drift, a = γ = I₃, unit-intensity
    /// N(0, I₃) jumps.
    pub fn reference() -> Self {
        Self::new(
            Arc::new(ReferenceDrift),
            DMatrix::identity(3, 3),
            DMatrix::identity(3, 3),
            JumpMeasureSpec::gaussian_identity(1.0, 3).expect("valid law"),
        )
        .expect("reference model is valid")
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.dim.to_le_bytes());
        h.update(self.drift.describe().as_bytes());
        for v in self.a.iter().chain(self.gamma.iter()) {
            h.update(v.to_le_bytes());
        }
        h.update(serde_json::to_vec(&self.jumps).expect("serializable"));
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub dim: usize,
    pub dt: f64,
    /// Row-major, one row per grid time kΔ.
    pub states: Vec<f64>,
    pub seed: u64,
    pub model_fingerprint: String,
    /// (k, γ Σ Z) for every step k → k+1 that contained jumps.
    pub jumps: Vec<(usize, Vec<f64>)>,
}

impl PathRecord {
    pub fn len(&self) -> usize {
        self.states.len() / self.dim.max(1)
    }
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }
    /// The first `steps` steps, as a path of its own.
    pub fn prefix(&self, steps: usize) -> PathRecord {
        let n = steps.min(self.len() - 1);
        PathRecord {
            dim: self.dim,
            dt: self.dt,
            states: self.states[..(n + 1) * self.dim].to_vec(),
            seed: self.seed,
            model_fingerprint: self.model_fingerprint.clone(),
            jumps: self.jumps.iter().filter(|(k, _)| *k < n).cloned().collect(),
        }
    }

    pub fn horizon(&self) -> f64 {
        (self.len().saturating_sub(1)) as f64 * self.dt
    }
    pub fn terminal(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// Joins `other` after `self`, dropping the terminal state of `self` so
    /// that the left-endpoint sums of both halves add up.
    pub fn concat(&self, other: &PathRecord) -> Result<PathRecord> {
        if self.dim != other.dim || self.dt != other.dt {
            return invalid("paths differ in dimension or step");
        }
        let n = self.len() - 1;
        let mut states = self.states[..n * self.dim].to_vec();
        states.extend_from_slice(&other.states);
        let mut jumps: Vec<_> = self.jumps.iter().filter(|(k, _)| *k < n).cloned().collect();
        jumps.extend(other.jumps.iter().map(|(k, v)| (k + n, v.clone())));
        Ok(PathRecord {
            dim: self.dim,
            dt: self.dt,
            states,
            seed: self.seed,
            model_fingerprint: self.model_fingerprint.clone(),
            jumps,
        })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# d={} dt={} N={} seed={} fingerprint={}",
            self.dim,
            self.dt,
            self.len(),
            self.seed,
            self.model_fingerprint
        )?;
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim).map(|i| format!("x{i}")));
        wr.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![format!("{}", k as f64 * self.dt)];
            row.extend(self.state(k).iter().map(|v| format!("{v}")));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads the CSV form. Jump bookkeeping is not part of it.
    pub fn read_csv<R: BufRead>(mut r: R) -> Result<PathRecord> {
        let mut first = String::new();
        r.read_line(&mut first)?;
        let meta = |key: &str| -> Result<String> {
            first
                .split_whitespace()
                .find_map(|t| t.strip_prefix(&format!("{key}=")).map(str::to_string))
                .ok_or_else(|| Error::Config(format!("path header lacks {key}")))
        };
        let dim: usize = meta("d")?.parse().map_err(|_| Error::Config("bad d".into()))?;
        let dt: f64 = meta("dt")?.parse().map_err(|_| Error::Config("bad dt".into()))?;
        let seed: u64 = meta("seed")?.parse().map_err(|_| Error::Config("bad seed".into()))?;
        let fingerprint = meta("fingerprint")?;
        let mut rd = csv::Reader::from_reader(r);
        let mut states = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != dim + 1 {
                return Err(Error::Config("path row has wrong width".into()));
            }
            for v in rec.iter().skip(1) {
                states.push(v.parse::<f64>().map_err(|_| Error::Config(format!("bad number {v}")))?);
            }
        }
        Ok(PathRecord { dim, dt, states, seed, model_fingerprint: fingerprint, jumps: Vec::new() })
    }
}

pub fn step_count(t: f64, dt: f64) -> usize {
    (t / dt + 1e-9).floor() as usize
}

pub fn euler_maruyama_jump(model: &ModelSpec, x0: &[f64], t: f64, dt: f64, seed: u64) -> Result<PathRecord> {
    let mut rng = rng_from_seed(seed);
    simulate_with_rng(model, x0, t, dt, seed, &mut rng)
}

pub(crate) fn simulate_with_rng(
    model: &ModelSpec,
    x0: &[f64],
    t: f64,
    dt: f64,
    seed: u64,
    rng: &mut Rng,
) -> Result<PathRecord> {
    let d = model.dim;
    if x0.len() != d {
        return invalid(format!("initial point has dimension {}, model has {d}", x0.len()));
    }
    if !(dt > 0.0) || !(t >= dt) {
        return invalid("need dt > 0 and T ≥ dt");
    }
    let steps = step_count(t, dt);
    let sqdt = dt.sqrt();
    let lambda = model.jumps.intensity;
    let sampler = if lambda > 0.0 { Some(JumpSampler::new(&model.jumps)?) } else { None };
    let exp =
        if lambda > 0.0 { Some(Exp::new(lambda).map_err(|e| Error::InvalidArgument(e.to_string()))?) } else { None };
    let compensation: Vec<f64> = (0..d)
        .map(|i| lambda * dt * (0..d).map(|j| model.gamma[(i, j)] * model.jumps.mean_jump[j]).sum::<f64>())
        .collect();
    let compensate = compensation.iter().any(|c| *c != 0.0);
    let a_is_diag = (0..d).all(|i| (0..d).all(|j| i == j || model.a[(i, j)] == 0.0));

    let mut states = Vec::with_capacity((steps + 1) * d);
    states.extend_from_slice(x0);
    let mut jumps = Vec::new();
    let mut x = x0.to_vec();
    let mut b = vec![0.0; d];
    let mut xi = vec![0.0; d];
    let mut zsum = vec![0.0; d];
    let mut next_jump = exp.map_or(f64::INFINITY, |e| e.sample(rng));

    for k in 0..steps {
        model.drift.eval(&x, &mut b);
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let t_end = (k + 1) as f64 * dt;
        let mut jumped = false;
        if let (Some(s), Some(e)) = (&sampler, &exp) {
            while next_jump <= t_end {
                if !jumped {
                    zsum.fill(0.0);
                    jumped = true;
                }
                for (acc, z) in zsum.iter_mut().zip(s.draw(rng)) {
                    *acc += z;
                }
                next_jump += e.sample(rng);
            }
        }
        for i in 0..d {
            let noise = if a_is_diag { model.a[(i, i)] * xi[i] } else { (0..d).map(|j| model.a[(i, j)] * xi[j]).sum() };
            x[i] += b[i] * dt + sqdt * noise;
            if compensate {
                x[i] -= compensation[i];
            }
        }
        if jumped {
            let disp: Vec<f64> = (0..d).map(|i| (0..d).map(|j| model.gamma[(i, j)] * zsum[j]).sum()).collect();
            for i in 0..d {
                x[i] += disp[i];
            }
            jumps.push((k, disp));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SimulationBlowup { step: k + 1 });
        }
        states.extend_from_slice(&x);
    }
    Ok(PathRecord { dim: d, dt, states, seed, model_fingerprint: model.fingerprint(), jumps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn deterministic(drift: AffineDrift) -> ModelSpec {
        let d = drift.dim();
        ModelSpec::new_degenerate(
            Arc::new(drift),
            DMatrix::zeros(d, d),
            DMatrix::identity(d, d),
            JumpMeasureSpec::none(d),
        )
        .unwrap()
    }

    #[test]
    fn constant_path_without_sources() {
        let m = deterministic(AffineDrift::zero(3));
        let p = euler_maruyama_jump(&m, &[1.0, 2.0, 3.0], 1.0, 0.1, 5).unwrap();
        assert_eq!(p.len(), 11);
        for k in 0..p.len() {
            assert_eq!(p.state(k), &[1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn constant_drift_reaches_endpoint() {
        let m = deterministic(AffineDrift::constant(vec![1.0, 0.0, 0.0]));
        let p = euler_maruyama_jump(&m, &[0.0; 3], 1.0, 0.1, 5).unwrap();
        let end = p.terminal();
        assert_abs_diff_eq!(end[0], 1.0, epsilon = 1e-12);
        assert_eq!(end[1], 0.0);
        assert_abs_diff_eq!(p.horizon(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn reference_drift_values() {
        assert_eq!(reference_drift(&[0.0; 3]).unwrap(), vec![0.0; 3]);
        let v = reference_drift(&[0.25 + 1e-9, 0.0, 0.0]).unwrap();
        assert_eq!(v[0], 0.0);
        let v = reference_drift(&[10.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(v[0], -4.0 * (-1.0f64 / 39.0).exp(), epsilon = 1e-14);
        assert_eq!(v[1], 0.0);
        assert!(reference_drift(&[0.0; 2]).is_err());
    }

    #[test]
    fn rejects_degenerate_diffusion() {
        let r = ModelSpec::new(
            Arc::new(AffineDrift::zero(2)),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            JumpMeasureSpec::none(2),
        );
        assert!(r.is_err());
    }

    #[test]
    fn rejects_singular_gamma_with_jumps() {
        let r = ModelSpec::new(
            Arc::new(AffineDrift::zero(2)),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            JumpMeasureSpec::gaussian_identity(1.0, 2).unwrap(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn blowup_reports_step() {
        let m = deterministic(AffineDrift::linear(DMatrix::from_element(1, 1, 1e200)));
        match euler_maruyama_jump(&m, &[1.0], 1.0, 0.5, 1) {
            Err(Error::SimulationBlowup { step }) => assert_eq!(step, 2),
            other => panic!("expected blowup, got {other:?}"),
        }
    }

    #[test]
    fn point_mass_and_zero_intensity() {
        let spec = JumpMeasureSpec::new(2.0, JumpLaw::PointMass { z0: vec![0.5, -1.0] }).unwrap();
        let mut rng = rng_from_seed(3);
        assert_eq!(sample_jump(&spec, &mut rng).unwrap(), vec![0.5, -1.0]);
        assert!(sample_jump(&JumpMeasureSpec::none(2), &mut rng).is_err());
        assert_eq!(spec.mean_jump, vec![0.5, -1.0]);
    }

    #[test]
    fn gaussian_jump_mean_within_clt_band() {
        let spec = JumpMeasureSpec::gaussian_identity(1.0, 3).unwrap();
        let sampler = JumpSampler::new(&spec).unwrap();
        let mut rng = rng_from_seed(11);
        let n = 100_000;
        let mut mean = [0.0; 3];
        for _ in 0..n {
            for (m, z) in mean.iter_mut().zip(sampler.draw(&mut rng)) {
                *m += z / n as f64;
            }
        }
        for m in mean {
            assert!(m.abs() < 4.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn tabulated_law_has_cell_mean() {
        let spec = JumpMeasureSpec::new(
            1.0,
            JumpLaw::Tabulated { lower: vec![0.0], upper: vec![2.0], cells: 2, weights: vec![1.0, 3.0] },
        )
        .unwrap();
        assert_abs_diff_eq!(spec.mean_jump[0], 0.25 * 0.5 + 0.75 * 1.5, epsilon = 1e-15);
        let mut rng = rng_from_seed(1);
        for _ in 0..100 {
            let z = sample_jump(&spec, &mut rng).unwrap()[0];
            assert!((0.0..=2.0).contains(&z));
        }
    }

    #[test]
    fn compensated_point_mass_jumps_cancel_on_average() {
        let jumps = JumpMeasureSpec::new(5.0, JumpLaw::PointMass { z0: vec![1.0] }).unwrap();
        let m = ModelSpec::new(
            Arc::new(AffineDrift::zero(1)),
            DMatrix::from_element(1, 1, 1e-3),
            DMatrix::identity(1, 1),
            jumps,
        )
        .unwrap();
        let p = euler_maruyama_jump(&m, &[0.0], 1000.0, 0.01, 9).unwrap();
        let count = p.jumps.len() as f64;
        assert!(p.terminal()[0].abs() < 4.0 * (5.0f64 * 1000.0).sqrt());
        assert!(count > 0.0);
    }

    #[test]
    fn jump_count_matches_intensity() {
        let jumps = JumpMeasureSpec::new(1.0, JumpLaw::PointMass { z0: vec![1.0] }).unwrap();
        let m = ModelSpec::new(Arc::new(AffineDrift::zero(1)), DMatrix::identity(1, 1), DMatrix::identity(1, 1), jumps)
            .unwrap();
        let p = euler_maruyama_jump(&m, &[0.0], 1000.0, 0.01, 21).unwrap();
        // Each recorded step carries γ · (number of jumps in that step).
        let total: f64 = p.jumps.iter().map(|(_, v)| v[0]).sum();
        assert!((total - 1000.0).abs() < 4.0 * 1000f64.sqrt());
    }

    #[test]
    fn strong_order_under_refinement() {
        // Linear drift, no jumps: couple coarse and fine runs through shared
        // Brownian increments and check the terminal gap shrinks like dt.
        let b = -0.7;
        let t = 1.0;
        let mut rng = rng_from_seed(77);
        let fine_n = 4096;
        let incs: Vec<f64> =
            (0..fine_n).map(|_| rng.sample::<f64, _>(StandardNormal) * (t / fine_n as f64).sqrt()).collect();
        let run = |n: usize| -> f64 {
            let dt = t / n as f64;
            let group = fine_n / n;
            let mut x = 0.5;
            for k in 0..n {
                let dw: f64 = incs[k * group..(k + 1) * group].iter().sum();
                x += b * x * dt + dw;
            }
            x
        };
        let exact_ref = run(fine_n);
        let e1 = (run(64) - exact_ref).abs();
        let e2 = (run(128) - exact_ref).abs();
        let e3 = (run(256) - exact_ref).abs();
        assert!(e1 < 0.05 && e2 < e1 && e3 < e2);
    }

    #[test]
    fn deterministic_for_seed() {
        let m = ModelSpec::reference();
        let a = euler_maruyama_jump(&m, &[0.0; 3], 5.0, 1e-3, 3).unwrap();
        let b = euler_maruyama_jump(&m, &[0.0; 3], 5.0, 1e-3, 3).unwrap();
        assert_eq!(a, b);
        let c = euler_maruyama_jump(&m, &[0.0; 3], 5.0, 1e-3, 4).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn csv_round_trip() {
        let m = ModelSpec::reference();
        let p = euler_maruyama_jump(&m, &[0.0; 3], 0.01, 1e-3, 3).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let q = PathRecord::read_csv(&buf[..]).unwrap();
        assert_eq!(q.states, p.states);
        assert_eq!(q.dt, p.dt);
        assert_eq!(q.model_fingerprint, p.model_fingerprint);
    }

    #[test]
    fn concat_drops_shared_endpoint() {
        let m = ModelSpec::reference();
        let p = euler_maruyama_jump(&m, &[0.0; 3], 0.01, 1e-3, 3).unwrap();
        let q = p.concat(&p).unwrap();
        assert_eq!(q.len(), 2 * p.len() - 1);
        assert_abs_diff_eq!(q.horizon(), 2.0 * p.horizon(), epsilon = 1e-15);
    }
}
