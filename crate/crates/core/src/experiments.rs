//! Monte Carlo studies, slope fits and result emission.
//!
//! Every replication r draws from its own streams derived from the master
//! seed (path: index 2r, auxiliary: 2r + 1), and results are reduced in
//! replication order, so tables are byte-identical for a fixed seed whatever
//! the thread count.

pub use crate::cli::run_cli;

use crate::bandwidth::{optimal_bandwidths, rate_exponent, SmoothnessSpec};
use crate::error::{invalid, Error, Result};
use crate::estimator::{estimate_density_at, estimate_refined, refinement_level, BandwidthVector};
use crate::generator::{
    verify_stationarity, DensityDrift, GaussianRule, Marginal, QuadratureSpec, SeparableDrift, StationarityReport,
};
use crate::kernels::build_estimation_kernel;
use crate::model::{euler_maruyama_jump, step_count, JumpMeasureSpec, ModelSpec, ReferenceDrift};
use crate::priors::{
    box_mass, calibration_report, check_ad_conditions, check_density, default_smoothness, default_x0, eval_pi0,
    eval_pi1, profile_bounds, AdPlan, AdReport, CalibrationReport, Check, DensityChecks, PriorOne, PriorZero,
};
use crate::rng::{derive_seed, derived_rng, Rng};
use nalgebra::DMatrix;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

/// Environment variable read by [`init_threads`].
pub const THREADS_ENV: &str = "JUMPKDE_THREADS";

/// Sizes the global rayon pool from `JUMPKDE_THREADS` when set. Results do
/// not depend on the pool size.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| Error::Config(format!("{THREADS_ENV}={v} is not a thread count")))?;
    // A pool that already exists keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    VariancePlateau,
    MseRate,
    PriorCheck,
    StationarityCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// λ. Defaults to 1 for the reference model and 0.05 for the prior model.
    #[serde(default)]
    pub jump_intensity: Option<f64>,
    /// η of π₀ in the MSE and check studies.
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// σ in a = σI for the prior model.
    #[serde(default = "default_diffusion")]
    pub diffusion: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { jump_intensity: None, eta: default_eta(), dim: default_dim(), diffusion: default_diffusion() }
    }
}

fn default_diffusion() -> f64 {
    1.0
}

fn default_eta() -> f64 {
    crate::priors::DEFAULT_ETA
}
fn default_dim() -> usize {
    3
}

/// log₁₀ ranges of the swept bandwidths; h₃ and beyond stay fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub log10_h1: [f64; 2],
    pub log10_h2: [f64; 2],
    pub counts: [usize; 2],
    pub log10_h3: f64,
}

impl GridConfig {
    pub fn axis(range: [f64; 2], count: usize) -> Vec<f64> {
        (0..count).map(|k| range[0] + (range[1] - range[0]) * k as f64 / (count - 1) as f64).collect()
    }
}

/// Bridge refinement for the variance study: sub-steps are bisected until
/// their standard deviation is at most min h / `resolution`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementConfig {
    pub resolution: f64,
    pub margin: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self { resolution: 4.0, margin: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MseConfig {
    /// Isotropic smoothness used for the bandwidths and the theoretical rate.
    pub beta: f64,
    /// Relative lift of a₁, a₂ above their thresholds.
    pub slack: f64,
    /// Spacing of the drift tables.
    pub table_step: f64,
    /// Nodes per panel of the separable jump rule.
    pub z_nodes: usize,
    /// Points for the stationarity gate.
    pub gate_points: usize,
    pub gate_tolerance: f64,
}

impl Default for MseConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            slack: crate::bandwidth::DEFAULT_SLACK,
            table_step: 0.02,
            z_nodes: 4,
            gate_points: 20,
            gate_tolerance: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConfig {
    pub etas: Vec<f64>,
    /// Node counts for the stationarity check, each double the previous.
    pub nodes: Vec<usize>,
    pub points: usize,
    pub box_half_width: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self { etas: vec![0.1, 0.25, 0.4], nodes: vec![1, 2, 4, 8], points: 20, box_half_width: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub study: Study,
    #[serde(default)]
    pub model: ModelConfig,
    /// Horizons. The variance study uses the single entry.
    #[serde(rename = "T")]
    pub horizons: Vec<f64>,
    pub dt: f64,
    pub replications: usize,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    /// Evaluation point; the origin when absent.
    #[serde(default)]
    pub x: Option<Vec<f64>>,
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default = "default_order")]
    pub kernel_order: usize,
    #[serde(default)]
    pub refinement: RefinementConfig,
    #[serde(default)]
    pub mse: MseConfig,
    #[serde(default)]
    pub checks: CheckConfig,
}

fn default_order() -> usize {
    2
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn dim(&self) -> usize {
        match self.study {
            Study::VariancePlateau => 3,
            _ => self.model.dim,
        }
    }

    pub fn point(&self) -> Vec<f64> {
        self.x.clone().unwrap_or_else(|| vec![0.0; self.dim()])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.replications < 2 {
            return bad(format!("replications must be at least 2, got {}", self.replications));
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive".into());
        }
        if self.horizons.is_empty() || self.horizons.iter().any(|t| !(*t >= self.dt)) {
            return bad("every T must be at least dt".into());
        }
        if self.point().len() != self.dim() {
            return bad(format!("x has dimension {}, expected {}", self.point().len(), self.dim()));
        }
        if !(self.model.eta > 0.0 && self.model.eta < 0.5) {
            return bad(format!("eta must lie in (0, 1/2), got {}", self.model.eta));
        }
        if self.model.jump_intensity.is_some_and(|l| !(l >= 0.0 && l.is_finite())) {
            return bad("jump intensity must be finite and nonnegative".into());
        }
        match self.study {
            Study::VariancePlateau => {
                let Some(g) = &self.grid else {
                    return bad("variance study needs a grid".into());
                };
                if g.counts.iter().any(|c| *c < 2) {
                    return bad(format!("grid counts must be at least 2 per axis, got {:?}", g.counts));
                }
                if self.horizons.len() != 1 {
                    return bad("variance study takes a single T".into());
                }
            }
            Study::MseRate => {
                if self.horizons.len() < 2 {
                    return bad("MSE study needs at least two horizons".into());
                }
                if self.model.dim < 3 {
                    return bad("MSE study needs d ≥ 3".into());
                }
            }
            Study::PriorCheck | Study::StationarityCheck => {}
        }
        Ok(())
    }

    /// Desk-scale settings used by the acceptance suite.
    pub fn defaults(study: Study) -> Self {
        let base = |horizons: Vec<f64>, dt: f64, replications: usize| ExperimentConfig {
            study,
            model: ModelConfig::default(),
            horizons,
            dt,
            replications,
            grid: None,
            x: None,
            seed: 42,
            output: None,
            kernel_order: default_order(),
            refinement: RefinementConfig::default(),
            mse: MseConfig::default(),
            checks: CheckConfig::default(),
        };
        match study {
            Study::VariancePlateau => ExperimentConfig {
                grid: Some(GridConfig {
                    log10_h1: [-3.4, -2.0],
                    log10_h2: [-3.4, -2.0],
                    counts: [5, 5],
                    log10_h3: -0.5,
                }),
                ..base(vec![100.0], 1e-3, 200)
            },
            // σ = 0.4 puts the scale of π₀ next to the bandwidths, so bias and
            // variance both move over the horizon range.
            Study::MseRate => ExperimentConfig {
                model: ModelConfig { diffusion: 0.4, ..ModelConfig::default() },
                ..base(vec![50.0, 100.0, 200.0, 400.0], 1e-2, 100)
            },
            Study::PriorCheck => base(vec![1e3, 1e6, 1e9], 1e-3, 2),
            Study::StationarityCheck => base(vec![1.0], 1e-3, 2),
        }
    }

    /// Digest of the canonical JSON with the output path removed.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        let mut h = Sha256::new();
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        h.update(serde_json::to_vec(&c).expect("serializable"));
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub coords: Vec<f64>,
    pub statistic: f64,
    pub stderr: f64,
    /// Further columns written after the standard error.
    pub extra: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMetadata {
    pub config: ExperimentConfig,
    pub wall_time_s: f64,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub coord_names: Vec<String>,
    pub statistic_name: String,
    pub extra_names: Vec<String>,
    pub rows: Vec<ResultRow>,
    pub metadata: TableMetadata,
}

impl ResultTable {
    pub fn header(&self) -> Vec<String> {
        let mut h = self.coord_names.clone();
        h.push(self.statistic_name.clone());
        h.push("stderr".into());
        h.extend(self.extra_names.iter().cloned());
        h
    }

    /// CSV with shortest round-trip float formatting. Metadata is left out
    /// so the bytes depend only on the configuration.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(self.header())?;
        for r in &self.rows {
            let cells: Vec<String> =
                r.coords.iter().chain([&r.statistic, &r.stderr]).chain(&r.extra).map(|v| format!("{v}")).collect();
            wr.write_record(&cells)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }

    /// Reads back a table written by [`write_csv`](Self::write_csv), given
    /// how many leading coordinate columns it has.
    pub fn read_csv_rows(text: &str, coords: usize) -> Result<Vec<ResultRow>> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in rd.records() {
            let v: Vec<f64> = rec?
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("bad number {s}: {e}"))))
                .collect::<Result<_>>()?;
            if v.len() < coords + 2 {
                return invalid("row too short");
            }
            rows.push(ResultRow {
                coords: v[..coords].to_vec(),
                statistic: v[coords],
                stderr: v[coords + 1],
                extra: v[coords + 2..].to_vec(),
            });
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
}

/// Ordinary least squares y ≈ slope·x + intercept. The slope's standard error
/// is zero for two points.
pub fn slope_fit(points: &[(f64, f64)]) -> Result<SlopeFit> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return invalid("slope fit needs at least two points");
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if !(sxx > 1e-14 * points.iter().map(|p| p.0 * p.0).sum::<f64>().max(f64::MIN_POSITIVE)) {
        return invalid("slope fit needs at least two distinct x");
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let stderr = if points.len() > 2 {
        let ssr: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        (ssr / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(SlopeFit { slope, intercept, stderr })
}

/// Mean, unbiased variance, and the standard error of that variance from the
/// fourth central moment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub mean: f64,
    pub variance: f64,
    pub variance_stderr: f64,
}

pub fn sample_stats(values: &[f64]) -> Result<SampleStats> {
    let r = values.len();
    if r < 2 {
        return invalid("need at least two replications");
    }
    let n = r as f64;
    // Centre on the first value so a constant sample has exactly zero spread.
    let c = values[0];
    let shift = values.iter().map(|v| v - c).sum::<f64>() / n;
    let mean = c + shift;
    let m2 = values.iter().map(|v| (v - c - shift).powi(2)).sum::<f64>();
    let m4 = values.iter().map(|v| (v - c - shift).powi(4)).sum::<f64>() / n;
    let variance = m2 / (n - 1.0);
    let var_of_var = (m4 - variance * variance * (n - 3.0) / (n - 1.0)) / n;
    Ok(SampleStats { mean, variance, variance_stderr: var_of_var.max(0.0).sqrt() })
}

/// One acceptance-style verdict in a study summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub value: f64,
    pub tolerance: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSummary {
    /// h₁ at its largest grid value, h₂ swept.
    pub edge_h2: SlopeFit,
    /// h₂ at its largest grid value, h₁ swept.
    pub edge_h1: SlopeFit,
    pub diagonal: SlopeFit,
    /// Largest over smallest variance on the grid.
    pub variance_ratio: f64,
    pub verdicts: Vec<Verdict>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceStudy {
    pub table: ResultTable,
    pub summary: VarianceSummary,
}

fn stream_error(index: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Replication { index, source: Box::new(e) }
}

fn run_replications<T: Send>(r: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    (0..r).into_par_iter().map(|i| f(i).map_err(stream_error(i))).collect()
}

pub fn reference_model(lambda: f64) -> Result<ModelSpec> {
    ModelSpec::new(
        Arc::new(ReferenceDrift),
        DMatrix::identity(3, 3),
        DMatrix::identity(3, 3),
        JumpMeasureSpec::gaussian_identity(lambda, 3)?,
    )
}

/// Variance of π̂ at x over a log grid of (h₁, h₂) with h₃ fixed, on the
/// reference model. All cells share the R paths; each path is refined once
/// for the whole grid.
pub fn variance_study(cfg: &ExperimentConfig) -> Result<VarianceStudy> {
    if cfg.study != Study::VariancePlateau {
        return Err(Error::Config("not a variance study config".into()));
    }
    cfg.validate()?;
    let start = Instant::now();
    let grid = cfg.grid.as_ref().expect("validated");
    let model = reference_model(cfg.model.jump_intensity.unwrap_or(1.0))?;
    let kernel = build_estimation_kernel(cfg.kernel_order)?;
    let x = cfg.point();
    let t = cfg.horizons[0];
    let l1 = GridConfig::axis(grid.log10_h1, grid.counts[0]);
    let l2 = GridConfig::axis(grid.log10_h2, grid.counts[1]);
    let h3 = 10f64.powf(grid.log10_h3);
    let mut hs = Vec::new();
    for a in &l1 {
        for b in &l2 {
            hs.push(BandwidthVector::new(vec![10f64.powf(*a), 10f64.powf(*b), h3])?);
        }
    }
    let sigma = (0..3).map(|m| model.a.row(m).norm()).fold(0.0, f64::max);
    let levels: Vec<u32> = hs.iter().map(|h| refinement_level(h, cfg.dt, sigma, cfg.refinement.resolution)).collect();
    let estimates = run_replications(cfg.replications, |r| {
        let path = euler_maruyama_jump(&model, &x, t, cfg.dt, derive_seed(cfg.seed, 2 * r as u64))?;
        let mut rng = derived_rng(cfg.seed, 2 * r as u64 + 1);
        estimate_refined(&path, &model.a, &kernel, &hs, &x, &levels, cfg.refinement.margin, &mut rng)
    })?;
    let mut rows = Vec::with_capacity(hs.len());
    for (c, h) in hs.iter().enumerate() {
        let values: Vec<f64> = estimates.iter().map(|e| e[c]).collect();
        let s = sample_stats(&values)?;
        if !(s.variance > 0.0) {
            return Err(Error::Numerical(format!("zero variance at h = {:?}", h.h)));
        }
        rows.push(ResultRow {
            coords: vec![h.h[0].log10(), h.h[1].log10(), grid.log10_h3],
            statistic: s.variance.log10(),
            stderr: s.variance_stderr / (s.variance * std::f64::consts::LN_10),
            extra: Vec::new(),
        });
    }
    let table = ResultTable {
        coord_names: vec!["log10_h1".into(), "log10_h2".into(), "log10_h3".into()],
        statistic_name: "log10_var".into(),
        extra_names: Vec::new(),
        rows,
        metadata: TableMetadata {
            config: cfg.clone(),
            wall_time_s: start.elapsed().as_secs_f64(),
            fingerprint: cfg.fingerprint(),
        },
    };
    let summary = variance_summary(&table.rows)?;
    Ok(VarianceStudy { table, summary })
}

/// Slopes and ratio from the rows alone, so the CSV reproduces them.
pub fn variance_summary(rows: &[ResultRow]) -> Result<VarianceSummary> {
    let max1 = rows.iter().map(|r| r.coords[0]).fold(f64::NEG_INFINITY, f64::max);
    let max2 = rows.iter().map(|r| r.coords[1]).fold(f64::NEG_INFINITY, f64::max);
    let pick = |keep: &dyn Fn(&ResultRow) -> bool, axis: usize| -> Vec<(f64, f64)> {
        rows.iter().filter(|r| keep(r)).map(|r| (r.coords[axis], r.statistic)).collect()
    };
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    let edge_h2 = slope_fit(&pick(&|r| close(r.coords[0], max1), 1))?;
    let edge_h1 = slope_fit(&pick(&|r| close(r.coords[1], max2), 0))?;
    let diagonal = slope_fit(&pick(&|r| close(r.coords[0], r.coords[1]), 0))?;
    let hi = rows.iter().map(|r| r.statistic).fold(f64::NEG_INFINITY, f64::max);
    let lo = rows.iter().map(|r| r.statistic).fold(f64::INFINITY, f64::min);
    let variance_ratio = 10f64.powf(hi - lo);
    let verdicts = vec![
        Verdict {
            name: "variance_ratio".into(),
            value: variance_ratio,
            tolerance: "<= 3".into(),
            pass: variance_ratio <= 3.0,
        },
        Verdict {
            name: "edge_slopes".into(),
            value: edge_h1.slope.abs().max(edge_h2.slope.abs()),
            tolerance: "|slope| <= 0.15".into(),
            pass: edge_h1.slope.abs() <= 0.15 && edge_h2.slope.abs() <= 0.15,
        },
        Verdict {
            name: "diagonal_slope".into(),
            value: diagonal.slope.abs(),
            tolerance: "|slope| <= 0.35".into(),
            pass: diagonal.slope.abs() <= 0.35,
        },
    ];
    Ok(VarianceSummary { edge_h2, edge_h1, diagonal, variance_ratio, verdicts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseSummary {
    /// log MSE against log(T / log T).
    pub fit: SlopeFit,
    pub theory: f64,
    /// 95% normal interval for the slope.
    pub interval: [f64; 2],
    pub gate: f64,
    pub verdicts: Vec<Verdict>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MseStudy {
    pub table: ResultTable,
    pub summary: MseSummary,
    /// π₀(x).
    pub truth: f64,
    /// π̂(x) by replication, then horizon.
    pub estimates: Vec<Vec<f64>>,
}

/// The jump SDE whose invariant density is π₀, with b_{π₀} from tables.
pub struct PriorModel {
    pub prior: PriorZero,
    pub model: ModelSpec,
    pub drift: Arc<SeparableDrift>,
}

pub fn separable_rule(z_nodes: usize) -> QuadratureSpec {
    QuadratureSpec { z_nodes, gaussian_rule: GaussianRule::Separable { radius: 10.0 }, cell_nodes: 1 }
}

/// π₀ with a = σI and γ = I.
pub fn prior_model(eta: f64, d: usize, sigma: f64, lambda: f64, z_nodes: usize, table_step: f64) -> Result<PriorModel> {
    let a = DMatrix::identity(d, d) * sigma;
    let gamma = DMatrix::identity(d, d);
    let prior = PriorZero::new(eta, a.clone())?;
    let jumps = JumpMeasureSpec::gaussian_identity(lambda, d)?;
    let drift = Arc::new(SeparableDrift::new(
        (*prior.density).clone(),
        &a,
        &gamma,
        &jumps,
        &separable_rule(z_nodes),
        prior.working_box(),
        table_step,
    )?);
    let model = ModelSpec::new(drift.clone(), a, gamma, jumps)?;
    Ok(PriorModel { prior, model, drift })
}

/// Stationarity residual of the tabulated drift at uniform points in
/// [−w, w]^d, against an independent separable rule.
pub fn stationarity_gate(
    pm: &PriorModel,
    points: usize,
    w: f64,
    seed: u64,
    ref_nodes: usize,
) -> Result<StationarityReport> {
    let mut rng = derived_rng(seed, u64::MAX);
    let d = pm.prior.dim();
    let pts: Vec<Vec<f64>> = (0..points).map(|_| (0..d).map(|_| rng.random_range(-w..w)).collect()).collect();
    verify_stationarity(pm.prior.density.as_ref(), &pm.model, &pts, &separable_rule(ref_nodes))
}

/// Inverse-CDF draw from a marginal, by bisection on its lower integral.
fn sample_marginal(m: &dyn Marginal, rng: &mut Rng, reach: f64) -> f64 {
    let target = rng.random::<f64>() * m.mass();
    let (mut lo, mut hi) = (-reach, reach);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if m.lower(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// MSE of π̂ at x against π₀(x) for the model with stationary density π₀,
/// started in stationarity, with rate-optimal bandwidths at each T.
pub fn mse_study(cfg: &ExperimentConfig) -> Result<MseStudy> {
    if cfg.study != Study::MseRate {
        return Err(Error::Config("not an MSE study config".into()));
    }
    cfg.validate()?;
    let start = Instant::now();
    let d = cfg.model.dim;
    let m = &cfg.mse;
    let pm = prior_model(
        cfg.model.eta,
        d,
        cfg.model.diffusion,
        cfg.model.jump_intensity.unwrap_or(0.05),
        m.z_nodes,
        m.table_step,
    )?;
    let gate = stationarity_gate(&pm, m.gate_points, 4.0, cfg.seed, 2 * m.z_nodes)?;
    if !(gate.max_residual < m.gate_tolerance) {
        return Err(Error::Config(format!(
            "tabulated drift fails the stationarity gate: {} ≥ {}",
            gate.max_residual, m.gate_tolerance
        )));
    }
    let spec = SmoothnessSpec::isotropic(m.beta, d)?;
    let kernel = build_estimation_kernel(cfg.kernel_order)?;
    let x = cfg.point();
    let truth = eval_pi0(&pm.prior, &x);
    let reach = pm.prior.working_box() * 2.0;
    let plans = cfg.horizons.iter().map(|&t| optimal_bandwidths(&spec, t, m.slack)).collect::<Result<Vec<_>>>()?;
    let longest = cfg.horizons.iter().copied().fold(0.0, f64::max);
    // Each replication simulates the longest horizon once; shorter horizons
    // use prefixes of the same path.
    let estimates = run_replications(cfg.replications, |r| {
        let mut aux = derived_rng(cfg.seed, 2 * r as u64 + 1);
        let x0: Vec<f64> = (0..d).map(|k| sample_marginal(&pm.prior.marginal(k), &mut aux, reach)).collect();
        let path = euler_maruyama_jump(&pm.model, &x0, longest, cfg.dt, derive_seed(cfg.seed, 2 * r as u64))?;
        cfg.horizons
            .iter()
            .zip(&plans)
            .map(|(&t, plan)| {
                let prefix = path.prefix(step_count(t, cfg.dt));
                Ok(estimate_density_at(&prefix, &kernel, &plan.h, &x)?.value)
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    let mut rows = Vec::new();
    for (ti, (&t, plan)) in cfg.horizons.iter().zip(&plans).enumerate() {
        let e: Vec<f64> = estimates.iter().map(|v| (v[ti] - truth).powi(2)).collect();
        let n = e.len() as f64;
        let mse = e.iter().sum::<f64>() / n;
        let sd = (e.iter().map(|v| (v - mse).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        rows.push(ResultRow { coords: vec![t], statistic: mse, stderr: sd / n.sqrt(), extra: plan.h.h.clone() });
    }
    let table = ResultTable {
        coord_names: vec!["T".into()],
        statistic_name: "mse".into(),
        extra_names: (1..=d).map(|i| format!("h{i}")).collect(),
        rows,
        metadata: TableMetadata {
            config: cfg.clone(),
            wall_time_s: start.elapsed().as_secs_f64(),
            fingerprint: cfg.fingerprint(),
        },
    };
    let summary = mse_summary(&table.rows, &spec, gate.max_residual)?;
    Ok(MseStudy { table, summary, truth, estimates })
}

pub fn mse_summary(rows: &[ResultRow], spec: &SmoothnessSpec, gate: f64) -> Result<MseSummary> {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| ((r.coords[0] / r.coords[0].ln()).ln(), r.statistic.ln())).collect();
    let fit = slope_fit(&pts)?;
    let theory = -rate_exponent(spec)?;
    let interval = [fit.slope - 1.96 * fit.stderr, fit.slope + 1.96 * fit.stderr];
    let verdicts = vec![Verdict {
        name: "mse_slope".into(),
        value: fit.slope,
        tolerance: "in [-1.1, -0.5]".into(),
        pass: (-1.1..=-0.5).contains(&fit.slope),
    }];
    Ok(MseSummary { fit, theory, interval, gate, verdicts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BumpCheck {
    #[serde(rename = "T")]
    pub t: f64,
    /// Largest |π₁ − π₀| at sampled points off the bump box.
    pub off_box: f64,
    /// π₁(x₀) − π₀(x₀) − 1/M_T with the difference taken as the bump.
    pub peak_error: f64,
    /// Same through π₁(x₀) − π₀(x₀), exact up to rounding of the sum.
    pub peak_error_of_sum: f64,
    pub integral: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorCheckReport {
    pub profile: Vec<Check>,
    pub density: Vec<(f64, DensityChecks)>,
    pub ad: Vec<AdReport>,
    pub calibration: Vec<CalibrationReport>,
    /// Horizons where π₁ is not a density are listed with the reason.
    pub bump: Vec<BumpCheck>,
    pub bump_rejected: Vec<(f64, String)>,
    pub pass: bool,
}

/// Checks π₀, π₁ and the calibration at every η and T of the config.
pub fn prior_check(cfg: &ExperimentConfig) -> Result<PriorCheckReport> {
    let d = cfg.model.dim;
    let spec = if d == 3 { default_smoothness() } else { SmoothnessSpec::isotropic(2.0, d)? };
    // ĉ is reported for this jump law; it does not gate.
    let jumps = JumpMeasureSpec::gaussian_identity(cfg.model.jump_intensity.unwrap_or(0.05), d)?;
    let gamma = DMatrix::identity(d, d);
    let ad = cfg
        .checks
        .etas
        .iter()
        .map(|&eta| check_ad_conditions(&PriorZero::identity(eta, d)?, &AdPlan::default(), Some((&jumps, &gamma))))
        .collect::<Result<Vec<_>>>()?;
    let density = cfg
        .checks
        .etas
        .iter()
        .map(|&eta| Ok((eta, check_density(&PriorZero::identity(eta, d)?))))
        .collect::<Result<Vec<_>>>()?;
    let calibration =
        cfg.horizons.iter().map(|&t| calibration_report(t, &spec, cfg.model.eta)).collect::<Result<Vec<_>>>()?;
    let base = PriorZero::identity(cfg.model.eta, d)?;
    let mut bump = Vec::new();
    let mut bump_rejected = Vec::new();
    for (ti, c) in calibration.iter().enumerate() {
        let h = match BandwidthVector::new(c.h.clone()) {
            Ok(h) => h,
            Err(e) => {
                bump_rejected.push((c.t, e.to_string()));
                continue;
            }
        };
        match PriorOne::new(base.clone(), default_x0(d), c.m_t, h) {
            Ok(p1) => bump.push(bump_check(&base, &p1, c.t, derive_seed(cfg.seed, ti as u64))),
            Err(e) => bump_rejected.push((c.t, e.to_string())),
        }
    }
    let profile = profile_bounds(20_001);
    // The derivative bullets of the profile are recorded but do not gate.
    let pass = ad.iter().all(|r| r.pass)
        && density.iter().all(|(_, c)| c.pass)
        && calibration.iter().all(|c| {
            let k = &c.constraints;
            k.calib_holder && k.calib_b && k.calib_finale
        })
        && bump.iter().all(|b| b.pass);
    Ok(PriorCheckReport { profile, density, ad, calibration, bump, bump_rejected, pass })
}

fn bump_check(p0: &PriorZero, p1: &PriorOne, t: f64, seed: u64) -> BumpCheck {
    let (lo, hi) = p1.bump_box();
    let mut rng = derived_rng(seed, 0);
    let d = lo.len();
    let mut off_box = 0.0f64;
    for _ in 0..2000 {
        // Points in a shell around the box, half of them just outside a face.
        let mut y: Vec<f64> = (0..d).map(|k| rng.random_range(lo[k] - 1.0..hi[k] + 1.0)).collect();
        let k = rng.random_range(0..d);
        let w = hi[k] - lo[k];
        y[k] = if rng.random::<bool>() { hi[k] + rng.random::<f64>() * w } else { lo[k] - rng.random::<f64>() * w };
        off_box = off_box.max((eval_pi1(p1, &y) - eval_pi0(p0, &y)).abs());
    }
    let x0 = &p1.x0;
    let peak_error = p1.difference(x0) - 1.0 / p1.m_t;
    let peak_error_of_sum = eval_pi1(p1, x0) - eval_pi0(p0, x0) - 1.0 / p1.m_t;
    let integral = p1.bump_integral(24);
    let ulp = 4.0 * f64::EPSILON * eval_pi1(p1, x0);
    let pass = off_box == 0.0 && peak_error == 0.0 && peak_error_of_sum.abs() <= ulp && integral.abs() < 1e-10;
    BumpCheck { t, off_box, peak_error, peak_error_of_sum, integral, pass }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityLevel {
    pub z_nodes: usize,
    pub max_residual: f64,
    pub mean_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityCheck {
    pub eta: f64,
    pub lambda: f64,
    pub levels: Vec<StationarityLevel>,
    /// Residual floor: the finest level, which no longer moves with nodes.
    pub floor: f64,
    pub mass: f64,
}

/// Residual of (π₀, b_{π₀}) with b computed from the separable rule at each
/// node count; the adjoint reference uses twice the finest count.
pub fn stationarity_check(cfg: &ExperimentConfig) -> Result<StationarityCheck> {
    let d = cfg.model.dim;
    let eta = cfg.model.eta;
    let lambda = cfg.model.jump_intensity.unwrap_or(0.05);
    let p = PriorZero::identity(eta, d)?;
    let a = DMatrix::identity(d, d);
    let jumps = JumpMeasureSpec::gaussian_identity(lambda, d)?;
    let mut rng = derived_rng(cfg.seed, 0);
    let w = cfg.checks.box_half_width;
    let pts: Vec<Vec<f64>> =
        (0..cfg.checks.points).map(|_| (0..d).map(|_| rng.random_range(-w..w)).collect()).collect();
    let finest = cfg.checks.nodes.iter().copied().max().ok_or_else(|| Error::Config("no node counts".into()))?;
    let reference = separable_rule(2 * finest);
    let mut levels = Vec::new();
    for &n in &cfg.checks.nodes {
        let drift = DensityDrift::new(p.density.clone(), &a, &a, &jumps, &separable_rule(n), "pi0")?;
        let model = ModelSpec::new(Arc::new(drift), a.clone(), a.clone(), jumps.clone())?;
        let r = verify_stationarity(p.density.as_ref(), &model, &pts, &reference)?;
        let mean = r.points.iter().map(|q| q.residual).sum::<f64>() / r.points.len() as f64;
        levels.push(StationarityLevel { z_nodes: n, max_residual: r.max_residual, mean_residual: mean });
    }
    let floor = levels.last().map_or(0.0, |l| l.max_residual);
    Ok(StationarityCheck { eta, lambda, levels, floor, mass: box_mass(&p) })
}
