//! Kernel estimator of the invariant density from one sampled path.
//!
//! π̂(x) = (1/T) Σ_k 𝕂_h(x − X_{t_k}) Δ over the left endpoints of the grid.

use crate::error::{invalid, Result};
use crate::kernels::{product_kernel_unchecked, KernelKind, KernelSpec};
use crate::model::PathRecord;
use crate::rng::Rng;
use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BandwidthVector {
    pub h: Vec<f64>,
}

impl BandwidthVector {
    pub fn new(h: Vec<f64>) -> Result<Self> {
        if h.is_empty() {
            return invalid("bandwidth vector is empty");
        }
        if let Some(v) = h.iter().find(|v| !(**v > 0.0 && **v < 0.5)) {
            return invalid(format!("bandwidth {v} outside (0, 1/2)"));
        }
        Ok(Self { h })
    }
    pub fn dim(&self) -> usize {
        self.h.len()
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub x: Vec<f64>,
    pub value: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub h: BandwidthVector,
    pub n_points_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorOptions {
    /// Use every `stride`-th grid point with weight stride·Δ.
    pub stride: usize,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self { stride: 1 }
    }
}

fn validate(path: &PathRecord, kernel: &KernelSpec, h: &BandwidthVector, x: &[f64]) -> Result<()> {
    if kernel.kind != KernelKind::Estimation {
        return invalid("density estimation needs an estimation kernel");
    }
    if path.len() < 2 {
        return invalid("path must contain at least two states");
    }
    if h.dim() != path.dim || x.len() != path.dim {
        return invalid(format!("dimension mismatch: path {}, h {}, x {}", path.dim, h.dim(), x.len()));
    }
    Ok(())
}

#[inline]
fn in_box(x: &[f64], y: &[f64], h: &[f64]) -> bool {
    x.iter().zip(y).zip(h).all(|((a, b), w)| (a - b).abs() <= *w)
}

pub fn estimate_density_at(
    path: &PathRecord,
    kernel: &KernelSpec,
    h: &BandwidthVector,
    x: &[f64],
) -> Result<DensityEstimate> {
    estimate_density_at_with(path, kernel, h, x, EstimatorOptions::default())
}

pub fn estimate_density_at_with(
    path: &PathRecord,
    kernel: &KernelSpec,
    h: &BandwidthVector,
    x: &[f64],
    opts: EstimatorOptions,
) -> Result<DensityEstimate> {
    validate(path, kernel, h, x)?;
    if opts.stride == 0 {
        return invalid("stride must be positive");
    }
    let n = path.len() - 1;
    let w = opts.stride as f64 * path.dt;
    let mut sum = 0.0;
    let mut used = 0;
    for k in (0..n).step_by(opts.stride) {
        let y = path.state(k);
        if !in_box(x, y, &h.h) {
            continue;
        }
        used += 1;
        sum += product_kernel_unchecked(kernel, &h.h, x, y) * w;
    }
    Ok(DensityEstimate {
        x: x.to_vec(),
        value: sum / path.horizon(),
        t: path.horizon(),
        h: h.clone(),
        n_points_used: used,
    })
}

/// Pointwise estimates over a grid; the path is sorted once along the first
/// axis so each point only visits nearby states. Terms are summed in time
/// order, so results equal [`estimate_density_at`] exactly.
pub fn estimate_density_grid(
    path: &PathRecord,
    kernel: &KernelSpec,
    h: &BandwidthVector,
    grid: &[Vec<f64>],
) -> Result<Vec<DensityEstimate>> {
    if grid.is_empty() {
        return Ok(Vec::new());
    }
    for x in grid {
        validate(path, kernel, h, x)?;
    }
    let n = path.len() - 1;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| path.state(i)[0].total_cmp(&path.state(j)[0]));
    let keys: Vec<f64> = order.iter().map(|&k| path.state(k)[0]).collect();
    let t = path.horizon();
    Ok(grid
        .par_iter()
        .map(|x| {
            let lo = keys.partition_point(|v| *v < x[0] - h.h[0]);
            let hi = keys.partition_point(|v| *v <= x[0] + h.h[0]);
            let mut idx: Vec<usize> =
                order[lo..hi].iter().copied().filter(|&k| in_box(x, path.state(k), &h.h)).collect();
            idx.sort_unstable();
            let mut sum = 0.0;
            for &k in &idx {
                sum += product_kernel_unchecked(kernel, &h.h, x, path.state(k)) * path.dt;
            }
            DensityEstimate { x: x.clone(), value: sum / t, t, h: h.clone(), n_points_used: idx.len() }
        })
        .collect())
}

pub fn write_grid_csv<W: Write>(estimates: &[DensityEstimate], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    if let Some(first) = estimates.first() {
        let mut header: Vec<String> = (1..=first.x.len()).map(|i| format!("x{i}")).collect();
        header.push("value".into());
        wr.write_record(&header)?;
    }
    for e in estimates {
        let mut row: Vec<String> = e.x.iter().map(|v| format!("{v}")).collect();
        row.push(format!("{}", e.value));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

/// Estimator on a refined time grid. Each Euler step is the straight line
/// plus a Brownian bridge with covariance a aᵀ; jumps sit at the step end.
/// Steps are bisected by sampling bridge midpoints, and bandwidth `hs[j]` is
/// summed with left endpoints on the grid of level `levels[j]`, i.e. spacing
/// Δ/2^levels[j]. A segment is refined further only while its chord comes
/// within `margin` bridge standard deviations of a box whose level is still
/// deeper; otherwise its subtree contributes nothing.
///
/// Returns one estimate per bandwidth vector, all on the same refined path.
#[allow(clippy::too_many_arguments)]
pub fn estimate_refined(
    path: &PathRecord,
    a: &DMatrix<f64>,
    kernel: &KernelSpec,
    hs: &[BandwidthVector],
    x: &[f64],
    levels: &[u32],
    margin: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let d = path.dim;
    for h in hs {
        validate(path, kernel, h, x)?;
    }
    if levels.len() != hs.len() {
        return invalid("need one refinement level per bandwidth vector");
    }
    if a.shape() != (d, d) {
        return invalid("diffusion matrix shape does not match path");
    }
    let deepest = levels.iter().copied().max().unwrap_or(0);
    // Bandwidths still being refined past each level.
    let pending: Vec<Vec<usize>> = (0..=deepest).map(|l| (0..hs.len()).filter(|&j| levels[j] >= l).collect()).collect();
    let sigma: Vec<f64> = (0..d).map(|m| (0..d).map(|j| a[(m, j)] * a[(m, j)]).sum::<f64>().sqrt()).collect();
    let diag = (0..d).all(|i| (0..d).all(|j| i == j || a[(i, j)] == 0.0));
    let mut sums = vec![0.0; hs.len()];
    let n = path.len() - 1;
    let mut jumps = path.jumps.iter().peekable();
    let mut end = vec![0.0; d];
    let mut stack: Vec<(Vec<f64>, Vec<f64>, u32)> = Vec::new();
    let mut xi = vec![0.0; d];

    // Whether the chord p→q of duration len may reach a box of level ≥ l.
    let near = |p: &[f64], q: &[f64], len: f64, l: u32| -> bool {
        pending[l as usize].iter().any(|&j| {
            (0..d).all(|m| {
                let lo = p[m].min(q[m]);
                let hi = p[m].max(q[m]);
                let w = hs[j].h[m];
                let gap = (lo - (x[m] + w)).max((x[m] - w) - hi).max(0.0);
                gap <= margin * sigma[m] * len.sqrt()
            })
        })
    };

    for k in 0..n {
        end.copy_from_slice(path.state(k + 1));
        while let Some((j, disp)) = jumps.peek() {
            if *j < k {
                jumps.next();
            } else {
                if *j == k {
                    for m in 0..d {
                        end[m] -= disp[m];
                    }
                }
                break;
            }
        }
        let start = path.state(k);
        if !near(start, &end, path.dt, 0) {
            continue;
        }
        stack.clear();
        stack.push((start.to_vec(), end.clone(), 0));
        while let Some((p, q, level)) = stack.pop() {
            let len = path.dt / (1u64 << level) as f64;
            for (j, h) in hs.iter().enumerate() {
                if levels[j] == level && in_box(x, &p, &h.h) {
                    sums[j] += product_kernel_unchecked(kernel, &h.h, x, &p) * len;
                }
            }
            if level == deepest {
                continue;
            }
            let half = len / 2.0;
            if !near(&p, &q, len, level + 1) {
                continue;
            }
            let sd = (len / 4.0).sqrt();
            for v in xi.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let mid: Vec<f64> = (0..d)
                .map(|i| {
                    let noise = if diag { a[(i, i)] * xi[i] } else { (0..d).map(|j| a[(i, j)] * xi[j]).sum() };
                    0.5 * (p[i] + q[i]) + sd * noise
                })
                .collect();
            // Right half first so the left half is processed first.
            if near(&mid, &q, half, level + 1) {
                stack.push((mid.clone(), q, level + 1));
            }
            if near(&p, &mid, half, level + 1) {
                stack.push((p, mid, level + 1));
            }
        }
    }
    let t = path.horizon();
    Ok(sums.into_iter().map(|s| s / t).collect())
}

/// Smallest level at which bridge sub-steps have standard deviation at most
/// min_m h_m / resolution, for unit diffusion scale `sigma`.
pub fn refinement_level(h: &BandwidthVector, dt: f64, sigma: f64, resolution: f64) -> u32 {
    let target = h.h.iter().copied().fold(f64::INFINITY, f64::min) / resolution;
    let ratio = sigma * sigma * dt / (target * target);
    if ratio <= 1.0 {
        0
    } else {
        ratio.log2().ceil() as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::build_estimation_kernel;
    use crate::model::{euler_maruyama_jump, AffineDrift, JumpMeasureSpec, ModelSpec};
    use crate::rng::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn constant_path(x: [f64; 3], n: usize) -> PathRecord {
        PathRecord {
            dim: 3,
            dt: 0.01,
            states: x.iter().copied().cycle().take(3 * n).collect(),
            seed: 0,
            model_fingerprint: String::new(),
            jumps: Vec::new(),
        }
    }

    #[test]
    fn constant_path_gives_peak_value() {
        let k = build_estimation_kernel(1).unwrap();
        let h = BandwidthVector::new(vec![0.1; 3]).unwrap();
        let p = constant_path([0.3, -0.2, 1.0], 101);
        let e = estimate_density_at(&p, &k, &h, &[0.3, -0.2, 1.0]).unwrap();
        assert_abs_diff_eq!(e.value, k.eval(0.0).powi(3) * 1000.0, epsilon = 1e-9);
        assert_eq!(e.n_points_used, 100);
        let far = estimate_density_at(&p, &k, &h, &[2.0, 0.0, 0.0]).unwrap();
        assert_eq!(far.value, 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let k = build_estimation_kernel(1).unwrap();
        let h = BandwidthVector::new(vec![0.1; 3]).unwrap();
        let p = constant_path([0.0; 3], 1);
        assert!(estimate_density_at(&p, &k, &h, &[0.0; 3]).is_err());
        let p = constant_path([0.0; 3], 5);
        assert!(estimate_density_at(&p, &k, &h, &[0.0; 2]).is_err());
        assert!(BandwidthVector::new(vec![0.5]).is_err());
        assert!(BandwidthVector::new(vec![0.0]).is_err());
    }

    fn reference_path(t: f64, seed: u64) -> PathRecord {
        euler_maruyama_jump(&ModelSpec::reference(), &[0.0; 3], t, 1e-2, seed).unwrap()
    }

    #[test]
    fn grid_matches_pointwise() {
        let k = build_estimation_kernel(2).unwrap();
        let h = BandwidthVector::new(vec![0.4, 0.3, 0.45]).unwrap();
        let p = reference_path(50.0, 2);
        let grid: Vec<Vec<f64>> = (0..1000)
            .map(|i| {
                let f = i as f64;
                vec![(f * 0.37).sin() * 3.0, (f * 0.11).cos() * 3.0, (f * 0.07).sin() * 2.0]
            })
            .collect();
        let batch = estimate_density_grid(&p, &k, &h, &grid).unwrap();
        for (x, e) in grid.iter().zip(&batch) {
            let single = estimate_density_at(&p, &k, &h, x).unwrap();
            assert_abs_diff_eq!(single.value, e.value, epsilon = 1e-12);
        }
        assert!(estimate_density_grid(&p, &k, &h, &[]).unwrap().is_empty());
        let one = estimate_density_grid(&p, &k, &h, &grid[..1]).unwrap();
        assert_eq!(one[0].value, estimate_density_at(&p, &k, &h, &grid[0]).unwrap().value);
    }

    #[test]
    fn concatenation_averages() {
        let k = build_estimation_kernel(1).unwrap();
        let h = BandwidthVector::new(vec![0.4; 3]).unwrap();
        let p = reference_path(10.0, 3);
        let q = reference_path(10.0, 4);
        let x = [0.1, 0.0, -0.1];
        let e = |r: &PathRecord| estimate_density_at(r, &k, &h, &x).unwrap().value;
        let joined = p.concat(&q).unwrap();
        assert_abs_diff_eq!(e(&joined), 0.5 * (e(&p) + e(&q)), epsilon = 1e-12);
    }

    #[test]
    fn homogeneous_in_kernel_scale() {
        let mut k = build_estimation_kernel(1).unwrap();
        let h = BandwidthVector::new(vec![0.4; 3]).unwrap();
        let p = reference_path(10.0, 5);
        let base = estimate_density_at(&p, &k, &h, &[0.0; 3]).unwrap().value;
        for c in k.coefficients.iter_mut() {
            *c *= 2.0;
        }
        let scaled = estimate_density_at(&p, &k, &h, &[0.0; 3]).unwrap().value;
        // Scaling by a power of two is exact in floating point.
        assert_eq!(scaled, 8.0 * base);
    }

    #[test]
    fn spatial_mass_is_one() {
        // One-dimensional OU path; integrate the grid estimate over its range.
        let m = ModelSpec::new(
            Arc::new(AffineDrift::linear(DMatrix::from_element(1, 1, -1.0))),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            JumpMeasureSpec::none(1),
        )
        .unwrap();
        let p = euler_maruyama_jump(&m, &[0.0], 200.0, 1e-2, 8).unwrap();
        let k = build_estimation_kernel(1).unwrap();
        let h = BandwidthVector::new(vec![0.2]).unwrap();
        let lo = p.states.iter().copied().fold(f64::INFINITY, f64::min) - 0.5;
        let hi = p.states.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 0.5;
        let n = 2000;
        let dx = (hi - lo) / n as f64;
        let grid: Vec<Vec<f64>> = (0..n).map(|i| vec![lo + (i as f64 + 0.5) * dx]).collect();
        let mass: f64 = estimate_density_grid(&p, &k, &h, &grid).unwrap().iter().map(|e| e.value * dx).sum();
        assert!((mass - 1.0).abs() < 0.02, "mass {mass}");
    }

    #[test]
    fn stride_one_is_default_and_stride_two_is_close() {
        let k = build_estimation_kernel(1).unwrap();
        let h = BandwidthVector::new(vec![0.45; 3]).unwrap();
        let p = reference_path(40.0, 6);
        let a = estimate_density_at(&p, &k, &h, &[0.0; 3]).unwrap().value;
        let b = estimate_density_at_with(&p, &k, &h, &[0.0; 3], EstimatorOptions { stride: 1 }).unwrap().value;
        assert_eq!(a, b);
        let c = estimate_density_at_with(&p, &k, &h, &[0.0; 3], EstimatorOptions { stride: 2 }).unwrap().value;
        assert!((a - c).abs() < 0.2 * a.max(1e-3));
    }

    #[test]
    fn zero_levels_reproduce_plain_sum() {
        let k = build_estimation_kernel(1).unwrap();
        let hs = vec![BandwidthVector::new(vec![0.3, 0.2, 0.4]).unwrap(), BandwidthVector::new(vec![0.1; 3]).unwrap()];
        let p = euler_maruyama_jump(&ModelSpec::reference(), &[0.0; 3], 20.0, 1e-3, 7).unwrap();
        let mut rng = rng_from_seed(1);
        let refined =
            estimate_refined(&p, &DMatrix::identity(3, 3), &k, &hs, &[0.0; 3], &[0, 0], 4.0, &mut rng).unwrap();
        for (h, r) in hs.iter().zip(&refined) {
            let plain = estimate_density_at(&p, &k, h, &[0.0; 3]).unwrap().value;
            assert_abs_diff_eq!(plain, *r, epsilon = 1e-12 * plain.max(1.0));
        }
    }

    #[test]
    fn refinement_is_consistent_for_wide_bandwidth() {
        let k = build_estimation_kernel(1).unwrap();
        let hs = vec![BandwidthVector::new(vec![0.4; 3]).unwrap()];
        let p = euler_maruyama_jump(&ModelSpec::reference(), &[0.0; 3], 50.0, 1e-3, 9).unwrap();
        let plain = estimate_density_at(&p, &k, &hs[0], &[0.0; 3]).unwrap().value;
        let mut rng = rng_from_seed(2);
        let refined =
            estimate_refined(&p, &DMatrix::identity(3, 3), &k, &hs, &[0.0; 3], &[6], 4.0, &mut rng).unwrap()[0];
        assert!((plain - refined).abs() < 0.05 * plain, "{plain} vs {refined}");
    }

    #[test]
    fn unrefined_bandwidth_is_unaffected_by_deeper_ones() {
        let k = build_estimation_kernel(2).unwrap();
        let hs =
            vec![BandwidthVector::new(vec![0.3; 3]).unwrap(), BandwidthVector::new(vec![0.01, 0.02, 0.3]).unwrap()];
        let p = euler_maruyama_jump(&ModelSpec::reference(), &[0.0; 3], 20.0, 1e-3, 11).unwrap();
        let mut rng = rng_from_seed(3);
        let r = estimate_refined(&p, &DMatrix::identity(3, 3), &k, &hs, &[0.0; 3], &[0, 8], 4.0, &mut rng).unwrap();
        let plain = estimate_density_at(&p, &k, &hs[0], &[0.0; 3]).unwrap().value;
        assert_abs_diff_eq!(plain, r[0], epsilon = 1e-12);
        assert!(r[1].is_finite());
        assert!(estimate_refined(&p, &DMatrix::identity(3, 3), &k, &hs, &[0.0; 3], &[0], 4.0, &mut rng).is_err());
    }

    #[test]
    fn refinement_level_reaches_resolution() {
        let h = BandwidthVector::new(vec![4e-4, 1e-2, 0.3]).unwrap();
        let l = refinement_level(&h, 1e-3, 1.0, 4.0);
        let sd = |l: u32| (1e-3 / (1u64 << l) as f64).sqrt();
        assert!(sd(l) <= 1e-4 && sd(l - 1) > 1e-4);
        assert_eq!(refinement_level(&BandwidthVector::new(vec![0.4]).unwrap(), 1e-3, 1.0, 4.0), 0);
    }
}
