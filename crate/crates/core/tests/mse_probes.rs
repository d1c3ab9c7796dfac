use jumpkde::experiments::{mse_study, prior_model, sample_stats, ExperimentConfig, Study};
use jumpkde::generator::Marginal;
use jumpkde::kernels::build_estimation_kernel;
use jumpkde::priors::eval_pi0;
use jumpkde::quadrature::integrate_panels;

fn config(horizons: Vec<f64>, replications: usize) -> ExperimentConfig {
    ExperimentConfig { horizons, replications, ..ExperimentConfig::defaults(Study::MseRate) }
}

#[test]
fn doubling_replications_moves_the_mse_by_less_than_two_standard_errors() {
    let small = mse_study(&config(vec![50.0, 100.0], 100)).unwrap();
    let large = mse_study(&config(vec![50.0, 100.0], 200)).unwrap();
    for (a, b) in small.table.rows.iter().zip(&large.table.rows) {
        assert!(
            (a.statistic - b.statistic).abs() < 2.0 * a.stderr,
            "T = {}: {} vs {}",
            a.coords[0],
            a.statistic,
            b.statistic
        );
    }
}

/// E[π̂(x)] = (𝕂_h ∗ π₀)(x) in stationarity. Both factors are products, so
/// this is a product of one-dimensional integrals.
fn smoothed_truth(cfg: &ExperimentConfig, h: &[f64]) -> f64 {
    let m = &cfg.mse;
    let pm = prior_model(cfg.model.eta, cfg.dim(), cfg.model.diffusion, 0.05, m.z_nodes, m.table_step).unwrap();
    let kernel = build_estimation_kernel(cfg.kernel_order).unwrap();
    let x = cfg.point();
    let mut p = eval_pi0(&pm.prior, &x);
    for (k, &hk) in h.iter().enumerate() {
        let f = pm.prior.marginal(k);
        let mut breaks: Vec<f64> = f.breakpoints().into_iter().filter(|b| (b - x[k]).abs() < hk).collect();
        breaks.extend([x[k] - hk, x[k] + hk]);
        breaks.sort_by(f64::total_cmp);
        let smoothed = integrate_panels(&breaks, 12, |y| kernel.eval((x[k] - y) / hk) / hk * f.value(y));
        p *= smoothed / f.value(x[k]);
    }
    p
}

#[test]
fn mean_estimate_matches_the_smoothed_density_and_bias_envelope() {
    let cfg = ExperimentConfig::defaults(Study::MseRate);
    let res = mse_study(&cfg).unwrap();
    let beta = cfg.mse.beta;
    let mut constants = Vec::new();
    for (ti, row) in res.table.rows.iter().enumerate() {
        let est: Vec<f64> = res.estimates.iter().map(|v| v[ti]).collect();
        let s = sample_stats(&est).unwrap();
        let se = (s.variance / est.len() as f64).sqrt();
        let target = smoothed_truth(&cfg, &row.extra);
        assert!((s.mean - target).abs() < 3.0 * se, "T = {}: mean {} vs {target} ± {se}", row.coords[0], s.mean);
        let envelope: f64 = row.extra.iter().map(|h| h.powf(beta)).sum();
        constants.push((s.mean - res.truth).abs() / envelope);
    }
    // |E π̂ − π₀| ≤ C Σ h_j^β with the same C at the two largest horizons.
    let n = constants.len();
    let ratio = constants[n - 1] / constants[n - 2];
    assert!((0.5..2.0).contains(&ratio), "{constants:?}");
}
