//! Acceptance criteria 1–9. Runs without the libtest harness so that every
//! criterion prints its line; the process fails if any criterion fails.

use jumpkde::bandwidth::{harmonic_mean_beta3, optimal_bandwidths, SmoothnessSpec, DEFAULT_SLACK};
use jumpkde::experiments::{mse_study, prior_check, stationarity_check, variance_study, ExperimentConfig, Study};
use jumpkde::generator::{
    adjoint_discrete, adjoint_discrete_partial, drift_from_density, GaussianRule, ProductDensity, QuadratureSpec,
};
use jumpkde::kernels::{build_bump_kernel, build_estimation_kernel};
use jumpkde::model::JumpMeasureSpec;
use jumpkde::priors::PriorZero;
use jumpkde::rng::derived_rng;
use nalgebra::DMatrix;
use rand::Rng;
use std::time::Instant;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_points(seed: u64, n: usize, d: usize, w: f64) -> Vec<Vec<f64>> {
    let mut rng = derived_rng(seed, 0);
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-w..w)).collect()).collect()
}

fn gaussian_drift_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for d in [1, 3] {
        let g = ProductDensity::standard_gaussian(d);
        let a = DMatrix::identity(d, d);
        let jumps = JumpMeasureSpec::none(d);
        let q = QuadratureSpec::default();
        for x in random_points(11 + d as u64, 100, d, 3.0) {
            for i in 0..d {
                let b = drift_from_density(&g, &a, &a, &jumps, i, &x, &q).expect("drift");
                worst = worst.max((b + x[i] / 2.0).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < 1e-9 && secs < 1.0, format!("max |b + x/2| = {worst:.2e} (< 1e-9), {secs:.2} s (< 1 s)"))
}

fn adjoint_sum_identity() -> Outcome {
    let start = Instant::now();
    let p = PriorZero::identity(0.25, 3).expect("prior");
    let gamma = DMatrix::identity(3, 3);
    let rules = [
        QuadratureSpec::with_nodes(8),
        QuadratureSpec { z_nodes: 4, gaussian_rule: GaussianRule::Separable { radius: 10.0 }, cell_nodes: 4 },
    ];
    let mut worst = 0.0f64;
    for lambda in [0.05, 1.0] {
        let jumps = JumpMeasureSpec::gaussian_identity(lambda, 3).expect("jumps");
        for q in &rules {
            for x in random_points(23, 50, 3, 6.0) {
                let total = adjoint_discrete(p.density.as_ref(), &gamma, &jumps, &x, q).expect("adjoint");
                let parts: f64 = (0..3)
                    .map(|i| adjoint_discrete_partial(p.density.as_ref(), &gamma, &jumps, i, &x, q).expect("partial"))
                    .sum();
                worst = worst.max((parts - total).abs() / total.abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < 1e-8 && secs < 30.0, format!("max relative gap = {worst:.2e} (< 1e-8), {secs:.2} s"))
}

fn stationarity_residual() -> Outcome {
    let start = Instant::now();
    let r = stationarity_check(&ExperimentConfig::defaults(Study::StationarityCheck)).expect("stationarity");
    let res: Vec<f64> = r.levels.iter().map(|l| l.max_residual).collect();
    let floor = res.iter().copied().fold(f64::INFINITY, f64::min);
    // Each doubling halves the residual unless the coarser level already sits
    // on the floor.
    let halving = res.windows(2).all(|w| w[1] <= w[0] / 2.0 || w[0] <= 2.0 * floor);
    let finest = *res.last().expect("levels");
    let secs = start.elapsed().as_secs_f64();
    let nodes: Vec<String> = r.levels.iter().map(|l| format!("{}:{:.1e}", l.z_nodes, l.max_residual)).collect();
    outcome(
        finest < 1e-3 && halving && secs < 120.0,
        format!("residual by nodes [{}], floor {floor:.1e}, {secs:.1} s", nodes.join(" ")),
    )
}

fn bandwidth_balance() -> Outcome {
    let mut rng = derived_rng(31, 0);
    let mut worst = 0.0f64;
    let mut ordered = true;
    for _ in 0..20 {
        let d = rng.random_range(3..=6);
        let mut beta: Vec<f64> = (0..d).map(|_| rng.random_range(1.0..6.0)).collect();
        beta.sort_by(f64::total_cmp);
        let spec = SmoothnessSpec::unit_radii(beta.clone()).expect("spec");
        let a = optimal_bandwidths(&spec, 1e6, DEFAULT_SLACK).expect("plan").exponents;
        for i in 2..d - 1 {
            worst = worst.max((beta[i] * a[i] - beta[i + 1] * a[i + 1]).abs());
        }
        let tail: f64 = a[2..].iter().sum();
        worst = worst.max((2.0 * beta[d - 1] * a[d - 1] - (1.0 - tail)).abs());
        let b3 = harmonic_mean_beta3(&spec).expect("b3");
        ordered &= b3 >= spec.harmonic_mean();
    }
    outcome(
        worst < 1e-12 && ordered,
        format!("max residual of the exponent system = {worst:.1e} (< 1e-12), β̄₃ ≥ β̄: {ordered}"),
    )
}

fn kernel_moments() -> Outcome {
    let mut worst = 0.0f64;
    for m in 1..=6 {
        let k = build_estimation_kernel(m).expect("kernel");
        worst = worst.max((k.moment(0) - 1.0).abs());
        for l in 1..=m as u32 {
            worst = worst.max(k.moment(l).abs());
        }
    }
    let b = build_bump_kernel();
    let bump = (b.eval(0.0) - 1.0).abs().max(b.moment(0).abs());
    outcome(
        worst < 1e-10 && bump < 1e-10,
        format!("estimation moments off by {worst:.1e}, bump K(0) and ∫K off by {bump:.1e} (< 1e-10)"),
    )
}

fn variance_plateau(csv: &mut Option<String>) -> Outcome {
    let cfg = ExperimentConfig::defaults(Study::VariancePlateau);
    let res = variance_study(&cfg).expect("variance study");
    *csv = Some(res.table.to_csv_string().expect("csv"));
    let s = &res.summary;
    outcome(
        s.verdicts.iter().all(|v| v.pass),
        format!(
            "ratio {:.2} (≤ 3), edge slopes {:.3} and {:.3} (|·| ≤ 0.15), diagonal {:.3} (|·| ≤ 0.35), {:.0} s",
            s.variance_ratio, s.edge_h2.slope, s.edge_h1.slope, s.diagonal.slope, res.table.metadata.wall_time_s
        ),
    )
}

fn mse_rate(csv: &mut Option<String>) -> Outcome {
    let cfg = ExperimentConfig::defaults(Study::MseRate);
    let res = mse_study(&cfg).expect("mse study");
    *csv = Some(res.table.to_csv_string().expect("csv"));
    let s = &res.summary;
    outcome(
        s.verdicts.iter().all(|v| v.pass),
        format!(
            "slope {:.3} ± {:.3} in [-1.1, -0.5], theory {:.2}, gate {:.1e}, {:.0} s",
            s.fit.slope, s.fit.stderr, s.theory, s.gate, res.table.metadata.wall_time_s
        ),
    )
}

fn prior_suite(json: &mut Option<String>) -> Outcome {
    let r = prior_check(&ExperimentConfig::defaults(Study::PriorCheck)).expect("prior check");
    *json = Some(serde_json::to_string(&r).expect("json"));
    let calib =
        r.calibration.iter().all(|c| c.constraints.calib_holder && c.constraints.calib_b && c.constraints.calib_finale);
    let bumps: Vec<String> = r.bump.iter().map(|b| format!("{:e}", b.t)).collect();
    let rejected: Vec<String> = r.bump_rejected.iter().map(|(t, _)| format!("{t:e}")).collect();
    outcome(
        r.pass && calib && !r.bump.is_empty(),
        format!(
            "Ad conditions {}, calibration {calib}, bump identities exact at T = [{}], π₁ not a density at T = [{}]",
            r.ad.iter().all(|a| a.pass),
            bumps.join(", "),
            rejected.join(", ")
        ),
    )
}

fn determinism(variance: &Option<String>, mse: &Option<String>, prior: &Option<String>) -> Outcome {
    let mut same = Vec::new();
    if let Some(first) = variance {
        let again = variance_study(&ExperimentConfig::defaults(Study::VariancePlateau)).expect("variance study");
        same.push(("variance", &again.table.to_csv_string().expect("csv") == first));
    }
    if let Some(first) = mse {
        let again = mse_study(&ExperimentConfig::defaults(Study::MseRate)).expect("mse study");
        same.push(("mse", &again.table.to_csv_string().expect("csv") == first));
    }
    if let Some(first) = prior {
        let again = prior_check(&ExperimentConfig::defaults(Study::PriorCheck)).expect("prior check");
        same.push(("prior", &serde_json::to_string(&again).expect("json") == first));
    }
    let cfg = ExperimentConfig::defaults(Study::StationarityCheck);
    let s1 = serde_json::to_string(&stationarity_check(&cfg).expect("check")).expect("json");
    let s2 = serde_json::to_string(&stationarity_check(&cfg).expect("check")).expect("json");
    same.push(("stationarity", s1 == s2));
    let all = same.len() == 4 && same.iter().all(|(_, s)| *s);
    let list: Vec<String> = same.iter().map(|(n, s)| format!("{n}={s}")).collect();
    outcome(all, format!("identical bytes on rerun: {}", list.join(" ")))
}

fn main() {
    let mut variance = None;
    let mut mse = None;
    let mut prior = None;
    let results = [
        ("1 gaussian drift oracle", gaussian_drift_oracle()),
        ("2 adjoint sum identity", adjoint_sum_identity()),
        ("3 stationarity residual", stationarity_residual()),
        ("4 bandwidth balance", bandwidth_balance()),
        ("5 kernel moments", kernel_moments()),
        ("6 variance plateau", variance_plateau(&mut variance)),
        ("7 mse rate", mse_rate(&mut mse)),
        ("8 prior suite", prior_suite(&mut prior)),
        ("9 determinism", determinism(&variance, &mse, &prior)),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        println!("criterion {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
