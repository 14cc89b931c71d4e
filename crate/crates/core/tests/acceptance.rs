//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fail. `ACCEPTANCE_ONLY=3,5` runs a subset.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tndipw::data::StudySample;
use tndipw::estimators::{case_control_weights, exact_ipw, solve_ipw_score, IpwVariant, Method};
use tndipw::glm::{fit_weighted_logistic, DesignMatrix, GlmError, INTERCEPT};
use tndipw::harness::{self, ExperimentConfig, ExperimentReport, Profile, ReplicateRow, Status};
use tndipw::sampling::{bootstrap_resample, sample_case_control};
use tndipw::simulator::{enumerated_relative_or, generate_population, true_prospective_or, ScenarioSpec};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn summary(report: &ExperimentReport, method: Method) -> &harness::MethodSummary {
    report.methods.iter().find(|m| m.method == method).expect("method in report")
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value / target - 1.0).abs() <= rel
}

/// Percent of successful replicates of `method` whose interval holds `target` (log scale).
fn coverage(rows: &[ReplicateRow], method: Method, target: f64) -> f64 {
    let iv: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.method == method && r.status == Status::Ok)
        .filter_map(|r| Some((r.lower?, r.upper?)))
        .collect();
    100.0 * iv.iter().filter(|(lo, hi)| *lo <= target && target <= *hi).count() as f64 / iv.len() as f64
}

// 1 ------------------------------------------------------------------------

fn kernel_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut done, mut separated, mut worst) = (0, 0, 0.0_f64);
    while done < 50 {
        let n = rng.gen_range(8..=30);
        let p = rng.gen_range(1..=3);
        let beta: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| std::iter::once(1.0).chain((1..p).map(|_| rng.gen_range(-2.0..2.0))).collect())
            .collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|d| {
                let eta: f64 = d.iter().zip(&beta).map(|(a, b)| a * b).sum();
                f64::from(rng.gen::<f64>() < 1.0 / (1.0 + (-eta).exp()))
            })
            .collect();
        let w = vec![1.0; n];
        let mut labels = vec![INTERCEPT.to_string()];
        labels.extend((1..p).map(|j| format!("z{j}")));
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let design = DesignMatrix::from_rows(n, labels, &flat).unwrap();
        match fit_weighted_logistic(&design, &y, &w) {
            Ok(fit) => {
                let oracle = common::brute_force_mle(&rows, &y, &w);
                for (a, b) in fit.coefficients.iter().zip(&oracle) {
                    worst = worst.max((a - b).abs());
                }
                done += 1;
            }
            // No finite maximum to compare against; drawn again.
            Err(GlmError::Separation { .. }) => separated += 1,
            Err(e) => return outcome(false, format!("unexpected kernel error: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 10.0,
        format!("50 instances, max |IRLS − Nelder–Mead| = {worst:.2e} (tol 1e-4), {separated} separated draws redrawn, {secs:.1}s"),
    )
}

// 2 ------------------------------------------------------------------------

fn random_spec(rng: &mut ChaCha8Rng, id: u8) -> ScenarioSpec {
    let mut s = ScenarioSpec::preset(id).unwrap();
    s.p_c = rng.gen_range(0.2..0.8);
    s.p_x_given_c = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    s.p_u = rng.gen_range(0.1..0.9);
    s.coef_y1.intercept = rng.gen_range(-4.0..-0.5);
    s.coef_y1.x = rng.gen_range(-1.0..1.5);
    s.coef_y1.c = rng.gen_range(-1.0..1.0);
    s.coef_y_other.intercept = rng.gen_range(-4.0..-1.0);
    s.coef_y_other.x = if id == 2 { s.coef_y1.x } else { rng.gen_range(-1.0..1.0) };
    s.coef_y_other.c = rng.gen_range(-1.0..1.0);
    s.coef_y_other.u = rng.gen_range(-1.0..1.0);
    s.coef_w.baseline = rng.gen_range(0.005..0.1);
    s.coef_w.given_y1 = rng.gen_range(0.3..0.95);
    s.coef_w.given_other = rng.gen_range(0.2..0.9);
    s.coef_t.intercept = rng.gen_range(-7.0..-3.0);
    s.coef_t.w = rng.gen_range(0.5..4.0);
    s.coef_t.x = rng.gen_range(-1.0..1.0);
    s.coef_t.c = rng.gen_range(-1.0..1.0);
    s.coef_t.wx = rng.gen_range(-1.0..1.0);
    if id == 3 {
        s.p_h = Some(rng.gen_range(0.1..0.6));
        s.coef_y1.h = rng.gen_range(0.5..2.5);
        s.coef_t.h = rng.gen_range(-1.0..1.0);
        s.coef_t.hx = rng.gen_range(0.5..2.0);
    }
    s.validate().unwrap();
    s
}

fn exact_identifiability() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst, mut worst_lib) = (0.0_f64, 0.0_f64);
    let mut cross = 0.0_f64;
    for i in 0..60 {
        let spec = random_spec(&mut rng, 1 + (i % 2) as u8);
        let target = [spec.coef_y1.intercept, spec.coef_y1.x, spec.coef_y1.c];
        let oracle = common::exact_ipw_oracle(&spec, false);
        let library = exact_ipw(&spec, false).unwrap();
        for j in 0..3 {
            worst = worst.max((oracle[j] - target[j]).abs());
            worst_lib = worst_lib.max((library[j] - target[j]).abs());
        }
    }
    // With H confounding, the adjusted solve recovers the H-marginal truth.
    let mut worst_h = 0.0_f64;
    for _ in 0..20 {
        let spec = random_spec(&mut rng, 3);
        let truth = common::marginal_truth(&spec);
        let oracle = common::exact_ipw_oracle(&spec, true);
        let library = exact_ipw(&spec, true).unwrap();
        worst_h = worst_h.max((oracle[1] - truth[1]).abs()).max((library[1] - truth[1]).abs());
        cross = cross.max((true_prospective_or(&spec).unwrap().odds_ratio.ln() - truth[1]).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-6 && worst_lib < 1e-6 && worst_h < 1e-6 && cross < 1e-6 && secs < 30.0,
        format!(
            "60 specs, max |β̂ − β| = {worst:.1e} (oracle) / {worst_lib:.1e} (library); 20 HCSB specs, max |β̂_H − β| = {worst_h:.1e}, truth cross-check {cross:.1e} (tol 1e-6), {secs:.1}s"
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn scenario_one() -> Outcome {
    let start = Instant::now();
    let config = ExperimentConfig::profile(Profile::Desk, 1);
    let (report, _) = harness::run_experiment(&config).unwrap();
    let relative = enumerated_relative_or(&report.spec).unwrap();
    let ipw = summary(&report, Method::Ipw(IpwVariant::Correct));
    let tnd = summary(&report, Method::ProperTnd);
    let tested = summary(&report, Method::TestedOnly);
    let omit_w = summary(&report, Method::Ipw(IpwVariant::OmittedW));
    let cov = ipw.coverage_beta.unwrap_or(f64::NAN);
    let checks = [
        within(ipw.mean_est, 2.5, 0.10),
        within(tnd.mean_est, relative, 0.10),
        tested.mean_est <= 0.8 * 2.5,
        omit_w.mean_est <= 0.8 * 2.5,
        (85.0..=97.0).contains(&cov),
    ];
    outcome(
        checks.iter().all(|&c| c),
        format!(
            "IPW-correct {:.2} (2.25–2.75), TND {:.2} vs β* {:.2} (±10%), tested-only {:.2} and IPW-omitted-W {:.2} (≤ 2.00), IPW coverage {cov:.0}% (85–97), {:.0}s",
            ipw.mean_est,
            tnd.mean_est,
            relative,
            tested.mean_est,
            omit_w.mean_est,
            start.elapsed().as_secs_f64()
        ),
    )
}

// 4 ------------------------------------------------------------------------

fn scenario_two() -> Outcome {
    let start = Instant::now();
    let mut config = ExperimentConfig::profile(Profile::Desk, 2);
    // Point estimates only: no coverage is judged here.
    config.bootstrap_b = 0;
    let (report, _) = harness::run_experiment(&config).unwrap();
    let relative = enumerated_relative_or(&report.spec).unwrap();
    let tnd = summary(&report, Method::ProperTnd);
    let tpvc = summary(&report, Method::TestposVsControls);
    let ipw = summary(&report, Method::Ipw(IpwVariant::Correct));
    let checks = [
        relative > 1.0 && relative < 1.5,
        within(tnd.mean_est, relative, 0.10),
        within(tpvc.mean_est, 1.5, 0.10),
        within(ipw.mean_est, 1.5, 0.10),
    ];
    outcome(
        checks.iter().all(|&c| c),
        format!(
            "β* {relative:.3} in (1, 1.5); TND {:.2} (±10% of β*), test+ vs controls {:.2} and IPW-correct {:.2} (1.35–1.65), {:.0}s",
            tnd.mean_est,
            tpvc.mean_est,
            ipw.mean_est,
            start.elapsed().as_secs_f64()
        ),
    )
}

// 5 ------------------------------------------------------------------------

fn scenario_three() -> Outcome {
    let start = Instant::now();
    // Paper-profile sample sizes: at 400/400 the omitted-H bias is under two
    // sampling SDs (see README).
    let mut config = ExperimentConfig::profile(Profile::Paper, 3);
    config.replicates = 100;
    config.bootstrap_b = 200;
    let (report, rows) = harness::run_experiment(&config).unwrap();
    let truth = true_prospective_or(&report.spec).unwrap().odds_ratio;
    let relative = enumerated_relative_or(&report.spec).unwrap();
    let adjust = Method::Ipw(IpwVariant::AdjustHcsb);
    let omit = Method::Ipw(IpwVariant::OmitHcsb);
    let adj_mean = summary(&report, adjust).mean_est;
    let cov_adj = coverage(&rows, adjust, truth.ln());
    let cov_omit = coverage(&rows, omit, truth.ln());
    let cov_tpvc = coverage(&rows, Method::TestposVsControls, truth.ln());
    let cov_tnd = coverage(&rows, Method::ProperTnd, relative.ln());
    let checks = [
        within(adj_mean, truth, 0.10),
        cov_adj >= 85.0,
        cov_tnd <= 50.0,
        cov_tpvc <= 50.0,
        cov_omit <= 50.0,
    ];
    outcome(
        checks.iter().all(|&c| c),
        format!(
            "truth {truth:.2}: IPW-adjust-H {adj_mean:.2} (±10%) coverage {cov_adj:.0}% (≥ 85); coverage TND (of β* {relative:.2}) {cov_tnd:.0}%, test+ vs controls {cov_tpvc:.0}%, IPW-omit-H {cov_omit:.0}% (≤ 50), {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn conditional_independence() -> Outcome {
    let config = ExperimentConfig::profile(Profile::Desk, 1);
    let spec = config.resolved_spec().unwrap();
    let population = generate_population(&spec, 1_000_000, config.base_seed).unwrap();
    // [x][c][w] -> counts [t=1,y=1], [t=1,y=0], [t=0,y=1], [t=0,y=0]
    let mut counts = [[[[0.0_f64; 4]; 2]; 2]; 2];
    for r in &population.records {
        let k = 2 * (1 - r.t as usize) + (1 - r.y1 as usize);
        counts[r.x as usize][r.c as usize][r.w as usize][k] += 1.0;
    }
    let mut misses = Vec::new();
    let mut worst = 0.0_f64;
    for x in 0..2 {
        for c in 0..2 {
            for w in 0..2 {
                let mut k = counts[x][c][w];
                if k.contains(&0.0) {
                    k.iter_mut().for_each(|v| *v += 0.5);
                }
                let (log_or, se) = common::two_by_two(k[0], k[1], k[2], k[3]);
                let z = (log_or / se).abs();
                worst = worst.max(z);
                if z > 1.959_963_984_540_054 {
                    misses.push(format!("x={x} c={c} w={w} OR={:.2}", log_or.exp()));
                }
            }
        }
    }
    outcome(
        misses.is_empty(),
        format!("8 (X,C,W) strata of 1M records, max |log OR|/SE = {worst:.2} (≤ 1.96){}", if misses.is_empty() { String::new() } else { format!("; outside: {}", misses.join(", ")) }),
    )
}

// 7 ------------------------------------------------------------------------

fn determinism_and_invariants() -> Outcome {
    let start = Instant::now();
    let mut config = ExperimentConfig::profile(Profile::Desk, 1);
    config.population_size = 60_000;
    config.n_tested = 150;
    config.n_controls = 150;
    config.replicates = 6;
    config.bootstrap_b = 20;
    config.truth_population = 50_000;
    let csv_for = |threads: usize| -> Vec<u8> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let (report, rows) = pool.install(|| harness::run_experiment(&config)).unwrap();
        let mut out = Vec::new();
        harness::write_replicates_csv(&mut out, &rows).unwrap();
        out.extend(serde_json::to_vec(&report).unwrap());
        out
    };
    let reference = csv_for(1);
    let identical = [2, 4].iter().all(|&n| csv_for(n) == reference);

    // Weight-scale invariance of the kernel and of the weighted score solve.
    let spec = config.resolved_spec().unwrap();
    let population = generate_population(&spec, 40_000, 7).unwrap();
    let sample = sample_case_control(&population, 150, 150, 7).unwrap();
    let tested: Vec<_> = sample.tested().copied().collect();
    let rows: Vec<f64> = tested.iter().flat_map(|r| [1.0, r.x as f64, r.c as f64]).collect();
    let design = DesignMatrix::from_rows(tested.len(), vec![INTERCEPT.into(), "x".into(), "c".into()], &rows).unwrap();
    let y: Vec<f64> = tested.iter().map(|r| r.y1().unwrap() as f64).collect();
    let w: Vec<f64> = (0..tested.len()).map(|i| 1.0 + (i % 5) as f64).collect();
    let base = fit_weighted_logistic(&design, &y, &w).unwrap();
    let ipw_base = solve_ipw_score(&design, &y, &w).unwrap();
    let mut scale_gap = 0.0_f64;
    for k in [1e-3, 0.5, 7.0, 1e4] {
        let scaled: Vec<f64> = w.iter().map(|v| v * k).collect();
        let a = fit_weighted_logistic(&design, &y, &scaled).unwrap();
        let b = solve_ipw_score(&design, &y, &scaled).unwrap();
        scale_gap = scale_gap
            .max((&a.coefficients - &base.coefficients).amax())
            .max((&b.coefficients - &ipw_base.coefficients).amax());
    }

    // Case-control weights sum to the number of tested records.
    let mut sum_gap = 0.0_f64;
    for q0 in [1e-4, 0.002, 0.3, 0.9] {
        let weights = case_control_weights(&sample, q0).unwrap();
        sum_gap = sum_gap.max((weights.iter().sum::<f64>() - sample.n_tested as f64).abs());
    }

    // Bootstrap resamples keep both stratum sizes.
    let preserved = (0..50u64).all(|s| {
        let b: StudySample = bootstrap_resample(&sample, s).unwrap();
        b.tested().count() == sample.n_tested && b.controls().count() == sample.n_controls && b.len() == sample.len()
    });

    let secs = start.elapsed().as_secs_f64();
    outcome(
        identical && scale_gap < 1e-8 && sum_gap < 1e-9 && preserved && secs < 60.0,
        format!(
            "outputs identical across 1/2/4 threads: {identical}; weight-scale gap {scale_gap:.1e}; Σ weights − n_tested {sum_gap:.1e}; bootstrap strata preserved: {preserved}; {secs:.1}s"
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(u8, &str, fn() -> Outcome); 7] = [
        (1, "kernel vs brute-force likelihood oracle", kernel_oracle),
        (2, "exact IPW identifiability", exact_identifiability),
        (3, "scenario 1 pattern (desk)", scenario_one),
        (4, "scenario 2 separation of targets (desk)", scenario_two),
        (5, "scenario 3 HCSB pattern (1M / 2000 / 2000)", scenario_three),
        (6, "T ⟂ Y¹ given (X, C, W) audit", conditional_independence),
        (7, "determinism and invariants", determinism_and_invariants),
    ];
    let only: Option<Vec<u8>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let result = run();
        if !result.pass {
            failed += 1;
        }
        println!("{} [{id}] {name}: {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
