//! Replicated Monte Carlo experiments: configuration, per-replicate runs,
//! aggregation and report rendering.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::{self, bootstrap_ci, IntervalMethod, IpwSpec, Method};
use crate::rng::derive_seed;
use crate::sampling::{sample_case_control, sample_proper_tnd};
use crate::simulator::{
    enumerated_relative_or, generate_population, testing_prevalence, true_prospective_or, true_relative_or,
    Population, ScenarioSpec, SimError,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("every replicate of {0} failed")]
    MethodFailed(Method),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error("reading configuration: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub const REPLICATES_FILE: &str = "replicates.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TABLE_FILE: &str = "table.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Preset scenario, used unless `spec` is given.
    pub scenario: u8,
    /// Inline scenario specification.
    #[serde(default)]
    pub spec: Option<ScenarioSpec>,
    /// Recalibrate the testing intercept to this population prevalence.
    #[serde(default)]
    pub testing_target: Option<f64>,
    pub population_size: usize,
    pub n_tested: usize,
    pub n_controls: usize,
    pub replicates: usize,
    /// Bootstrap replicates per IPW estimate; 0 skips IPW intervals.
    pub bootstrap_b: usize,
    #[serde(default = "default_level")]
    pub ci_level: f64,
    pub methods: Vec<Method>,
    pub base_seed: u64,
    /// Reuse one population for every replicate.
    #[serde(default)]
    pub fixed_population: bool,
    /// The IPW estimator assumes q0 = realised prevalence × this factor.
    #[serde(default = "default_multiplier")]
    pub q0_multiplier: f64,
    /// Size of the dedicated population behind the relative-OR truth.
    #[serde(default = "default_truth_population")]
    pub truth_population: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_level() -> f64 {
    0.95
}

fn default_multiplier() -> f64 {
    1.0
}

fn default_truth_population() -> usize {
    1_000_000
}

impl ExperimentConfig {
    pub fn profile(profile: Profile, scenario: u8) -> Self {
        let (population_size, n, replicates, bootstrap_b) = match profile {
            Profile::Desk => (200_000, 400, 300, 200),
            Profile::Paper => (1_000_000, 2000, 1000, 500),
        };
        Self {
            scenario,
            spec: None,
            testing_target: Some(0.008),
            population_size,
            n_tested: n,
            n_controls: n,
            replicates,
            bootstrap_b,
            ci_level: 0.95,
            methods: Method::defaults_for(scenario),
            base_seed: 20_240_601,
            fixed_population: false,
            q0_multiplier: 1.0,
            truth_population: default_truth_population(),
            out_dir: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        if self.population_size == 0 || self.truth_population == 0 {
            return bad("population sizes must be positive");
        }
        if self.n_tested == 0 || self.n_controls == 0 {
            return bad("sample sizes must be positive");
        }
        if self.methods.is_empty() {
            return bad("no methods configured");
        }
        if self.bootstrap_b == 1 {
            return bad("bootstrap_b must be 0 or at least 2");
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return bad("ci_level must lie in (0, 1)");
        }
        if !(self.q0_multiplier > 0.0 && self.q0_multiplier.is_finite()) {
            return bad("q0_multiplier must be positive");
        }
        if let Some(t) = self.testing_target {
            if !(t > 0.0 && t < 1.0) {
                return bad("testing_target must lie in (0, 1)");
            }
        }
        Ok(())
    }

    /// Scenario after applying the inline override and testing target.
    pub fn resolved_spec(&self) -> Result<ScenarioSpec> {
        let mut spec = match &self.spec {
            Some(s) => s.clone(),
            None => ScenarioSpec::preset(self.scenario)?,
        };
        if let Some(t) = self.testing_target {
            spec.calibrate_testing(t)?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

/// One row of the per-replicate CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub method: Method,
    pub status: Status,
    pub log_or: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub interval_method: Option<IntervalMethod>,
    pub converged: Option<bool>,
    pub nuisance_separation: Option<bool>,
    pub positivity_floored: Option<usize>,
    pub bootstrap_failures: Option<usize>,
    pub error: Option<String>,
}

impl ReplicateRow {
    fn failed(replicate: usize, method: Method, error: String) -> Self {
        Self {
            replicate,
            method,
            status: Status::Failed,
            log_or: None,
            lower: None,
            upper: None,
            interval_method: None,
            converged: None,
            nuisance_separation: None,
            positivity_floored: None,
            bootstrap_failures: None,
            error: Some(error),
        }
    }
}

fn replicate_population(config: &ExperimentConfig, spec: &ScenarioSpec, replicate: usize) -> Result<Population> {
    let seed = if config.fixed_population {
        derive_seed(config.base_seed, &[u64::MAX])
    } else {
        derive_seed(config.base_seed, &[replicate as u64, 0])
    };
    Ok(generate_population(spec, config.population_size, seed)?)
}

/// Runs every configured method on one replicate. Method failures become
/// failed rows. `population` overrides per-replicate generation.
pub fn run_replicate(
    config: &ExperimentConfig,
    spec: &ScenarioSpec,
    replicate: usize,
    population: Option<&Population>,
) -> Result<Vec<ReplicateRow>> {
    let owned;
    let population = match population {
        Some(p) => p,
        None => {
            owned = replicate_population(config, spec, replicate)?;
            &owned
        }
    };
    let seed = |k: u64| derive_seed(config.base_seed, &[replicate as u64, k]);
    let q0 = (testing_prevalence(population) * config.q0_multiplier).min(1.0 - 1e-12);

    let needs_case_control = config.methods.iter().any(|m| *m != Method::ProperTnd);
    let case_control = needs_case_control
        .then(|| sample_case_control(population, config.n_tested, config.n_controls, seed(1)))
        .map(|r| {
            r.map(|mut s| {
                s.q0_assumed = Some(q0);
                s
            })
        });
    let tnd = config
        .methods
        .contains(&Method::ProperTnd)
        .then(|| sample_proper_tnd(population, config.n_tested, 0, seed(2)));

    let mut rows = Vec::with_capacity(config.methods.len());
    for (k, &method) in config.methods.iter().enumerate() {
        let sample = if method == Method::ProperTnd { &tnd } else { &case_control };
        let sample = match sample.as_ref().expect("sample drawn for configured method") {
            Ok(s) => s,
            Err(e) => {
                rows.push(ReplicateRow::failed(replicate, method, e.to_string()));
                continue;
            }
        };
        let outcome = estimators::estimate(method, sample, config.ci_level).and_then(|mut est| {
            if let Method::Ipw(variant) = method {
                if config.bootstrap_b >= 2 {
                    let ipw = IpwSpec::new(variant, q0);
                    let ci = bootstrap_ci(sample, &ipw, config.bootstrap_b, config.ci_level, seed(3 + k as u64))?;
                    est.interval = Some((ci.lower, ci.upper));
                    est.interval_method = Some(IntervalMethod::PercentileBootstrap);
                    est.diagnostics.bootstrap_failures = Some(ci.failures);
                }
            }
            Ok(est)
        });
        rows.push(match outcome {
            Ok(est) => ReplicateRow {
                replicate,
                method,
                status: Status::Ok,
                log_or: Some(est.log_or),
                lower: est.interval.map(|i| i.0),
                upper: est.interval.map(|i| i.1),
                interval_method: est.interval_method,
                converged: Some(est.diagnostics.stages_converged.iter().all(|&c| c)),
                nuisance_separation: est.method.is_ipw().then_some(est.diagnostics.nuisance_separation),
                positivity_floored: est.method.is_ipw().then_some(est.diagnostics.positivity_floored),
                bootstrap_failures: est.diagnostics.bootstrap_failures,
                error: None,
            },
            Err(e) => ReplicateRow::failed(replicate, method, e.to_string()),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthBlock {
    pub true_or: f64,
    pub non_collapsible: bool,
    /// exp(β*) fitted on the dedicated truth population.
    pub true_relative_or: f64,
    pub enumerated_relative_or: f64,
    /// Testing prevalence of the truth population.
    pub realized_q0: f64,
}

pub fn compute_truth(config: &ExperimentConfig, spec: &ScenarioSpec) -> Result<TruthBlock> {
    let prospective = true_prospective_or(spec)?;
    let population = generate_population(spec, config.truth_population, derive_seed(config.base_seed, &[u64::MAX - 1]))?;
    Ok(TruthBlock {
        true_or: prospective.odds_ratio,
        non_collapsible: prospective.non_collapsible,
        true_relative_or: true_relative_or(&population)?,
        enumerated_relative_or: enumerated_relative_or(spec)?,
        realized_q0: testing_prevalence(&population),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub successes: usize,
    pub failures: usize,
    /// exp(mean log_or).
    pub mean_est: f64,
    /// Standard deviation of log_or across replicates.
    pub mc_se: f64,
    /// Percent of intervals containing log β; `None` without intervals.
    pub coverage_beta: Option<f64>,
    pub coverage_beta_star: Option<f64>,
    pub interval_method: Option<IntervalMethod>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub spec: ScenarioSpec,
    pub truth: TruthBlock,
    pub methods: Vec<MethodSummary>,
}

fn coverage(rows: &[&ReplicateRow], target: f64) -> Option<f64> {
    let intervals: Vec<(f64, f64)> = rows.iter().filter_map(|r| Some((r.lower?, r.upper?))).collect();
    if intervals.is_empty() {
        return None;
    }
    let hits = intervals.iter().filter(|(lo, hi)| *lo <= target && target <= *hi).count();
    Some(100.0 * hits as f64 / intervals.len() as f64)
}

/// Per-method statistics over `rows`, in the order of `methods`.
pub fn aggregate(rows: &[ReplicateRow], methods: &[Method], truth: &TruthBlock) -> Result<Vec<MethodSummary>> {
    methods
        .iter()
        .map(|&method| {
            let mine: Vec<&ReplicateRow> = rows.iter().filter(|r| r.method == method).collect();
            let ok: Vec<&ReplicateRow> = mine.iter().copied().filter(|r| r.status == Status::Ok).collect();
            if ok.is_empty() {
                return Err(HarnessError::MethodFailed(method));
            }
            let values: Vec<f64> = ok.iter().map(|r| r.log_or.expect("ok row has estimate")).collect();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let mc_se = if values.len() > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            Ok(MethodSummary {
                method,
                successes: ok.len(),
                failures: mine.len() - ok.len(),
                mean_est: mean.exp(),
                mc_se,
                coverage_beta: coverage(&ok, truth.true_or.ln()),
                coverage_beta_star: coverage(&ok, truth.true_relative_or.ln()),
                interval_method: ok.iter().find_map(|r| r.interval_method),
            })
        })
        .collect()
}

/// Per-replicate rows ordered by replicate, then configured method order.
pub fn run_replicates(config: &ExperimentConfig, spec: &ScenarioSpec) -> Result<Vec<ReplicateRow>> {
    let fixed = if config.fixed_population {
        Some(replicate_population(config, spec, 0)?)
    } else {
        None
    };
    let per_replicate: Vec<Result<Vec<ReplicateRow>>> = (0..config.replicates)
        .into_par_iter()
        .map(|r| run_replicate(config, spec, r, fixed.as_ref()))
        .collect();
    let mut rows = Vec::with_capacity(config.replicates * config.methods.len());
    for result in per_replicate {
        rows.extend(result?);
    }
    Ok(rows)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<(ExperimentReport, Vec<ReplicateRow>)> {
    config.validate()?;
    let spec = config.resolved_spec()?;
    let truth = compute_truth(config, &spec)?;
    let rows = run_replicates(config, &spec)?;
    let methods = aggregate(&rows, &config.methods, &truth)?;
    Ok((
        ExperimentReport {
            config: config.clone(),
            spec,
            truth,
            methods,
        },
        rows,
    ))
}

fn fmt_cov(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |c| format!("{c:.0}"))
}

/// Fixed-width table: OR-scale mean, MC SE of log_or and coverage of β and
/// β* in whole percent. Coverage of β is reported for every method.
pub fn render_table(report: &ExperimentReport) -> String {
    let t = &report.truth;
    let mut out = String::new();
    let _ = writeln!(out, "Scenario {}", report.spec.scenario_id);
    let _ = writeln!(out, "True OR exp(beta) = {:.2}", t.true_or);
    let _ = writeln!(
        out,
        "True relative OR exp(beta*) = {:.2} (enumerated {:.2})",
        t.true_relative_or, t.enumerated_relative_or
    );
    let _ = writeln!(out, "Testing prevalence q0 = {:.4}", t.realized_q0);
    let _ = writeln!(
        out,
        "Replicates = {}, samples {} tested / {} controls, population {}",
        report.config.replicates, report.config.n_tested, report.config.n_controls, report.config.population_size
    );
    let _ = writeln!(
        out,
        "{:<24} {:>8} {:>6} {:>10} {:>11} {:>8}  {}",
        "Method", "Mean est", "MC SE", "% Cov beta", "% Cov beta*", "Failures", "Interval"
    );
    for m in &report.methods {
        let _ = writeln!(
            out,
            "{:<24} {:>8.2} {:>6.2} {:>10} {:>11} {:>8}  {}",
            m.method.tag(),
            m.mean_est,
            m.mc_se,
            fmt_cov(m.coverage_beta),
            fmt_cov(m.coverage_beta_star),
            m.failures,
            m.interval_method.map_or_else(|| "-".to_string(), |i| i.to_string())
        );
    }
    out
}

pub fn write_replicates_csv<W: Write>(out: W, rows: &[ReplicateRow]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_replicates_csv<R: Read>(input: R) -> Result<Vec<ReplicateRow>> {
    let mut reader = csv::Reader::from_reader(input);
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Writes the replicate CSV, JSON summary and rendered table into `dir`.
pub fn write_outputs(dir: &Path, report: &ExperimentReport, rows: &[ReplicateRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_replicates_csv(fs::File::create(dir.join(REPLICATES_FILE))?, rows)?;
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join(TABLE_FILE), render_table(report))?;
    Ok(())
}

/// Rebuilds the report from the files in `dir`, re-aggregating the
/// replicate CSV against the stored truth and configuration.
pub fn report_from_dir(dir: &Path) -> Result<ExperimentReport> {
    let stored: ExperimentReport = serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY_FILE))?)?;
    let rows = read_replicates_csv(fs::File::open(dir.join(REPLICATES_FILE))?)?;
    let methods = aggregate(&rows, &stored.config.methods, &stored.truth)?;
    Ok(ExperimentReport { methods, ..stored })
}

/// Estimate and optional bootstrap interval for one method on one sample.
pub fn estimate_once(
    config: &ExperimentConfig,
    spec: &ScenarioSpec,
    method: Method,
) -> Result<std::result::Result<estimators::Estimate, estimators::EstimationError>> {
    let population = replicate_population(config, spec, 0)?;
    let q0 = testing_prevalence(&population) * config.q0_multiplier;
    let seed = |k: u64| derive_seed(config.base_seed, &[0, k]);
    let sample = if method == Method::ProperTnd {
        sample_proper_tnd(&population, config.n_tested, 0, seed(2))
    } else {
        sample_case_control(&population, config.n_tested, config.n_controls, seed(1))
    };
    let mut sample = match sample {
        Ok(s) => s,
        Err(e) => return Ok(Err(e.into())),
    };
    sample.q0_assumed = Some(q0);
    Ok(estimators::estimate(method, &sample, config.ci_level).and_then(|mut est| {
        if let Method::Ipw(variant) = method {
            if config.bootstrap_b >= 2 {
                let spec = IpwSpec::new(variant, q0);
                let ci = bootstrap_ci(&sample, &spec, config.bootstrap_b, config.ci_level, seed(3))?;
                est.interval = Some((ci.lower, ci.upper));
                est.interval_method = Some(IntervalMethod::PercentileBootstrap);
                est.diagnostics.bootstrap_failures = Some(ci.failures);
            }
        }
        Ok(est)
    }))
}
