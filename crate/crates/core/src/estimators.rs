//! Analyses of a study sample: the three logistic comparisons and the
//! inverse-probability-weighted (IPW) estimator of the prospective OR.
//!
//! IPW runs in three stages:
//!
//! 1. `Q̂(x, c, w) = Pr(Y¹ = 1 | x, c, w, T = 1)` by logistic regression on
//!    the tested records.
//! 2. `P̂(T = 1 | x, c, w)` by logistic regression on the whole sample, with
//!    case-control weights `q0` (tested) and `(1 − q0) / J` (controls),
//!    `J = n_controls / n_tested`.
//! 3. Solve
//!    `Σ_{tested} (1, x, c)ᵀ (Q̂ᵢ − expit(β₀ + β₁xᵢ + γcᵢ)) / P̂ᵢ = 0`,
//!    i.e. a weighted logistic fit with fractional response `Q̂` and weight
//!    `1 / P̂`. The X coefficient is the estimate.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{build_design, build_regressors, subset, DataError, Formula, IndividualRecord, ObservedRecord, StudySample};
use crate::glm::{self, DesignMatrix, FitOptions, FitResult, GlmError};
use crate::rng;
use crate::sampling::{bootstrap_resample, SamplingError};
use crate::simulator::{enumerate_joint, xc_labels, ScenarioSpec};

/// Estimated testing probabilities below this are floored.
pub const POSITIVITY_FLOOR: f64 = 1e-6;

/// Nuisance coefficients beyond this magnitude are flagged as separated.
pub const NUISANCE_SEPARATION_FLAG: f64 = 30.0;

/// Largest share of failed bootstrap replicates tolerated.
pub const MAX_BOOTSTRAP_FAILURE_RATE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    Outcome,
    Numerator,
    Denominator,
    WeightedScore,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Outcome => "outcome model",
            Stage::Numerator => "infection model among tested",
            Stage::Denominator => "testing model",
            Stage::WeightedScore => "weighted score equation",
        })
    }
}

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("{stage}: {source}")]
    Fit { stage: Stage, source: GlmError },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("empty group: {0}")]
    EmptyGroup(&'static str),
    #[error("assumed testing prevalence {0} outside (0, 1)")]
    InvalidPrevalence(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{failed} of {total} bootstrap replicates failed")]
    BootstrapFailures { failed: usize, total: usize },
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

pub type Result<T> = std::result::Result<T, EstimationError>;

fn at(stage: Stage) -> impl Fn(GlmError) -> EstimationError {
    move |source| EstimationError::Fit { stage, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IpwVariant {
    Correct,
    MissingInteraction,
    OmittedW,
    OmitHcsb,
    AdjustHcsb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    ProperTnd,
    TestposVsControls,
    TestedOnly,
    Ipw(IpwVariant),
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::ProperTnd,
        Method::TestposVsControls,
        Method::TestedOnly,
        Method::Ipw(IpwVariant::Correct),
        Method::Ipw(IpwVariant::MissingInteraction),
        Method::Ipw(IpwVariant::OmittedW),
        Method::Ipw(IpwVariant::OmitHcsb),
        Method::Ipw(IpwVariant::AdjustHcsb),
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Method::ProperTnd => "proper-tnd",
            Method::TestposVsControls => "testpos-vs-controls",
            Method::TestedOnly => "tested-only",
            Method::Ipw(IpwVariant::Correct) => "ipw-correct",
            Method::Ipw(IpwVariant::MissingInteraction) => "ipw-missing-interaction",
            Method::Ipw(IpwVariant::OmittedW) => "ipw-omitted-w",
            Method::Ipw(IpwVariant::OmitHcsb) => "ipw-omit-hcsb",
            Method::Ipw(IpwVariant::AdjustHcsb) => "ipw-adjust-hcsb",
        }
    }

    /// Whether the method aims at the symptom-conditional OR rather than
    /// the prospective one.
    pub fn targets_relative_or(&self) -> bool {
        matches!(self, Method::ProperTnd)
    }

    pub fn is_ipw(&self) -> bool {
        matches!(self, Method::Ipw(_))
    }

    /// Methods reported by default for a scenario.
    pub fn defaults_for(scenario_id: u8) -> Vec<Method> {
        let mut methods = vec![Method::ProperTnd, Method::TestposVsControls, Method::TestedOnly];
        if scenario_id == 3 {
            methods.extend([Method::Ipw(IpwVariant::OmitHcsb), Method::Ipw(IpwVariant::AdjustHcsb)]);
        } else {
            methods.extend([
                Method::Ipw(IpwVariant::Correct),
                Method::Ipw(IpwVariant::MissingInteraction),
                Method::Ipw(IpwVariant::OmittedW),
            ]);
        }
        methods
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .iter()
            .find(|m| m.tag() == s.trim())
            .copied()
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.tag())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalMethod {
    Wald,
    PercentileBootstrap,
}

impl fmt::Display for IntervalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IntervalMethod::Wald => "wald",
            IntervalMethod::PercentileBootstrap => "percentile-bootstrap",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Convergence flag of each fitted stage, in order.
    pub stages_converged: Vec<bool>,
    pub iterations: Vec<usize>,
    /// A nuisance fit diverged in some direction (quasi-separation); its
    /// fitted probabilities there are ≈ 0 or 1.
    pub nuisance_separation: bool,
    /// Tested records whose P̂ was floored at [`POSITIVITY_FLOOR`].
    pub positivity_floored: usize,
    /// Norm of the IPW weighted score at the returned coefficients.
    pub ipw_score_norm: Option<f64>,
    pub bootstrap_failures: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub method: Method,
    /// X coefficient (log odds ratio).
    pub log_or: f64,
    pub all_coefficients: Vec<f64>,
    pub labels: Vec<String>,
    pub interval: Option<(f64, f64)>,
    pub interval_method: Option<IntervalMethod>,
    pub diagnostics: Diagnostics,
}

impl Estimate {
    pub fn odds_ratio(&self) -> f64 {
        self.log_or.exp()
    }
}

fn x_index(fit: &FitResult) -> usize {
    fit.labels.iter().position(|l| l == "x").expect("x term present")
}

fn xc_formula(outcome: &str) -> Formula {
    Formula::parse(&format!("{outcome} ~ x + c")).expect("static formula")
}

fn logistic_estimate(method: Method, sample: &StudySample, formula: &Formula, level: f64) -> Result<Estimate> {
    let (design, response) = build_design(sample, formula)?;
    let weights = vec![1.0; response.len()];
    let fit = glm::fit_weighted_logistic(&design, &response, &weights).map_err(at(Stage::Outcome))?;
    let ix = x_index(&fit);
    let interval = glm::wald_interval(&fit, ix, level).map_err(at(Stage::Outcome))?;
    Ok(Estimate {
        method,
        log_or: fit.coefficients[ix],
        all_coefficients: fit.coefficients.iter().copied().collect(),
        labels: fit.labels.clone(),
        interval: Some(interval),
        interval_method: Some(IntervalMethod::Wald),
        diagnostics: Diagnostics {
            stages_converged: vec![fit.converged],
            iterations: vec![fit.iterations],
            ..Default::default()
        },
    })
}

/// Y¹ on (1, X, C) among tested records; collider-biased in general.
pub fn estimate_tested_only(sample: &StudySample, level: f64) -> Result<Estimate> {
    let tested = subset(sample, |r| r.t == 1);
    if tested.is_empty() {
        return Err(EstimationError::EmptyGroup("tested"));
    }
    logistic_estimate(Method::TestedOnly, &tested, &xc_formula("y1"), level)
}

/// Y¹ on (1, X, C) among tested symptomatic records (targets β*).
pub fn estimate_proper_tnd(sample: &StudySample, level: f64) -> Result<Estimate> {
    let tnd = subset(sample, |r| r.t == 1 && r.w == 1);
    if tnd.is_empty() {
        return Err(EstimationError::EmptyGroup("tested symptomatic"));
    }
    logistic_estimate(Method::ProperTnd, &tnd, &xc_formula("y1"), level)
}

/// Symptomatic test-positives (1) versus untested population controls (0)
/// on (1, X, C).
pub fn estimate_testpos_vs_controls(sample: &StudySample, level: f64) -> Result<Estimate> {
    let groups = subset(sample, |r| (r.t == 1 && r.w == 1 && r.y1_observed() == Some(1)) || r.t == 0);
    if groups.n_tested == 0 {
        return Err(EstimationError::EmptyGroup("symptomatic test-positives"));
    }
    if groups.n_controls == 0 {
        return Err(EstimationError::EmptyGroup("population controls"));
    }
    // Within this subset, T is exactly the case indicator.
    logistic_estimate(Method::TestposVsControls, &groups, &xc_formula("t"), level)
}

/// Weight `q0` for tested records and `(1 − q0) / J` for untested ones,
/// in record order.
pub fn case_control_weights(sample: &StudySample, q0: f64) -> Result<Vec<f64>> {
    if !(q0 > 0.0 && q0 < 1.0) {
        return Err(EstimationError::InvalidPrevalence(q0));
    }
    let n_tested = sample.records.iter().filter(|r| r.t == 1).count();
    let n_controls = sample.len() - n_tested;
    if n_tested == 0 {
        return Err(EstimationError::EmptyGroup("tested"));
    }
    if n_controls == 0 {
        return Err(EstimationError::EmptyGroup("untested controls"));
    }
    let j = n_controls as f64 / n_tested as f64;
    let control_weight = (1.0 - q0) / j;
    Ok(sample
        .records
        .iter()
        .map(|r| if r.t == 1 { q0 } else { control_weight })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpwSpec {
    /// Model for Q = Pr(Y¹ | ·, T = 1), fitted on tested records.
    pub numerator_formula: Formula,
    /// Model for Pr(T = 1 | ·), fitted with case-control weights.
    pub denominator_formula: Formula,
    pub q0: f64,
    pub variant: IpwVariant,
}

impl IpwSpec {
    pub fn new(variant: IpwVariant, q0: f64) -> Self {
        let (num, den) = match variant {
            IpwVariant::Correct | IpwVariant::OmitHcsb => {
                ("y1 ~ x + c + w + w:x + w:c + x:c", "t ~ x + c + w + w:x")
            }
            IpwVariant::MissingInteraction => ("y1 ~ x + c + w + w:x + w:c + x:c", "t ~ x + c + w"),
            IpwVariant::OmittedW => ("y1 ~ x + c", "t ~ x + c"),
            IpwVariant::AdjustHcsb => (
                "y1 ~ x + c + w + w:x + w:c + x:c + h + h:x + h:w",
                "t ~ x + c + w + w:x + h + h:x",
            ),
        };
        Self {
            numerator_formula: Formula::parse(num).expect("static formula"),
            denominator_formula: Formula::parse(den).expect("static formula"),
            q0,
            variant,
        }
    }
}

/// Nuisance fits only need fitted probabilities, so quasi-separation is
/// accepted: separated cells get fitted probabilities ≈ 0 or 1.
fn nuisance_options() -> FitOptions {
    FitOptions {
        allow_separation: true,
        ..FitOptions::default()
    }
}

fn fit_nuisance(design: &DesignMatrix, response: &[f64], weights: &[f64], stage: Stage) -> Result<FitResult> {
    glm::fit_weighted_logistic_with(design, response, weights, &nuisance_options()).map_err(at(stage))
}

fn diverged(fit: &FitResult) -> bool {
    fit.coefficients.iter().any(|b| b.abs() > NUISANCE_SEPARATION_FLAG)
}

/// Stage 3: weighted logistic fit of the fractional response `q_hat` on
/// `design` with weights `inverse_p`.
pub fn solve_ipw_score(design: &DesignMatrix, q_hat: &[f64], inverse_p: &[f64]) -> Result<FitResult> {
    glm::fit_weighted_logistic(design, q_hat, inverse_p).map_err(at(Stage::WeightedScore))
}

fn stage3_design(records: &[ObservedRecord]) -> Result<DesignMatrix> {
    let mut data = Vec::with_capacity(records.len() * 3);
    for r in records {
        data.extend_from_slice(&[1.0, r.x as f64, r.c as f64]);
    }
    Ok(DesignMatrix::from_rows(records.len(), xc_labels(), &data).map_err(DataError::from)?)
}

pub fn estimate_ipw(sample: &StudySample, spec: &IpwSpec) -> Result<Estimate> {
    if !(spec.q0 > 0.0 && spec.q0 < 1.0) {
        return Err(EstimationError::InvalidPrevalence(spec.q0));
    }
    let tested = subset(sample, |r| r.t == 1);

    // Stage 1: infection model among the tested.
    let (num_design, num_response) = build_design(&tested, &spec.numerator_formula)?;
    let num_fit = fit_nuisance(&num_design, &num_response, &vec![1.0; tested.len()], Stage::Numerator)?;
    let q_hat = glm::predict(&num_fit, &num_design).map_err(at(Stage::Numerator))?;

    // Stage 2: testing model on the full sample with case-control weights.
    let weights = case_control_weights(sample, spec.q0)?;
    let (den_design, den_response) = build_design(sample, &spec.denominator_formula)?;
    let den_fit = fit_nuisance(&den_design, &den_response, &weights, Stage::Denominator)?;
    let p_design = build_regressors(&tested.records, &spec.denominator_formula)?;
    let p_hat = glm::predict(&den_fit, &p_design).map_err(at(Stage::Denominator))?;
    let mut floored = 0;
    let inverse_p: Vec<f64> = p_hat
        .iter()
        .map(|&p| {
            if p < POSITIVITY_FLOOR {
                floored += 1;
                1.0 / POSITIVITY_FLOOR
            } else {
                1.0 / p
            }
        })
        .collect();

    // Stage 3: the weighted score equation on (1, X, C).
    let design = stage3_design(&tested.records)?;
    let fit = solve_ipw_score(&design, &q_hat, &inverse_p)?;
    let score_norm = glm::weighted_score(&design, &q_hat, &inverse_p, &fit.coefficients).norm();

    Ok(Estimate {
        method: Method::Ipw(spec.variant),
        log_or: fit.coefficients[1],
        all_coefficients: fit.coefficients.iter().copied().collect(),
        labels: fit.labels.clone(),
        interval: None,
        interval_method: None,
        diagnostics: Diagnostics {
            stages_converged: vec![num_fit.converged, den_fit.converged, fit.converged],
            iterations: vec![num_fit.iterations, den_fit.iterations, fit.iterations],
            nuisance_separation: diverged(&num_fit) || diverged(&den_fit),
            positivity_floored: floored,
            ipw_score_norm: Some(score_norm),
            bootstrap_failures: None,
        },
    })
}

/// Dispatch on method. IPW needs the sample's assumed q0.
pub fn estimate(method: Method, sample: &StudySample, level: f64) -> Result<Estimate> {
    match method {
        Method::ProperTnd => estimate_proper_tnd(sample, level),
        Method::TestposVsControls => estimate_testpos_vs_controls(sample, level),
        Method::TestedOnly => estimate_tested_only(sample, level),
        Method::Ipw(variant) => {
            let q0 = sample
                .q0_assumed
                .ok_or_else(|| EstimationError::InvalidArgument("sample has no assumed q0".into()))?;
            estimate_ipw(sample, &IpwSpec::new(variant, q0))
        }
    }
}

// Bootstrap ---------------------------------------------------------------

/// Quantile with linear interpolation between order statistics
/// (h = (n − 1)·p, the "type 7" rule). `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty slice");
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Central percentile interval of `values` at `level`.
pub fn percentile_interval(values: &[f64], level: f64) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    (quantile_sorted(&sorted, alpha), quantile_sorted(&sorted, 1.0 - alpha))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInterval {
    pub lower: f64,
    pub upper: f64,
    pub replicates: usize,
    pub failures: usize,
}

/// Percentile interval over `b` case-control bootstrap resamples of the
/// IPW estimate. Failed resamples are dropped and counted.
pub fn bootstrap_ci(sample: &StudySample, spec: &IpwSpec, b: usize, level: f64, seed: u64) -> Result<BootstrapInterval> {
    if b < 2 {
        return Err(EstimationError::InvalidArgument(format!("B = {b} < 2")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(EstimationError::InvalidArgument(format!("level {level} outside (0, 1)")));
    }
    let results: Vec<Option<f64>> = (0..b as u64)
        .into_par_iter()
        .map(|k| {
            let resample = bootstrap_resample(sample, rng::derive_seed(seed, &[k])).ok()?;
            estimate_ipw(&resample, spec).ok().map(|e| e.log_or)
        })
        .collect();
    bootstrap_interval_from(&results, level)
}

/// Percentile interval from per-replicate results (`None` = failed).
pub fn bootstrap_interval_from(results: &[Option<f64>], level: f64) -> Result<BootstrapInterval> {
    let values: Vec<f64> = results.iter().flatten().copied().collect();
    let failures = results.len() - values.len();
    if values.is_empty() || failures as f64 > MAX_BOOTSTRAP_FAILURE_RATE * results.len() as f64 {
        return Err(EstimationError::BootstrapFailures {
            failed: failures,
            total: results.len(),
        });
    }
    let (lower, upper) = percentile_interval(&values, level);
    Ok(BootstrapInterval {
        lower,
        upper,
        replicates: results.len(),
        failures,
    })
}

// Population limits -------------------------------------------------------

/// Probability masses are scaled to this many records so the kernel's
/// absolute score tolerance means the same as on a real sample.
const PSEUDO_POPULATION: f64 = 1e6;

/// Coefficients (intercept, X, C) of the IPW score equation solved on the
/// exact joint distribution, with Q and Pr(T = 1 | ·) computed in closed
/// form per (x, c, w[, h]) cell. `adjust_h` adds H to the conditioning set.
pub fn exact_ipw(spec: &ScenarioSpec, adjust_h: bool) -> Result<DVector<f64>> {
    use std::collections::BTreeMap;
    // key -> [mass, tested mass, tested infected mass]
    let mut cells: BTreeMap<(u8, u8, u8, u8), [f64; 3]> = BTreeMap::new();
    for cell in enumerate_joint(spec) {
        let h = if adjust_h { cell.h } else { 0 };
        let e = cells.entry((cell.x, cell.c, cell.w, h)).or_default();
        e[0] += cell.prob;
        if cell.t == 1 {
            e[1] += cell.prob;
            if cell.y1 == 1 {
                e[2] += cell.prob;
            }
        }
    }
    let mut rows = Vec::new();
    let mut q = Vec::new();
    let mut inverse_p_mass = Vec::new();
    for (&(x, c, _, _), &[mass, tested, tested_infected]) in &cells {
        if tested <= 0.0 {
            continue;
        }
        let q_cell = tested_infected / tested;
        let p_cell = tested / mass;
        rows.extend_from_slice(&[1.0, x as f64, c as f64]);
        q.push(q_cell);
        // Each tested cell stands for `tested` mass of records weighted 1/P.
        inverse_p_mass.push(PSEUDO_POPULATION * tested / p_cell);
    }
    let design = DesignMatrix::from_rows(q.len(), xc_labels(), &rows).map_err(DataError::from)?;
    Ok(solve_ipw_score(&design, &q, &inverse_p_mass)?.coefficients)
}

/// Large-sample limit of [`estimate_ipw`] under `ipw`: every joint
/// cell becomes a record weighted by its probability. The testing model is
/// fitted at population scale, which is what correctly specified
/// case-control weighting reproduces; `ipw.q0` is not used.
pub fn ipw_population_limit(spec: &ScenarioSpec, ipw: &IpwSpec) -> Result<f64> {
    let joint = enumerate_joint(spec);
    let records: Vec<(ObservedRecord, f64)> = joint
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            let rec = IndividualRecord {
                c: cell.c,
                x: cell.x,
                u: cell.u,
                y1: cell.y1,
                y_other: cell.y_other,
                w: cell.w,
                h: spec.has_hcsb().then_some(cell.h),
                t: cell.t,
            };
            (rec.observe(i), PSEUDO_POPULATION * cell.prob)
        })
        .filter(|(_, p)| *p > 0.0)
        .collect();
    let tested: Vec<(ObservedRecord, f64)> = records.iter().filter(|(r, _)| r.t == 1).copied().collect();
    let tested_records: Vec<ObservedRecord> = tested.iter().map(|(r, _)| *r).collect();
    let tested_mass: Vec<f64> = tested.iter().map(|(_, p)| *p).collect();

    let num = StudySample::from_records(tested_records.clone(), None);
    let (d1, y1) = build_design(&num, &ipw.numerator_formula)?;
    let f1 = fit_nuisance(&d1, &y1, &tested_mass, Stage::Numerator)?;
    let q_hat = glm::predict(&f1, &d1).map_err(at(Stage::Numerator))?;

    let all = StudySample::from_records(records.iter().map(|(r, _)| *r).collect(), None);
    let mass: Vec<f64> = records.iter().map(|(_, p)| *p).collect();
    let (d2, t) = build_design(&all, &ipw.denominator_formula)?;
    let f2 = fit_nuisance(&d2, &t, &mass, Stage::Denominator)?;
    let p_hat = glm::predict(&f2, &build_regressors(&tested_records, &ipw.denominator_formula)?)
        .map_err(at(Stage::Denominator))?;

    let weights: Vec<f64> = tested_mass.iter().zip(&p_hat).map(|(m, p)| m / p).collect();
    let fit = solve_ipw_score(&stage3_design(&tested_records)?, &q_hat, &weights)?;
    Ok(fit.coefficients[1].exp())
}
