//! Complete-data populations from structural equations following the
//! missing-data DAG: C → X; U → (Y¹, other infection); (Y¹, other) → W;
//! (W, X, C, H) → T. Testing never reads Y¹ directly.
//!
//! All nodes are binary, so the joint distribution can also be enumerated
//! exactly. Enumeration drives intercept calibration, the prospective and
//! symptom-conditional truths, and the exact identifiability oracle.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::IndividualRecord;
use crate::glm::{self, expit, DesignMatrix, GlmError, INTERCEPT};
use crate::rng;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("population size must be at least 1")]
    EmptyPopulation,
    #[error("no symptomatic members to fit the relative model")]
    EmptyStratum,
    #[error("calibration of {what} failed: target {target} not reachable")]
    Calibration { what: &'static str, target: f64 },
    #[error(transparent)]
    Glm(#[from] GlmError),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfectionCoefs {
    pub intercept: f64,
    pub x: f64,
    pub c: f64,
    pub u: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OtherInfectionCoefs {
    pub intercept: f64,
    pub x: f64,
    pub c: f64,
    pub u: f64,
}

/// Symptom probabilities. With both infections present the two
/// infection-specific probabilities combine as a noisy-OR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymptomProbs {
    pub baseline: f64,
    pub given_y1: f64,
    pub given_other: f64,
}

impl SymptomProbs {
    pub fn prob(&self, y1: u8, y_other: u8) -> f64 {
        if y1 == 0 && y_other == 0 {
            self.baseline
        } else {
            let mut none = 1.0;
            if y1 == 1 {
                none *= 1.0 - self.given_y1;
            }
            if y_other == 1 {
                none *= 1.0 - self.given_other;
            }
            1.0 - none
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestingCoefs {
    pub intercept: f64,
    pub w: f64,
    pub x: f64,
    pub c: f64,
    pub wx: f64,
    pub h: f64,
    /// HCSB × X interaction.
    #[serde(default)]
    pub hx: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceTargets {
    pub infection: f64,
    pub other_infection: f64,
    pub testing: f64,
}

impl Default for PrevalenceTargets {
    fn default() -> Self {
        Self {
            infection: 0.10,
            other_infection: 0.05,
            testing: 0.002,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario_id: u8,
    pub p_c: f64,
    /// Pr(X = 1 | C = 0), Pr(X = 1 | C = 1).
    pub p_x_given_c: [f64; 2],
    /// U ~ Bernoulli(p_u).
    pub p_u: f64,
    /// H ~ Bernoulli(p_h), Scenario 3 only.
    pub p_h: Option<f64>,
    pub coef_y1: InfectionCoefs,
    pub coef_y_other: OtherInfectionCoefs,
    pub coef_w: SymptomProbs,
    pub coef_t: TestingCoefs,
}

impl ScenarioSpec {
    /// Uncalibrated structural coefficients (intercepts zero).
    fn structure(id: u8) -> Self {
        let mut spec = ScenarioSpec {
            scenario_id: id,
            p_c: 0.5,
            p_x_given_c: [expit(-0.5), expit(0.5)],
            p_u: 0.3,
            p_h: None,
            coef_y1: InfectionCoefs {
                intercept: 0.0,
                x: 2.5_f64.ln(),
                c: 1.5_f64.ln(),
                u: 0.0,
                h: 0.0,
            },
            coef_y_other: OtherInfectionCoefs {
                intercept: 0.0,
                x: 1.5_f64.ln(),
                c: 0.3,
                u: 0.5,
            },
            coef_w: SymptomProbs {
                baseline: 0.01,
                given_y1: 0.9,
                given_other: 0.6,
            },
            coef_t: TestingCoefs {
                intercept: 0.0,
                w: 1.5,
                x: 0.7,
                c: 0.5,
                wx: -0.7,
                h: 0.0,
                hx: 0.0,
            },
        };
        match id {
            2 => spec.coef_y1.x = 1.5_f64.ln(),
            3 => {
                spec.p_h = Some(0.2);
                spec.coef_y1.h = 2.5;
                spec.coef_t.h = -0.5;
                spec.coef_t.hx = 3.0;
            }
            _ => {}
        }
        spec
    }

    /// Default scenario calibrated to the default prevalence targets.
    pub fn preset(id: u8) -> Result<Self> {
        Self::preset_with_targets(id, &PrevalenceTargets::default())
    }

    pub fn preset_with_targets(id: u8, targets: &PrevalenceTargets) -> Result<Self> {
        if !(1..=3).contains(&id) {
            return Err(SimError::InvalidSpec(format!("unknown scenario {id}")));
        }
        let mut spec = Self::structure(id);
        spec.calibrate(targets)?;
        Ok(spec)
    }

    /// Solve the three intercepts so the population prevalences of Y¹,
    /// other infection and testing hit `targets` (exact enumeration).
    pub fn calibrate(&mut self, targets: &PrevalenceTargets) -> Result<()> {
        self.coef_y1.intercept = bisect("infection intercept", targets.infection, |a| {
            let mut s = self.clone();
            s.coef_y1.intercept = a;
            marginal(&s, |cell| cell.y1 == 1)
        })?;
        self.coef_y_other.intercept = bisect("other-infection intercept", targets.other_infection, |a| {
            let mut s = self.clone();
            s.coef_y_other.intercept = a;
            marginal(&s, |cell| cell.y_other == 1)
        })?;
        self.calibrate_testing(targets.testing)
    }

    pub fn calibrate_testing(&mut self, target: f64) -> Result<()> {
        self.coef_t.intercept = bisect("testing intercept", target, |a| {
            let mut s = self.clone();
            s.coef_t.intercept = a;
            marginal(&s, |cell| cell.t == 1)
        })?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_c", self.p_c),
            ("p_x_given_c[0]", self.p_x_given_c[0]),
            ("p_x_given_c[1]", self.p_x_given_c[1]),
            ("p_u", self.p_u),
            ("p_h", self.p_h.unwrap_or(0.0)),
            ("coef_w.baseline", self.coef_w.baseline),
            ("coef_w.given_y1", self.coef_w.given_y1),
            ("coef_w.given_other", self.coef_w.given_other),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::InvalidSpec(format!("{name} = {p} is not a probability")));
            }
        }
        let coefs = [
            self.coef_y1.intercept,
            self.coef_y1.x,
            self.coef_y1.c,
            self.coef_y1.u,
            self.coef_y1.h,
            self.coef_y_other.intercept,
            self.coef_y_other.x,
            self.coef_y_other.c,
            self.coef_y_other.u,
            self.coef_t.intercept,
            self.coef_t.w,
            self.coef_t.x,
            self.coef_t.c,
            self.coef_t.wx,
            self.coef_t.h,
            self.coef_t.hx,
        ];
        if coefs.iter().any(|c| !c.is_finite()) {
            return Err(SimError::InvalidSpec("non-finite coefficient".into()));
        }
        let h_loads = self.coef_y1.h != 0.0 || self.coef_t.h != 0.0 || self.coef_t.hx != 0.0;
        match self.scenario_id {
            1 | 2 => {
                if self.p_h.is_some() || h_loads {
                    return Err(SimError::InvalidSpec(format!(
                        "scenario {} has no health-care-seeking variable",
                        self.scenario_id
                    )));
                }
                if self.scenario_id == 2 && (self.coef_y1.x - self.coef_y_other.x).abs() > 1e-12 {
                    return Err(SimError::InvalidSpec(
                        "scenario 2 needs equal X effects on both infections".into(),
                    ));
                }
            }
            3 => {
                if self.p_h.is_none() || self.coef_y1.h == 0.0 || (self.coef_t.h == 0.0 && self.coef_t.hx == 0.0) {
                    return Err(SimError::InvalidSpec(
                        "scenario 3 needs H with nonzero loadings on Y1 and T".into(),
                    ));
                }
            }
            other => return Err(SimError::InvalidSpec(format!("unknown scenario {other}"))),
        }
        Ok(())
    }

    pub fn has_hcsb(&self) -> bool {
        self.p_h.is_some()
    }

    pub fn infection_prob(&self, x: u8, c: u8, u: u8, h: u8) -> f64 {
        let k = &self.coef_y1;
        expit(k.intercept + k.x * x as f64 + k.c * c as f64 + k.u * u as f64 + k.h * h as f64)
    }

    pub fn other_infection_prob(&self, x: u8, c: u8, u: u8) -> f64 {
        let k = &self.coef_y_other;
        expit(k.intercept + k.x * x as f64 + k.c * c as f64 + k.u * u as f64)
    }

    pub fn testing_prob(&self, w: u8, x: u8, c: u8, h: u8) -> f64 {
        let k = &self.coef_t;
        let (w, x, c, h) = (w as f64, x as f64, c as f64, h as f64);
        expit(k.intercept + k.w * w + k.x * x + k.c * c + k.wx * w * x + k.h * h + k.hx * h * x)
    }
}

fn bisect<F: Fn(f64) -> f64>(what: &'static str, target: f64, f: F) -> Result<f64> {
    let (mut lo, mut hi) = (-40.0_f64, 20.0_f64);
    if !(f(lo) <= target && target <= f(hi)) {
        return Err(SimError::Calibration { what, target });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

// Exact enumeration ------------------------------------------------------

/// One point of the joint support with its probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointCell {
    pub c: u8,
    pub x: u8,
    pub u: u8,
    pub h: u8,
    pub y1: u8,
    pub y_other: u8,
    pub w: u8,
    pub t: u8,
    pub prob: f64,
}

fn bern(p: f64, v: u8) -> f64 {
    if v == 1 {
        p
    } else {
        1.0 - p
    }
}

/// Full joint distribution of (C, X, U, H, Y¹, other, W, T). H is fixed at 0
/// when the scenario has no HCSB variable.
pub fn enumerate_joint(spec: &ScenarioSpec) -> Vec<JointCell> {
    let hs: &[u8] = if spec.has_hcsb() { &[0, 1] } else { &[0] };
    let mut cells = Vec::with_capacity(256);
    for c in 0..2u8 {
        let pc = bern(spec.p_c, c);
        for x in 0..2u8 {
            let px = pc * bern(spec.p_x_given_c[c as usize], x);
            for u in 0..2u8 {
                let pu = px * bern(spec.p_u, u);
                for &h in hs {
                    let ph = pu * spec.p_h.map_or(1.0, |p| bern(p, h));
                    let p_inf = spec.infection_prob(x, c, u, h);
                    let p_oth = spec.other_infection_prob(x, c, u);
                    for y1 in 0..2u8 {
                        for y_other in 0..2u8 {
                            let py = ph * bern(p_inf, y1) * bern(p_oth, y_other);
                            let p_w = spec.coef_w.prob(y1, y_other);
                            for w in 0..2u8 {
                                let pw = py * bern(p_w, w);
                                let p_t = spec.testing_prob(w, x, c, h);
                                for t in 0..2u8 {
                                    cells.push(JointCell {
                                        c,
                                        x,
                                        u,
                                        h,
                                        y1,
                                        y_other,
                                        w,
                                        t,
                                        prob: pw * bern(p_t, t),
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cells
}

pub fn marginal<F: Fn(&JointCell) -> bool>(spec: &ScenarioSpec, event: F) -> f64 {
    enumerate_joint(spec).iter().filter(|c| event(c)).map(|c| c.prob).sum()
}

/// ML fit of y1 ~ 1 + x + c on (c, x) cells aggregated from `cells`
/// restricted to `keep`. Returns the X coefficient.
fn enumerated_x_coefficient<F: Fn(&JointCell) -> bool>(cells: &[JointCell], keep: F) -> Result<f64> {
    let mut mass = [[0.0_f64; 2]; 2];
    let mut infected = [[0.0_f64; 2]; 2];
    for cell in cells.iter().filter(|c| keep(c)) {
        mass[cell.c as usize][cell.x as usize] += cell.prob;
        if cell.y1 == 1 {
            infected[cell.c as usize][cell.x as usize] += cell.prob;
        }
    }
    let mut rows = Vec::new();
    let mut response = Vec::new();
    let mut weights = Vec::new();
    for c in 0..2 {
        for x in 0..2 {
            if mass[c][x] > 0.0 {
                rows.extend_from_slice(&[1.0, x as f64, c as f64]);
                response.push(infected[c][x] / mass[c][x]);
                weights.push(mass[c][x]);
            }
        }
    }
    if weights.is_empty() {
        return Err(SimError::EmptyStratum);
    }
    // Rescale to a million records so the score tolerance is not loose
    // relative to masses that sum to at most one.
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w *= 1e6 / total);
    let design = DesignMatrix::from_rows(weights.len(), xc_labels(), &rows)?;
    let fit = glm::fit_weighted_logistic(&design, &response, &weights)?;
    Ok(fit.coefficients[1])
}

pub(crate) fn xc_labels() -> Vec<String> {
    vec![INTERCEPT.to_string(), "x".to_string(), "c".to_string()]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProspectiveTruth {
    pub odds_ratio: f64,
    /// Set when U or H loads on Y¹ and the truth came from enumeration.
    pub non_collapsible: bool,
}

/// exp(β) of the prospective model logit Pr(Y¹ | X, C).
pub fn true_prospective_or(spec: &ScenarioSpec) -> Result<ProspectiveTruth> {
    spec.validate()?;
    if spec.coef_y1.u == 0.0 && (spec.coef_y1.h == 0.0 || !spec.has_hcsb()) {
        return Ok(ProspectiveTruth {
            odds_ratio: spec.coef_y1.x.exp(),
            non_collapsible: false,
        });
    }
    Ok(ProspectiveTruth {
        odds_ratio: enumerated_prospective_or(spec)?,
        non_collapsible: true,
    })
}

/// Population-limit ML fit of logit Pr(Y¹ | X, C) over the exact joint.
pub fn enumerated_prospective_or(spec: &ScenarioSpec) -> Result<f64> {
    Ok(enumerated_x_coefficient(&enumerate_joint(spec), |_| true)?.exp())
}

/// Population-limit symptom-conditional OR (fit among W = 1).
pub fn enumerated_relative_or(spec: &ScenarioSpec) -> Result<f64> {
    Ok(enumerated_x_coefficient(&enumerate_joint(spec), |c| c.w == 1)?.exp())
}

// Population generation ---------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub records: Vec<IndividualRecord>,
    pub spec: ScenarioSpec,
    pub seed: u64,
}

const BLOCK: usize = 1 << 14;

/// Uniform draws consumed per record, in generation order
/// C, X, U, H, Y¹, other, W, T.
pub const DRAWS_PER_RECORD: usize = 8;

/// One record from its eight uniforms.
pub fn draw_record(spec: &ScenarioSpec, draws: &[f64; DRAWS_PER_RECORD]) -> IndividualRecord {
    let c = (draws[0] < spec.p_c) as u8;
    let x = (draws[1] < spec.p_x_given_c[c as usize]) as u8;
    let u = (draws[2] < spec.p_u) as u8;
    let h = spec.p_h.map(|p| (draws[3] < p) as u8);
    let hv = h.unwrap_or(0);
    let y1 = (draws[4] < spec.infection_prob(x, c, u, hv)) as u8;
    let y_other = (draws[5] < spec.other_infection_prob(x, c, u)) as u8;
    let w = (draws[6] < spec.coef_w.prob(y1, y_other)) as u8;
    let mut rec = IndividualRecord {
        c,
        x,
        u,
        y1,
        y_other,
        w,
        h,
        t: 0,
    };
    rec.t = draw_testing(spec, &rec, draws[7]);
    rec
}

/// Testing draw from the record's (W, X, C, H) and its own uniform.
pub fn draw_testing(spec: &ScenarioSpec, rec: &IndividualRecord, uniform: f64) -> u8 {
    (uniform < spec.testing_prob(rec.w, rec.x, rec.c, rec.h.unwrap_or(0))) as u8
}

/// `n` independent records. Blocks of records use independent streams
/// keyed by (seed, block), so output is independent of thread count.
pub fn generate_population(spec: &ScenarioSpec, n: usize, seed: u64) -> Result<Population> {
    spec.validate()?;
    if n == 0 {
        return Err(SimError::EmptyPopulation);
    }
    let blocks = n.div_ceil(BLOCK);
    let chunks: Vec<Vec<IndividualRecord>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(seed, &[b as u64]);
            let len = BLOCK.min(n - b * BLOCK);
            let mut out = Vec::with_capacity(len);
            let mut draws = [0.0; DRAWS_PER_RECORD];
            for _ in 0..len {
                for d in draws.iter_mut() {
                    *d = rng.gen::<f64>();
                }
                out.push(draw_record(spec, &draws));
            }
            out
        })
        .collect();
    Ok(Population {
        records: chunks.concat(),
        spec: spec.clone(),
        seed,
    })
}

pub fn testing_prevalence(population: &Population) -> f64 {
    if population.records.is_empty() {
        return 0.0;
    }
    population.records.iter().filter(|r| r.t == 1).count() as f64 / population.records.len() as f64
}

/// exp(β*) from an ML fit of Y¹ ~ X + C among symptomatic members, using
/// complete data.
pub fn true_relative_or(population: &Population) -> Result<f64> {
    let mut count = [[0.0_f64; 2]; 2];
    let mut infected = [[0.0_f64; 2]; 2];
    for r in population.records.iter().filter(|r| r.w == 1) {
        count[r.c as usize][r.x as usize] += 1.0;
        infected[r.c as usize][r.x as usize] += r.y1 as f64;
    }
    let mut rows = Vec::new();
    let mut response = Vec::new();
    let mut weights = Vec::new();
    for c in 0..2 {
        for x in 0..2 {
            if count[c][x] > 0.0 {
                rows.extend_from_slice(&[1.0, x as f64, c as f64]);
                response.push(infected[c][x] / count[c][x]);
                weights.push(count[c][x]);
            }
        }
    }
    if weights.is_empty() {
        return Err(SimError::EmptyStratum);
    }
    // Rescale to a million records so the score tolerance is not loose
    // relative to masses that sum to at most one.
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w *= 1e6 / total);
    let design = DesignMatrix::from_rows(weights.len(), xc_labels(), &rows)?;
    let fit = glm::fit_weighted_logistic(&design, &response, &weights)?;
    Ok(fit.coefficients[1].exp())
}
