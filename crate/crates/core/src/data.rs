//! Records, study samples and the formula → design-matrix builder.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glm::{DesignMatrix, GlmError, INTERCEPT};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("y1 is masked for untested record {row}")]
    MaskedOutcome { row: usize },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("variable `{var}` is absent for record {row}")]
    MissingValue { var: Variable, row: usize },
    #[error("duplicate term `{0}` in formula")]
    DuplicateTerm(String),
    #[error("malformed formula `{0}`")]
    MalformedFormula(String),
    #[error("invalid record on line {line}: {reason}")]
    InvalidRecord { line: usize, reason: String },
    #[error(transparent)]
    Design(#[from] GlmError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One simulated person with every variable known (O* plus the latent and
/// unmeasured nodes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IndividualRecord {
    pub c: u8,
    pub x: u8,
    /// Latent common cause of both infections (unmeasured).
    pub u: u8,
    pub y1: u8,
    /// Other (non-target) infection, unmeasured.
    pub y_other: u8,
    pub w: u8,
    /// Health-care-seeking behaviour; only generated in Scenario 3.
    pub h: Option<u8>,
    pub t: u8,
}

impl IndividualRecord {
    /// Observed-data view: y1 is kept only for tested records.
    pub fn observe(&self, id: usize) -> ObservedRecord {
        ObservedRecord {
            id,
            c: self.c,
            x: self.x,
            u: self.u,
            y1: (self.t == 1).then_some(self.y1),
            y_other: self.y_other,
            w: self.w,
            h: self.h,
            t: self.t,
        }
    }
}

/// Masked record as it appears in a study sample. `id` is the source index
/// in the population (or the row number for imported files).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ObservedRecord {
    pub id: usize,
    pub c: u8,
    pub x: u8,
    pub u: u8,
    y1: Option<u8>,
    pub y_other: u8,
    pub w: u8,
    pub h: Option<u8>,
    pub t: u8,
}

impl ObservedRecord {
    /// Infection status; reading it from an untested record is an error.
    pub fn y1(&self) -> Result<u8> {
        self.y1.ok_or(DataError::MaskedOutcome { row: self.id })
    }

    pub fn y1_observed(&self) -> Option<u8> {
        self.y1
    }

    pub fn is_tested(&self) -> bool {
        self.t == 1
    }

    pub fn value(&self, var: Variable) -> Result<u8> {
        Ok(match var {
            Variable::C => self.c,
            Variable::X => self.x,
            Variable::U => self.u,
            Variable::Y1 => self.y1()?,
            Variable::YOther => self.y_other,
            Variable::W => self.w,
            Variable::H => self.h.ok_or(DataError::MissingValue { var, row: self.id })?,
            Variable::T => self.t,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignTag {
    AllTestedPlusControls,
    ProperTnd,
    ProperTndPlusControls,
    TestedOnly,
}

impl DesignTag {
    /// Classify a record set by content.
    pub fn infer(records: &[ObservedRecord]) -> Self {
        let has_controls = records.iter().any(|r| r.t == 0);
        let symptomatic_tested = records.iter().filter(|r| r.t == 1).all(|r| r.w == 1);
        match (has_controls, symptomatic_tested) {
            (true, true) => DesignTag::ProperTndPlusControls,
            (true, false) => DesignTag::AllTestedPlusControls,
            (false, true) => DesignTag::ProperTnd,
            (false, false) => DesignTag::TestedOnly,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DesignTag::AllTestedPlusControls => "all-tested-plus-controls",
            DesignTag::ProperTnd => "proper-tnd",
            DesignTag::ProperTndPlusControls => "proper-tnd-plus-controls",
            DesignTag::TestedOnly => "tested-only",
        }
    }
}

impl fmt::Display for DesignTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudySample {
    pub records: Vec<ObservedRecord>,
    pub design_tag: DesignTag,
    pub n_tested: usize,
    pub n_controls: usize,
    /// Testing prevalence assumed when weighting the control stratum.
    pub q0_assumed: Option<f64>,
}

impl StudySample {
    pub fn new(records: Vec<ObservedRecord>, design_tag: DesignTag, q0_assumed: Option<f64>) -> Self {
        let n_tested = records.iter().filter(|r| r.t == 1).count();
        let n_controls = records.len() - n_tested;
        Self {
            records,
            design_tag,
            n_tested,
            n_controls,
            q0_assumed,
        }
    }

    /// Sample whose design tag is inferred from its records.
    pub fn from_records(records: Vec<ObservedRecord>, q0_assumed: Option<f64>) -> Self {
        let tag = DesignTag::infer(&records);
        Self::new(records, tag, q0_assumed)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn tested(&self) -> impl Iterator<Item = &ObservedRecord> {
        self.records.iter().filter(|r| r.t == 1)
    }

    pub fn controls(&self) -> impl Iterator<Item = &ObservedRecord> {
        self.records.iter().filter(|r| r.t == 0)
    }
}

/// Records satisfying `predicate`, with counts and design tag recomputed.
pub fn subset<F>(sample: &StudySample, predicate: F) -> StudySample
where
    F: Fn(&ObservedRecord) -> bool,
{
    let records: Vec<ObservedRecord> = sample.records.iter().filter(|r| predicate(r)).copied().collect();
    StudySample::from_records(records, sample.q0_assumed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    C,
    X,
    U,
    Y1,
    YOther,
    W,
    H,
    T,
}

impl Variable {
    pub fn name(&self) -> &'static str {
        match self {
            Variable::C => "c",
            Variable::X => "x",
            Variable::U => "u",
            Variable::Y1 => "y1",
            Variable::YOther => "y_other",
            Variable::W => "w",
            Variable::H => "h",
            Variable::T => "t",
        }
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variable {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "c" => Variable::C,
            "x" => Variable::X,
            "u" => Variable::U,
            "y1" => Variable::Y1,
            "y_other" => Variable::YOther,
            "w" => Variable::W,
            "h" => Variable::H,
            "t" => Variable::T,
            other => return Err(DataError::UnknownVariable(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Term {
    Main(Variable),
    Product(Variable, Variable),
}

impl Term {
    pub fn label(&self) -> String {
        match self {
            Term::Main(v) => v.name().to_string(),
            Term::Product(a, b) => format!("{a}:{b}"),
        }
    }

    fn same_as(&self, other: &Term) -> bool {
        match (self, other) {
            (Term::Main(a), Term::Main(b)) => a == b,
            (Term::Product(a, b), Term::Product(c, d)) => (a == c && b == d) || (a == d && b == c),
            _ => false,
        }
    }

    fn eval(&self, r: &ObservedRecord) -> Result<f64> {
        Ok(match self {
            Term::Main(v) => r.value(*v)? as f64,
            Term::Product(a, b) => (r.value(*a)? * r.value(*b)?) as f64,
        })
    }
}

/// Outcome plus an ordered list of main-effect and pairwise-product terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Formula {
    pub outcome: Variable,
    terms: Vec<Term>,
    pub include_intercept: bool,
}

impl Formula {
    pub fn new(outcome: Variable, terms: Vec<Term>, include_intercept: bool) -> Result<Self> {
        for (i, t) in terms.iter().enumerate() {
            if terms[..i].iter().any(|s| s.same_as(t)) {
                return Err(DataError::DuplicateTerm(t.label()));
            }
        }
        if terms.is_empty() && !include_intercept {
            return Err(DataError::MalformedFormula("no terms".into()));
        }
        Ok(Self {
            outcome,
            terms,
            include_intercept,
        })
    }

    /// Parse `"y1 ~ x + c + w + w:x"`. A `- 1` term drops the intercept.
    pub fn parse(text: &str) -> Result<Self> {
        let (lhs, rhs) = text
            .split_once('~')
            .ok_or_else(|| DataError::MalformedFormula(text.to_string()))?;
        let outcome: Variable = lhs.parse()?;
        let mut include_intercept = true;
        let mut terms = Vec::new();
        let rhs = rhs.replace("- 1", "+ -1").replace("-1", "+ -1");
        for piece in rhs.split('+').map(str::trim).filter(|p| !p.is_empty()) {
            match piece {
                "1" => include_intercept = true,
                "-1" | "0" => include_intercept = false,
                _ => match piece.split_once(':') {
                    Some((a, b)) => terms.push(Term::Product(a.parse()?, b.parse()?)),
                    None => terms.push(Term::Main(piece.parse()?)),
                },
            }
        }
        Self::new(outcome, terms, include_intercept)
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn column_labels(&self) -> Vec<String> {
        let mut labels = Vec::with_capacity(self.terms.len() + 1);
        if self.include_intercept {
            labels.push(INTERCEPT.to_string());
        }
        labels.extend(self.terms.iter().map(Term::label));
        labels
    }

    pub fn uses(&self, var: Variable) -> bool {
        self.terms.iter().any(|t| match t {
            Term::Main(v) => *v == var,
            Term::Product(a, b) => *a == var || *b == var,
        })
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut rhs: Vec<String> = self.terms.iter().map(Term::label).collect();
        if !self.include_intercept {
            rhs.push("-1".into());
        }
        if rhs.is_empty() {
            rhs.push("1".into());
        }
        write!(f, "{} ~ {}", self.outcome, rhs.join(" + "))
    }
}

/// Design rows only (no outcome), for prediction.
pub fn build_regressors(records: &[ObservedRecord], formula: &Formula) -> Result<DesignMatrix> {
    let labels = formula.column_labels();
    let mut data = Vec::with_capacity(records.len() * labels.len());
    for r in records {
        if formula.include_intercept {
            data.push(1.0);
        }
        for term in formula.terms() {
            data.push(term.eval(r)?);
        }
    }
    Ok(DesignMatrix::from_rows(records.len(), labels, &data)?)
}

/// One design row per record (intercept first, then terms in order) and the
/// outcome column.
pub fn build_design(sample: &StudySample, formula: &Formula) -> Result<(DesignMatrix, Vec<f64>)> {
    let response = sample
        .records
        .iter()
        .map(|r| r.value(formula.outcome).map(f64::from))
        .collect::<Result<Vec<f64>>>()?;
    let design = build_regressors(&sample.records, formula)?;
    Ok((design, response))
}

// CSV --------------------------------------------------------------------

pub const CSV_HEADER: [&str; 8] = ["c", "x", "u", "y1", "y_other", "w", "h", "t"];

fn opt(v: Option<u8>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn write_rows<W: Write, I>(out: W, rows: I) -> Result<()>
where
    I: IntoIterator<Item = [String; 8]>,
{
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(CSV_HEADER)?;
    for row in rows {
        writer.write_record(&row)?;
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Complete records (y1 always written).
pub fn write_population_csv<W: Write>(out: W, records: &[IndividualRecord]) -> Result<()> {
    write_rows(
        out,
        records.iter().map(|r| {
            [
                r.c.to_string(),
                r.x.to_string(),
                r.u.to_string(),
                r.y1.to_string(),
                r.y_other.to_string(),
                r.w.to_string(),
                opt(r.h),
                r.t.to_string(),
            ]
        }),
    )
}

/// Masked records; untested y1 is an empty field.
pub fn write_sample_csv<W: Write>(out: W, sample: &StudySample) -> Result<()> {
    write_rows(
        out,
        sample.records.iter().map(|r| {
            [
                r.c.to_string(),
                r.x.to_string(),
                r.u.to_string(),
                opt(r.y1),
                r.y_other.to_string(),
                r.w.to_string(),
                opt(r.h),
                r.t.to_string(),
            ]
        }),
    )
}

fn parse_bit(field: &str, name: &str, line: usize) -> Result<u8> {
    match field.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(DataError::InvalidRecord {
            line,
            reason: format!("{name} = `{other}` is not 0/1"),
        }),
    }
}

fn parse_opt_bit(field: &str, name: &str, line: usize) -> Result<Option<u8>> {
    if field.trim().is_empty() {
        Ok(None)
    } else {
        parse_bit(field, name, line).map(Some)
    }
}

/// Read a sample file. A tested row must carry y1; an untested row's y1 is
/// dropped even if present.
pub fn read_sample_csv<R: Read>(input: R, q0_assumed: Option<f64>) -> Result<StudySample> {
    let mut reader = csv::Reader::from_reader(input);
    let header = reader.headers()?.clone();
    let idx = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::UnknownVariable(format!("missing column {name}")))
    };
    let cols: Vec<usize> = CSV_HEADER.iter().map(|n| idx(n)).collect::<Result<_>>()?;
    let mut records = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let f = |k: usize| rec.get(cols[k]).unwrap_or("");
        let t = parse_bit(f(7), "t", line)?;
        let y1 = parse_opt_bit(f(3), "y1", line)?;
        if t == 1 && y1.is_none() {
            return Err(DataError::InvalidRecord {
                line,
                reason: "tested record without y1".into(),
            });
        }
        let full = IndividualRecord {
            c: parse_bit(f(0), "c", line)?,
            x: parse_bit(f(1), "x", line)?,
            u: parse_bit(f(2), "u", line)?,
            y1: y1.unwrap_or(0),
            y_other: parse_bit(f(4), "y_other", line)?,
            w: parse_bit(f(5), "w", line)?,
            h: parse_opt_bit(f(6), "h", line)?,
            t,
        };
        records.push(full.observe(row));
    }
    Ok(StudySample::from_records(records, q0_assumed))
}
