//! Recruitment designs and the stratified (tested / untested) bootstrap.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use thiserror::Error;

use crate::data::{DesignTag, ObservedRecord, StudySample};
use crate::rng;
use crate::simulator::{testing_prevalence, Population};

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("{stratum} stratum has {available} members, {requested} requested")]
    InsufficientStratum {
        stratum: &'static str,
        available: usize,
        requested: usize,
    },
    #[error("cannot resample an empty sample")]
    EmptySample,
}

pub type Result<T> = std::result::Result<T, SamplingError>;

/// Simple random sample without replacement of `k` indices from `pool`.
fn srs<R: Rng>(pool: &[usize], k: usize, stratum: &'static str, rng: &mut R) -> Result<Vec<usize>> {
    if k > pool.len() {
        return Err(SamplingError::InsufficientStratum {
            stratum,
            available: pool.len(),
            requested: k,
        });
    }
    Ok(index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect())
}

fn observe(population: &Population, ids: &[usize]) -> Vec<ObservedRecord> {
    ids.iter().map(|&i| population.records[i].observe(i)).collect()
}

fn untested_pool(population: &Population) -> Vec<usize> {
    population
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.t == 0)
        .map(|(i, _)| i)
        .collect()
}

/// `n_tested` tested members plus `n_controls` untested population controls.
/// The assumed testing prevalence is the population's realised one.
pub fn sample_case_control(
    population: &Population,
    n_tested: usize,
    n_controls: usize,
    seed: u64,
) -> Result<StudySample> {
    let tested: Vec<usize> = population
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.t == 1)
        .map(|(i, _)| i)
        .collect();
    let mut rng = rng::stream(seed, &[0]);
    let mut ids = srs(&tested, n_tested, "tested", &mut rng)?;
    ids.extend(srs(&untested_pool(population), n_controls, "untested", &mut rng)?);
    let tag = if n_controls == 0 {
        DesignTag::TestedOnly
    } else {
        DesignTag::AllTestedPlusControls
    };
    Ok(StudySample::new(
        observe(population, &ids),
        tag,
        Some(testing_prevalence(population)),
    ))
}

/// `n` tested symptomatic members, optionally with `with_controls` untested
/// population controls.
pub fn sample_proper_tnd(
    population: &Population,
    n: usize,
    with_controls: usize,
    seed: u64,
) -> Result<StudySample> {
    let eligible: Vec<usize> = population
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.t == 1 && r.w == 1)
        .map(|(i, _)| i)
        .collect();
    let mut rng = rng::stream(seed, &[1]);
    let mut ids = srs(&eligible, n, "tested symptomatic", &mut rng)?;
    ids.extend(srs(&untested_pool(population), with_controls, "untested", &mut rng)?);
    let tag = if with_controls == 0 {
        DesignTag::ProperTnd
    } else {
        DesignTag::ProperTndPlusControls
    };
    Ok(StudySample::new(
        observe(population, &ids),
        tag,
        Some(testing_prevalence(population)),
    ))
}

/// Resample with replacement separately within the tested and the
/// untested strata, preserving both stratum sizes.
pub fn bootstrap_resample(sample: &StudySample, seed: u64) -> Result<StudySample> {
    if sample.is_empty() {
        return Err(SamplingError::EmptySample);
    }
    let mut rng = rng::stream(seed, &[2]);
    let tested: Vec<&ObservedRecord> = sample.tested().collect();
    let controls: Vec<&ObservedRecord> = sample.controls().collect();
    let mut records = Vec::with_capacity(sample.len());
    for stratum in [&tested, &controls] {
        for _ in 0..stratum.len() {
            records.push(**stratum.choose(&mut rng).expect("non-empty stratum"));
        }
    }
    Ok(StudySample {
        records,
        design_tag: sample.design_tag,
        n_tested: tested.len(),
        n_controls: controls.len(),
        q0_assumed: sample.q0_assumed,
    })
}
