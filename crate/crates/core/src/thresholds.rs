//! Per-race decision thresholds: score histograms, accuracy-maximizing
//! threshold search and evaluation under a per-race plan.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{evaluate, EvalOptions, FairnessReport, MetricError};
use crate::records::{predicts_fake, Cohort, PredictionRecord, Thresholds};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ThresholdError {
    #[error("threshold search needs both real and fake records (got {positives} fake, {negatives} real)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("threshold plan has no entry for race `{0}`")]
    MissingRace(String),
    #[error("threshold {value} for race `{race}` is outside [0, 1]")]
    OutOfRange { race: String, value: f64 },
    #[error("histogram needs at least one bin")]
    ZeroBins,
    #[error("invalid threshold plan: {0}")]
    Parse(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Accuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub race: String,
    pub threshold: f64,
    pub accuracy: f64,
}

/// Outcome of a single-race search.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSearch {
    pub threshold: f64,
    pub accuracy: f64,
    /// Every evaluated candidate as (threshold, accuracy), ascending.
    pub trace: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdPlan {
    pub per_race: BTreeMap<String, f64>,
    pub objective: Objective,
    pub search_trace: Vec<TracePoint>,
}

impl ThresholdPlan {
    /// A plan with the given thresholds and no search history.
    pub fn fixed(per_race: BTreeMap<String, f64>) -> Result<Self, ThresholdError> {
        for (race, &value) in &per_race {
            if !(0.0..=1.0).contains(&value) {
                return Err(ThresholdError::OutOfRange {
                    race: race.clone(),
                    value,
                });
            }
        }
        Ok(Self {
            per_race,
            objective: Objective::Accuracy,
            search_trace: Vec::new(),
        })
    }

    /// On-disk form: a flat `{race: threshold}` object.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.per_race).expect("map of floats serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ThresholdError> {
        let per_race: BTreeMap<String, f64> =
            serde_json::from_str(text).map_err(|e| ThresholdError::Parse(e.to_string()))?;
        Self::fixed(per_race)
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds::PerRace(self.per_race.clone())
    }
}

/// Candidate thresholds: 0, midpoints between adjacent distinct scores, 1.
pub fn candidate_thresholds(sorted_distinct: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(sorted_distinct.len() + 1);
    out.push(0.0);
    for w in sorted_distinct.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        // keep the midpoint strictly above the lower score
        out.push(if mid > w[0] { mid } else { w[1] });
    }
    out.push(1.0);
    out.dedup();
    out
}

/// Exhaustive accuracy-maximizing threshold over the candidate set.
///
/// Ties resolve toward the smallest candidate.
pub fn optimal_threshold<'a, I>(records: I) -> Result<ThresholdSearch, ThresholdError>
where
    I: IntoIterator<Item = &'a PredictionRecord>,
{
    let mut scored: Vec<(f64, bool)> = records.into_iter().map(|r| (r.score, r.label == 1)).collect();
    let positives = scored.iter().filter(|(_, fake)| *fake).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(ThresholdError::SingleClass {
            positives,
            negatives,
        });
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut distinct: Vec<f64> = scored.iter().map(|(s, _)| *s).collect();
    distinct.dedup();
    let candidates = candidate_thresholds(&distinct);

    // Sweep: `below` records have score < candidate and are predicted real.
    let n = scored.len() as f64;
    let mut below = 0;
    let mut neg_below = 0usize;
    let mut pos_below = 0usize;
    let mut trace = Vec::with_capacity(candidates.len());
    let mut best: Option<(f64, usize)> = None;
    for &t in &candidates {
        while below < scored.len() && !predicts_fake(scored[below].0, t) {
            if scored[below].1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            below += 1;
        }
        let correct = neg_below + (positives - pos_below);
        trace.push((t, correct as f64 / n));
        if best.map_or(true, |(_, c)| correct > c) {
            best = Some((t, correct));
        }
    }
    let (threshold, correct) = best.expect("candidate set is never empty");
    Ok(ThresholdSearch {
        threshold,
        accuracy: correct as f64 / n,
        trace,
    })
}

/// Runs [`optimal_threshold`] independently for every race of the cohort.
pub fn plan_thresholds(cohort: &Cohort) -> Result<ThresholdPlan, ThresholdError> {
    let searches: Vec<(String, ThresholdSearch)> = cohort
        .races()
        .par_iter()
        .map(|race| optimal_threshold(cohort.race_records(race)).map(|s| (race.clone(), s)))
        .collect::<Result<_, _>>()?;
    let mut per_race = BTreeMap::new();
    let mut search_trace = Vec::new();
    for (race, search) in searches {
        per_race.insert(race.clone(), search.threshold);
        search_trace.extend(search.trace.into_iter().map(|(threshold, accuracy)| TracePoint {
            race: race.clone(),
            threshold,
            accuracy,
        }));
    }
    Ok(ThresholdPlan {
        per_race,
        objective: Objective::Accuracy,
        search_trace,
    })
}

/// Equal-width bins over [0, 1]; a score of exactly 1 falls into the last bin.
pub fn score_histogram(cohort: &Cohort, bins: usize) -> Result<BTreeMap<String, Vec<u64>>, ThresholdError> {
    if bins == 0 {
        return Err(ThresholdError::ZeroBins);
    }
    let mut out: BTreeMap<String, Vec<u64>> = cohort
        .races()
        .iter()
        .map(|r| (r.clone(), vec![0; bins]))
        .collect();
    for r in cohort.records() {
        let bin = ((r.score * bins as f64) as usize).min(bins - 1);
        out.get_mut(&r.race).expect("race registered")[bin] += 1;
    }
    Ok(out)
}

/// Evaluates with each record thresholded at its race's plan entry.
pub fn evaluate_with_plan(
    cohort: &Cohort,
    plan: &ThresholdPlan,
    opts: &EvalOptions,
) -> Result<FairnessReport, ThresholdError> {
    if let Some(missing) = cohort.races().iter().find(|r| !plan.per_race.contains_key(*r)) {
        return Err(ThresholdError::MissingRace(missing.clone()));
    }
    Ok(evaluate(cohort, &plan.thresholds(), opts)?)
}

/// Accuracy of one race's records at a fixed threshold.
pub fn accuracy_at<'a, I>(records: I, threshold: f64) -> Option<f64>
where
    I: IntoIterator<Item = &'a PredictionRecord>,
{
    let (mut n, mut correct) = (0usize, 0usize);
    for r in records {
        n += 1;
        if predicts_fake(r.score, threshold) == (r.label == 1) {
            correct += 1;
        }
    }
    (n > 0).then(|| correct as f64 / n as f64)
}
