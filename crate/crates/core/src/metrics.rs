//! Naive, approach-averaged and utility-regularized fairness metrics.
//!
//! All three families are built from per-race conditional rates taken from a
//! [`CellTable`]. The naive family pools every forgery approach together;
//! the approach-averaged (AA) family computes each gap inside one approach
//! and averages across approaches; the utility-regularized (UR) family
//! divides every per-approach term by that approach's accuracy before
//! averaging.
//!
//! Per-approach terms for approach `f`:
//!
//! * `gap(f)`: max − min over races of P(Ŷ=1 | S=s, F=f). On `RealFace`
//!   this is the false-positive-rate gap, on a forgery approach the
//!   true-positive-rate gap.
//! * `std_acc(f)`: population standard deviation of per-race accuracy.
//! * `ACC_f`: unweighted mean of per-race accuracy.
//!
//! Aggregates: `aadpd` averages `gap` over every approach (RealFace
//! included), `aadeo` over forgery approaches only, `aadeodds` is
//! ½(gap(RealFace) + aadeo), `aastd` averages `std_acc` over every approach.
//! UR replaces each term `t(f)` with `t(f) / ACC_f`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::{group_cells_with, CellTable, Cohort, Thresholds, REAL_FACE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("a pairwise gap needs at least two races, got {found}")]
    TooFewRaces { found: usize },
    #[error("degenerate cohort: race `{race}` has no records in stratum `{stratum}`")]
    DegenerateCohort { race: String, stratum: String },
    #[error("degenerate cohort: only {found} race(s) left in stratum `{stratum}` after dropping empty cells")]
    TooFewRacesInStratum { stratum: String, found: usize },
    #[error("cohort has no {0} records")]
    MissingStratum(&'static str),
    #[error("degenerate utility: accuracy of approach `{approach}` is zero")]
    DegenerateUtility { approach: String },
    #[error("AUC needs at least one positive and one negative record")]
    SingleClass,
    #[error("empty cohort")]
    EmptyCohort,
    #[error("threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("threshold plan has no entry for race `{0}`")]
    MissingThreshold(String),
    #[error("non-finite value for race `{0}`")]
    NonFinite(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalOptions {
    /// Drop races with empty cells from the affected gap instead of failing.
    pub skip_missing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NaiveMetrics {
    pub dpd: f64,
    pub deodds: f64,
    pub deo: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproachAveragedMetrics {
    pub aadpd: f64,
    pub aadeodds: f64,
    pub aadeo: f64,
    pub aastd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityRegularizedMetrics {
    pub urdpd: f64,
    pub urdeodds: f64,
    pub urdeo: f64,
    pub urstd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Utility {
    pub auc: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproachStats {
    pub gap_pos: f64,
    pub acc: f64,
    pub std_acc: f64,
}

/// Threshold(s) a report was computed at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThresholdUsed {
    Global(f64),
    PerRace(BTreeMap<String, f64>),
}

impl From<&Thresholds> for ThresholdUsed {
    fn from(t: &Thresholds) -> Self {
        match t {
            Thresholds::Global(v) => ThresholdUsed::Global(*v),
            Thresholds::PerRace(m) => ThresholdUsed::PerRace(m.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub naive: NaiveMetrics,
    pub approach_averaged: ApproachAveragedMetrics,
    pub utility_regularized: UtilityRegularizedMetrics,
    pub utility: Utility,
    pub per_approach: BTreeMap<String, ApproachStats>,
    pub threshold_used: ThresholdUsed,
}

impl FairnessReport {
    /// The twelve fairness values followed by AUC and ACC, in table order.
    pub fn metric_values(&self) -> [(&'static str, f64); 14] {
        let n = &self.naive;
        let a = &self.approach_averaged;
        let u = &self.utility_regularized;
        [
            ("dpd", n.dpd),
            ("deodds", n.deodds),
            ("deo", n.deo),
            ("std", n.std),
            ("aadpd", a.aadpd),
            ("aadeodds", a.aadeodds),
            ("aadeo", a.aadeo),
            ("aastd", a.aastd),
            ("urdpd", u.urdpd),
            ("urdeodds", u.urdeodds),
            ("urdeo", u.urdeo),
            ("urstd", u.urstd),
            ("auc", self.utility.auc),
            ("acc", self.utility.acc),
        ]
    }
}

/// max − min over races. Needs at least two races.
pub fn pairwise_gap(values: &BTreeMap<String, f64>) -> Result<f64, MetricError> {
    if let Some((race, _)) = values.iter().find(|(_, v)| !v.is_finite()) {
        return Err(MetricError::NonFinite(race.clone()));
    }
    let v: Vec<f64> = values.values().copied().collect();
    gap(&v).ok_or(MetricError::TooFewRaces { found: v.len() })
}

pub(crate) fn gap(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    Some(hi - lo)
}

/// Population standard deviation (divides by N). Exactly zero for constant input.
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (k, &x) in values.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
    }
    (m2 / values.len() as f64).max(0.0).sqrt()
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn check_thresholds(cohort: &Cohort, thresholds: &Thresholds) -> Result<(), MetricError> {
    let check = |t: f64| {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(MetricError::InvalidThreshold(t))
        }
    };
    match thresholds {
        Thresholds::Global(t) => check(*t),
        Thresholds::PerRace(map) => {
            for race in cohort.races() {
                check(*map.get(race).ok_or_else(|| MetricError::MissingThreshold(race.clone()))?)?;
            }
            Ok(())
        }
    }
}

fn cells(cohort: &Cohort, thresholds: &Thresholds) -> Result<CellTable, MetricError> {
    if cohort.is_empty() {
        return Err(MetricError::EmptyCohort);
    }
    check_thresholds(cohort, thresholds)?;
    group_cells_with(cohort, thresholds).map_err(MetricError::MissingThreshold)
}

/// Collects one value per race, treating `None` as an empty cell.
fn per_race_values(
    table: &CellTable,
    stratum: &str,
    opts: &EvalOptions,
    value: impl Fn(usize) -> Option<f64>,
) -> Result<Vec<f64>, MetricError> {
    let mut out = Vec::with_capacity(table.races().len());
    for (s, race) in table.races().iter().enumerate() {
        match value(s) {
            Some(v) => out.push(v),
            None if opts.skip_missing => {
                log::warn!("dropping race `{race}` from stratum `{stratum}`: empty cell");
            }
            None => {
                return Err(MetricError::DegenerateCohort {
                    race: race.clone(),
                    stratum: stratum.to_string(),
                })
            }
        }
    }
    if out.len() < 2 {
        return Err(MetricError::TooFewRacesInStratum {
            stratum: stratum.to_string(),
            found: out.len(),
        });
    }
    Ok(out)
}

fn require_strata(table: &CellTable) -> Result<(), MetricError> {
    if !table.approaches().iter().any(|a| a == REAL_FACE) {
        return Err(MetricError::MissingStratum("RealFace"));
    }
    if !table.approaches().iter().any(|a| a != REAL_FACE) {
        return Err(MetricError::MissingStratum("forgery"));
    }
    Ok(())
}

pub fn naive_from_cells(table: &CellTable, opts: &EvalOptions) -> Result<NaiveMetrics, MetricError> {
    require_strata(table)?;
    let all = |_: &str| true;
    let fake = |a: &str| a != REAL_FACE;
    let real = |a: &str| a == REAL_FACE;

    let pos_rate = per_race_values(table, "all", opts, |s| table.pooled(s, all).positive_rate())?;
    let accs = per_race_values(table, "all", opts, |s| table.pooled(s, all).accuracy())?;
    let tpr = per_race_values(table, "forgery", opts, |s| table.pooled(s, fake).positive_rate())?;
    let fpr = per_race_values(table, REAL_FACE, opts, |s| table.pooled(s, real).positive_rate())?;

    let tpr_gap = gap(&tpr).expect("checked");
    Ok(NaiveMetrics {
        dpd: gap(&pos_rate).expect("checked"),
        deodds: 0.5 * (gap(&fpr).expect("checked") + tpr_gap),
        deo: tpr_gap,
        std: population_std(&accs),
    })
}

#[derive(Debug, Clone, PartialEq)]
struct ApproachTerm {
    name: String,
    real: bool,
    stats: ApproachStats,
}

fn approach_terms(table: &CellTable, opts: &EvalOptions) -> Result<Vec<ApproachTerm>, MetricError> {
    require_strata(table)?;
    table
        .approaches()
        .iter()
        .enumerate()
        .map(|(f, name)| {
            let rates = per_race_values(table, name, opts, |s| table.cell_at(s, f).positive_rate())?;
            let accs = per_race_values(table, name, opts, |s| table.cell_at(s, f).accuracy())?;
            Ok(ApproachTerm {
                name: name.clone(),
                real: name == REAL_FACE,
                stats: ApproachStats {
                    gap_pos: gap(&rates).expect("checked"),
                    acc: mean(&accs),
                    std_acc: population_std(&accs),
                },
            })
        })
        .collect()
}

/// Shared aggregation for the AA and UR families; `scale` maps a term to its divisor.
fn aggregate(terms: &[ApproachTerm], scale: impl Fn(&ApproachTerm) -> f64) -> [f64; 4] {
    let gaps: Vec<f64> = terms.iter().map(|t| t.stats.gap_pos / scale(t)).collect();
    let fake_gaps: Vec<f64> = terms
        .iter()
        .zip(&gaps)
        .filter(|(t, _)| !t.real)
        .map(|(_, g)| *g)
        .collect();
    let real_gap = terms
        .iter()
        .zip(&gaps)
        .find(|(t, _)| t.real)
        .map(|(_, g)| *g)
        .expect("RealFace stratum checked");
    let stds: Vec<f64> = terms.iter().map(|t| t.stats.std_acc / scale(t)).collect();
    let eo = mean(&fake_gaps);
    [mean(&gaps), 0.5 * (real_gap + eo), eo, mean(&stds)]
}

fn aa_from_terms(terms: &[ApproachTerm]) -> ApproachAveragedMetrics {
    let [aadpd, aadeodds, aadeo, aastd] = aggregate(terms, |_| 1.0);
    ApproachAveragedMetrics {
        aadpd,
        aadeodds,
        aadeo,
        aastd,
    }
}

fn ur_from_terms(terms: &[ApproachTerm]) -> Result<UtilityRegularizedMetrics, MetricError> {
    if let Some(t) = terms.iter().find(|t| t.stats.acc <= 0.0) {
        return Err(MetricError::DegenerateUtility {
            approach: t.name.clone(),
        });
    }
    let [urdpd, urdeodds, urdeo, urstd] = aggregate(terms, |t| t.stats.acc);
    Ok(UtilityRegularizedMetrics {
        urdpd,
        urdeodds,
        urdeo,
        urstd,
    })
}

pub fn approach_averaged_from_cells(
    table: &CellTable,
    opts: &EvalOptions,
) -> Result<ApproachAveragedMetrics, MetricError> {
    Ok(aa_from_terms(&approach_terms(table, opts)?))
}

pub fn utility_regularized_from_cells(
    table: &CellTable,
    opts: &EvalOptions,
) -> Result<UtilityRegularizedMetrics, MetricError> {
    ur_from_terms(&approach_terms(table, opts)?)
}

pub fn naive_metrics(
    cohort: &Cohort,
    thresholds: &Thresholds,
    opts: &EvalOptions,
) -> Result<NaiveMetrics, MetricError> {
    naive_from_cells(&cells(cohort, thresholds)?, opts)
}

pub fn approach_averaged_metrics(
    cohort: &Cohort,
    thresholds: &Thresholds,
    opts: &EvalOptions,
) -> Result<ApproachAveragedMetrics, MetricError> {
    approach_averaged_from_cells(&cells(cohort, thresholds)?, opts)
}

pub fn utility_regularized_metrics(
    cohort: &Cohort,
    thresholds: &Thresholds,
    opts: &EvalOptions,
) -> Result<UtilityRegularizedMetrics, MetricError> {
    utility_regularized_from_cells(&cells(cohort, thresholds)?, opts)
}

/// Mann–Whitney AUC over raw score slices: P(pos > neg) + ½·P(tie).
pub fn auc_scores(positives: &[f64], negatives: &[f64]) -> Option<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // twice the U statistic stays integral with ties
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut pos_g, mut neg_g) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                pos_g += 1;
            } else {
                neg_g += 1;
            }
            j += 1;
        }
        twice_u += pos_g * (2 * neg_below + neg_g);
        neg_below += neg_g;
        i = j;
    }
    let pairs = 2 * positives.len() as u128 * negatives.len() as u128;
    Some(twice_u as f64 / pairs as f64)
}

/// Pooled AUC over every race and approach.
pub fn auc(cohort: &Cohort) -> Result<f64, MetricError> {
    let (pos, neg): (Vec<_>, Vec<_>) = cohort.records().iter().partition(|r| r.label == 1);
    let pos: Vec<f64> = pos.iter().map(|r| r.score).collect();
    let neg: Vec<f64> = neg.iter().map(|r| r.score).collect();
    auc_scores(&pos, &neg).ok_or(MetricError::SingleClass)
}

/// Computes every metric family plus utility at the given thresholds.
pub fn evaluate(
    cohort: &Cohort,
    thresholds: &Thresholds,
    opts: &EvalOptions,
) -> Result<FairnessReport, MetricError> {
    let table = cells(cohort, thresholds)?;
    let naive = naive_from_cells(&table, opts)?;
    let terms = approach_terms(&table, opts)?;
    let approach_averaged = aa_from_terms(&terms);
    let utility_regularized = ur_from_terms(&terms)?;
    let correct: u64 = (0..table.races().len())
        .map(|s| table.pooled(s, |_| true).correct())
        .sum();
    let utility = Utility {
        auc: auc(cohort)?,
        acc: correct as f64 / table.total() as f64,
    };
    Ok(FairnessReport {
        naive,
        approach_averaged,
        utility_regularized,
        utility,
        per_approach: terms.into_iter().map(|t| (t.name, t.stats)).collect(),
        threshold_used: thresholds.into(),
    })
}
