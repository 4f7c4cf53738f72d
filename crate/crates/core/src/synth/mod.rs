//! Deterministic synthetic cohorts with exactly controlled cell accuracies.
//!
//! Every generated record is bimodal: correct decisions score 0.1 (real) or
//! 0.9 (fake), wrong ones the opposite, so the threshold-0.5 accuracy of a
//! cell is exactly `round(acc × n) / n`. With `noise` enabled scores are
//! drawn uniformly from [0, 0.49] or [0.51, 1] instead, keeping every
//! threshold-0.5 decision unchanged.

pub mod toy;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::{Cohort, PredictionRecord, RecordError, REAL_FACE};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("accuracy {acc} for ({race}, {approach}) is outside [0, 1]")]
    AccuracyOutOfRange { race: String, approach: String, acc: f64 },
    #[error("n_per_cell must be at least 1")]
    EmptyCells,
    #[error("infeasible parameters: {0}")]
    Infeasible(String),
    #[error("invalid synth spec: {0}")]
    Parse(String),
    #[error(transparent)]
    Records(#[from] RecordError),
}

/// Target accuracy per (race, approach) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySpec {
    /// race -> approach -> accuracy
    pub cells: BTreeMap<String, BTreeMap<String, f64>>,
    pub n_per_cell: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise: bool,
}

impl AccuracySpec {
    pub fn record_count(&self) -> usize {
        self.cells.values().map(BTreeMap::len).sum::<usize>() * self.n_per_cell
    }
}

/// Spec file contents, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthSpec {
    Accuracy(AccuracySpec),
    BiasOffset {
        gap: f64,
        base: f64,
        n: usize,
        #[serde(default)]
        seed: u64,
    },
    AggregationDistortion {
        acc_low: f64,
        acc_high: f64,
        gap: f64,
        n: usize,
        #[serde(default)]
        seed: u64,
    },
}

impl SynthSpec {
    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        serde_json::from_str(text).map_err(|e| SynthError::Parse(e.to_string()))
    }

    pub fn to_accuracy_spec(&self) -> Result<AccuracySpec, SynthError> {
        match self {
            SynthSpec::Accuracy(spec) => Ok(spec.clone()),
            SynthSpec::BiasOffset { gap, base, n, seed } => bias_offset_spec(*gap, *base, *n, *seed),
            SynthSpec::AggregationDistortion {
                acc_low,
                acc_high,
                gap,
                n,
                seed,
            } => aggregation_distortion_spec(*acc_low, *acc_high, *gap, *n, *seed),
        }
    }

    pub fn generate(&self) -> Result<Cohort, SynthError> {
        from_accuracy_spec(&self.to_accuracy_spec()?)
    }
}

/// Spec files shipped with the crate, by name.
pub const BUNDLED_SPECS: [(&str, &str); 5] = [
    ("table6", include_str!("../../data/table6.json")),
    ("table6_best", include_str!("../../data/table6_best.json")),
    ("bias_offset", include_str!("../../data/bias_offset.json")),
    ("aggregation_distortion", include_str!("../../data/aggregation_distortion.json")),
    ("table6_best_thresholds", include_str!("../../data/table6_best_thresholds.json")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    let name = name.strip_suffix(".json").unwrap_or(name);
    BUNDLED_SPECS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

fn check_acc(race: &str, approach: &str, acc: f64) -> Result<(), SynthError> {
    if acc.is_finite() && (0.0..=1.0).contains(&acc) {
        Ok(())
    } else {
        Err(SynthError::AccuracyOutOfRange {
            race: race.into(),
            approach: approach.into(),
            acc,
        })
    }
}

/// Builds a cohort whose cells hit the target accuracies at threshold 0.5.
pub fn from_accuracy_spec(spec: &AccuracySpec) -> Result<Cohort, SynthError> {
    if spec.n_per_cell == 0 {
        return Err(SynthError::EmptyCells);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.record_count());
    for (race, row) in &spec.cells {
        for (approach, &acc) in row {
            check_acc(race, approach, acc)?;
            let fake = approach != REAL_FACE;
            let correct = (acc * spec.n_per_cell as f64).round() as usize;
            for i in 0..spec.n_per_cell {
                let high = (i < correct) == fake;
                let score = match (spec.noise, high) {
                    (false, true) => 0.9,
                    (false, false) => 0.1,
                    (true, true) => rng.gen_range(0.51..=1.0),
                    (true, false) => rng.gen_range(0.0..=0.49),
                };
                records.push(PredictionRecord {
                    id: format!("{race}/{approach}/{i}"),
                    score,
                    label: u8::from(fake),
                    race: race.clone(),
                    approach: approach.clone(),
                });
            }
        }
    }
    records.shuffle(&mut rng);
    Ok(Cohort::new(records)?)
}

fn feasible(label: &str, acc: f64) -> Result<(), SynthError> {
    if acc.is_finite() && (0.0..=1.0).contains(&acc) {
        Ok(())
    } else {
        Err(SynthError::Infeasible(format!("{label} accuracy {acc} is outside [0, 1]")))
    }
}

pub const OFFSET_RACES: [&str; 2] = ["RaceA", "RaceB"];

/// Two races, two forgery approaches with mirrored per-race accuracies.
///
/// FA1 favours RaceA by `gap`, FA2 favours RaceB by `gap`, RealFace is
/// balanced at `base`; pooled per-race accuracy is identical.
pub fn bias_offset_spec(gap: f64, base: f64, n: usize, seed: u64) -> Result<AccuracySpec, SynthError> {
    if !(gap >= 0.0) {
        return Err(SynthError::Infeasible(format!("gap {gap} must be non-negative")));
    }
    let (hi, lo) = (base + gap / 2.0, base - gap / 2.0);
    feasible("base", base)?;
    feasible("base + gap/2", hi)?;
    feasible("base - gap/2", lo)?;
    let [a, b] = OFFSET_RACES;
    let cells = [
        (a, [(REAL_FACE, base), ("FA1", hi), ("FA2", lo)]),
        (b, [(REAL_FACE, base), ("FA1", lo), ("FA2", hi)]),
    ]
    .into_iter()
    .map(|(race, row)| {
        (
            race.to_string(),
            row.into_iter().map(|(f, acc)| (f.to_string(), acc)).collect(),
        )
    })
    .collect();
    Ok(AccuracySpec {
        cells,
        n_per_cell: n,
        seed,
        noise: false,
    })
}

pub fn bias_offset_cohort(gap: f64, base: f64, n: usize) -> Result<Cohort, SynthError> {
    from_accuracy_spec(&bias_offset_spec(gap, base, n, 0)?)
}

/// Two forgery approaches with mean accuracies `acc_low` and `acc_high`,
/// each with the same race gap. RealFace sits at their mean for both races.
pub fn aggregation_distortion_spec(
    acc_low: f64,
    acc_high: f64,
    gap: f64,
    n: usize,
    seed: u64,
) -> Result<AccuracySpec, SynthError> {
    if !(gap >= 0.0) {
        return Err(SynthError::Infeasible(format!("gap {gap} must be non-negative")));
    }
    for (label, acc) in [
        ("acc_low + gap/2", acc_low + gap / 2.0),
        ("acc_low - gap/2", acc_low - gap / 2.0),
        ("acc_high + gap/2", acc_high + gap / 2.0),
        ("acc_high - gap/2", acc_high - gap / 2.0),
    ] {
        feasible(label, acc)?;
    }
    let real = 0.5 * (acc_low + acc_high);
    let [a, b] = OFFSET_RACES;
    let row = |sign: f64| -> BTreeMap<String, f64> {
        [
            (REAL_FACE.to_string(), real),
            ("FA_low".to_string(), acc_low + sign * gap / 2.0),
            ("FA_high".to_string(), acc_high + sign * gap / 2.0),
        ]
        .into()
    };
    Ok(AccuracySpec {
        cells: [(a.to_string(), row(1.0)), (b.to_string(), row(-1.0))].into(),
        n_per_cell: n,
        seed,
        noise: false,
    })
}

pub fn aggregation_distortion_cohort(acc_low: f64, acc_high: f64, gap: f64, n: usize) -> Result<Cohort, SynthError> {
    from_accuracy_spec(&aggregation_distortion_spec(acc_low, acc_high, gap, n, 0)?)
}
