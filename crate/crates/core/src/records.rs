//! Prediction-log data model, JSONL ingestion and stratified cell counting.
//!
//! A [`Cohort`] is an immutable, validated collection of detector outputs.
//! Races and forgery approaches are open vocabularies; the literal
//! [`REAL_FACE`] is reserved for genuine faces and is the only approach
//! allowed to carry label 0.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Approach identifier reserved for genuine (non-forged) faces.
pub const REAL_FACE: &str = "RealFace";

const KNOWN_KEYS: [&str; 5] = ["id", "score", "label", "race", "approach"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecordError {
    #[error("line {line}: malformed JSON: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: field `{field}` has the wrong type (expected {expected})")]
    FieldType {
        line: usize,
        field: &'static str,
        expected: &'static str,
    },
    #[error("line {line}: score {score} is outside [0, 1]")]
    ScoreOutOfRange { line: usize, score: f64 },
    #[error("line {line}: label must be 0 or 1, got {label}")]
    BadLabel { line: usize, label: i64 },
    #[error("line {line}: label {label} is inconsistent with approach `{approach}` (label 0 iff approach is RealFace)")]
    LabelApproachMismatch {
        line: usize,
        label: u8,
        approach: String,
    },
    #[error("record `{id}`: {message}")]
    Invalid { id: String, message: String },
    #[error("cohort needs at least two races, found {found}")]
    TooFewRaces { found: usize },
    #[error("I/O error at line {line}: {message}")]
    Io { line: usize, message: String },
}

/// One detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    /// Probability that the face is fake.
    pub score: f64,
    /// 1 = fake, 0 = real.
    pub label: u8,
    pub race: String,
    pub approach: String,
}

impl PredictionRecord {
    pub fn is_real(&self) -> bool {
        self.approach == REAL_FACE
    }

    fn validate(&self) -> Result<(), String> {
        if !self.score.is_finite() || !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} is outside [0, 1]", self.score));
        }
        if self.label > 1 {
            return Err(format!("label must be 0 or 1, got {}", self.label));
        }
        if (self.label == 0) != self.is_real() {
            return Err(format!(
                "label {} is inconsistent with approach `{}`",
                self.label, self.approach
            ));
        }
        Ok(())
    }
}

/// Validated set of records with their race and approach vocabularies.
///
/// Races are kept in sorted order; approaches list [`REAL_FACE`] first (when
/// present) followed by the forgery approaches in sorted order. These orders
/// fix every downstream summation order.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    records: Vec<PredictionRecord>,
    races: Vec<String>,
    approaches: Vec<String>,
    race_ix: Vec<usize>,
    approach_ix: Vec<usize>,
}

impl Cohort {
    pub fn new(records: Vec<PredictionRecord>) -> Result<Self, RecordError> {
        for r in &records {
            r.validate().map_err(|message| RecordError::Invalid {
                id: r.id.clone(),
                message,
            })?;
        }
        let races: Vec<String> = records
            .iter()
            .map(|r| r.race.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if races.len() < 2 {
            return Err(RecordError::TooFewRaces { found: races.len() });
        }
        let fakes: BTreeSet<&str> = records
            .iter()
            .filter(|r| !r.is_real())
            .map(|r| r.approach.as_str())
            .collect();
        let mut approaches = Vec::with_capacity(fakes.len() + 1);
        if records.iter().any(PredictionRecord::is_real) {
            approaches.push(REAL_FACE.to_string());
        }
        approaches.extend(fakes.into_iter().map(str::to_string));

        let race_lookup: BTreeMap<&str, usize> = races
            .iter()
            .enumerate()
            .map(|(i, r)| (r.as_str(), i))
            .collect();
        let approach_lookup: BTreeMap<&str, usize> = approaches
            .iter()
            .enumerate()
            .map(|(i, a)| (a.as_str(), i))
            .collect();
        let race_ix = records.iter().map(|r| race_lookup[r.race.as_str()]).collect();
        let approach_ix = records
            .iter()
            .map(|r| approach_lookup[r.approach.as_str()])
            .collect();
        Ok(Self {
            records,
            races,
            approaches,
            race_ix,
            approach_ix,
        })
    }

    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    pub fn races(&self) -> &[String] {
        &self.races
    }

    pub fn approaches(&self) -> &[String] {
        &self.approaches
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn into_records(self) -> Vec<PredictionRecord> {
        self.records
    }

    /// Records belonging to one race, in cohort order.
    pub fn race_records<'a>(&'a self, race: &'a str) -> impl Iterator<Item = &'a PredictionRecord> + 'a {
        self.records.iter().filter(move |r| r.race == race)
    }

    pub(crate) fn indexed(&self) -> impl Iterator<Item = (usize, usize, &PredictionRecord)> {
        self.race_ix
            .iter()
            .zip(&self.approach_ix)
            .zip(&self.records)
            .map(|((&s, &f), r)| (s, f, r))
    }
}

/// Confusion counts for one (race, approach) cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl CellCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn predicted_positive(&self) -> u64 {
        self.tp + self.fp
    }

    pub fn correct(&self) -> u64 {
        self.tp + self.tn
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    /// P(Ŷ=1) within the cell, `None` when empty.
    pub fn positive_rate(&self) -> Option<f64> {
        (!self.is_empty()).then(|| self.predicted_positive() as f64 / self.total() as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        (!self.is_empty()).then(|| self.correct() as f64 / self.total() as f64)
    }

    fn add(&mut self, other: &CellCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    fn tally(&mut self, label: u8, predicted_fake: bool) {
        match (label, predicted_fake) {
            (1, true) => self.tp += 1,
            (1, false) => self.fn_ += 1,
            (_, true) => self.fp += 1,
            (_, false) => self.tn += 1,
        }
    }
}

/// Decision threshold source: one global value or one value per race.
#[derive(Debug, Clone, PartialEq)]
pub enum Thresholds {
    Global(f64),
    PerRace(BTreeMap<String, f64>),
}

impl Thresholds {
    pub fn for_race(&self, race: &str) -> Option<f64> {
        match self {
            Thresholds::Global(t) => Some(*t),
            Thresholds::PerRace(map) => map.get(race).copied(),
        }
    }
}

/// Predicted-fake rule shared by every consumer: `score >= threshold`.
#[inline]
pub fn predicts_fake(score: f64, threshold: f64) -> bool {
    score >= threshold
}

/// Dense race × approach table of confusion counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTable {
    races: Vec<String>,
    approaches: Vec<String>,
    // row-major: race, then approach
    counts: Vec<CellCounts>,
}

impl CellTable {
    pub fn races(&self) -> &[String] {
        &self.races
    }

    pub fn approaches(&self) -> &[String] {
        &self.approaches
    }

    pub fn cell_at(&self, race: usize, approach: usize) -> &CellCounts {
        &self.counts[race * self.approaches.len() + approach]
    }

    pub fn cell(&self, race: &str, approach: &str) -> Option<&CellCounts> {
        let s = self.races.iter().position(|r| r == race)?;
        let f = self.approaches.iter().position(|a| a == approach)?;
        Some(self.cell_at(s, f))
    }

    /// Counts for one race pooled over the approaches selected by `keep`.
    pub fn pooled(&self, race: usize, keep: impl Fn(&str) -> bool) -> CellCounts {
        let mut acc = CellCounts::default();
        for (f, name) in self.approaches.iter().enumerate() {
            if keep(name) {
                acc.add(self.cell_at(race, f));
            }
        }
        acc
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(CellCounts::total).sum()
    }

    /// Keyed view: every (race, approach) pair exactly once, empty cells as zeros.
    pub fn to_map(&self) -> BTreeMap<(String, String), CellCounts> {
        let mut out = BTreeMap::new();
        for (s, race) in self.races.iter().enumerate() {
            for (f, approach) in self.approaches.iter().enumerate() {
                out.insert((race.clone(), approach.clone()), *self.cell_at(s, f));
            }
        }
        out
    }
}

/// Tallies confusion counts per (race, approach) at the given thresholds.
///
/// Fails only when a per-race threshold map lacks one of the cohort's races.
pub fn group_cells_with(cohort: &Cohort, thresholds: &Thresholds) -> Result<CellTable, String> {
    let per_race: Vec<f64> = cohort
        .races()
        .iter()
        .map(|r| {
            thresholds
                .for_race(r)
                .ok_or_else(|| r.clone())
        })
        .collect::<Result<_, _>>()?;
    let n_app = cohort.approaches().len();
    let mut counts = vec![CellCounts::default(); cohort.races().len() * n_app];
    for (s, f, r) in cohort.indexed() {
        counts[s * n_app + f].tally(r.label, predicts_fake(r.score, per_race[s]));
    }
    Ok(CellTable {
        races: cohort.races().to_vec(),
        approaches: cohort.approaches().to_vec(),
        counts,
    })
}

/// Tallies confusion counts per (race, approach) at one global threshold.
pub fn group_cells(cohort: &Cohort, threshold: f64) -> CellTable {
    group_cells_with(cohort, &Thresholds::Global(threshold))
        .expect("a global threshold covers every race")
}

fn field<'a>(obj: &'a Map<String, Value>, line: usize, name: &'static str) -> Result<&'a Value, RecordError> {
    obj.get(name)
        .ok_or(RecordError::MissingField { line, field: name })
}

fn string_field(obj: &Map<String, Value>, line: usize, name: &'static str) -> Result<String, RecordError> {
    field(obj, line, name)?
        .as_str()
        .map(str::to_string)
        .ok_or(RecordError::FieldType {
            line,
            field: name,
            expected: "string",
        })
}

/// Parses a single JSONL line (1-based `line` for diagnostics).
pub fn parse_record_line(text: &str, line: usize) -> Result<PredictionRecord, RecordError> {
    let value: Value = serde_json::from_str(text).map_err(|e| RecordError::Malformed {
        line,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or(RecordError::Malformed {
        line,
        message: "expected a JSON object".into(),
    })?;

    let id = string_field(obj, line, "id")?;
    let score = field(obj, line, "score")?
        .as_f64()
        .ok_or(RecordError::FieldType {
            line,
            field: "score",
            expected: "number",
        })?;
    if !score.is_finite() || !(0.0..=1.0).contains(&score) {
        return Err(RecordError::ScoreOutOfRange { line, score });
    }
    let label = field(obj, line, "label")?
        .as_i64()
        .ok_or(RecordError::FieldType {
            line,
            field: "label",
            expected: "integer 0 or 1",
        })?;
    if !(0..=1).contains(&label) {
        return Err(RecordError::BadLabel { line, label });
    }
    let label = label as u8;
    let race = string_field(obj, line, "race")?;
    let approach = string_field(obj, line, "approach")?;
    if (label == 0) != (approach == REAL_FACE) {
        return Err(RecordError::LabelApproachMismatch {
            line,
            label,
            approach,
        });
    }

    let extra: Vec<&str> = obj
        .keys()
        .map(String::as_str)
        .filter(|k| !KNOWN_KEYS.contains(k))
        .collect();
    if !extra.is_empty() {
        log::warn!("line {line}: ignoring unknown keys {extra:?}");
    }

    Ok(PredictionRecord {
        id,
        score,
        label,
        race,
        approach,
    })
}

/// Reads line-delimited JSON records. Blank lines are skipped.
pub fn parse_records<R: BufRead>(reader: R) -> Result<Cohort, RecordError> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| RecordError::Io {
            line: line_no,
            message: e.to_string(),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        records.push(parse_record_line(&text, line_no)?);
    }
    Cohort::new(records)
}

pub fn parse_records_str(text: &str) -> Result<Cohort, RecordError> {
    parse_records(text.as_bytes())
}

/// Serializes records as JSONL, one object per line, in the given order.
pub fn write_records<W: std::io::Write>(mut out: W, records: &[PredictionRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, score: f64, race: &str, approach: &str) -> PredictionRecord {
        PredictionRecord {
            id: id.into(),
            score,
            label: u8::from(approach != REAL_FACE),
            race: race.into(),
            approach: approach.into(),
        }
    }

    #[test]
    fn parses_two_valid_lines() {
        let text = r#"{"id":"a","score":0.2,"label":0,"race":"A","approach":"RealFace"}
{"id":"b","score":0.9,"label":1,"race":"B","approach":"FaceSwap"}
"#;
        let cohort = parse_records_str(text).unwrap();
        assert_eq!(cohort.len(), 2);
        assert_eq!(cohort.races(), ["A", "B"]);
        assert_eq!(cohort.approaches(), ["RealFace", "FaceSwap"]);
        assert_eq!(cohort.records()[0].id, "a");
    }

    #[test]
    fn score_out_of_range_names_line() {
        let text = r#"{"id":"a","score":0.2,"label":0,"race":"A","approach":"RealFace"}
{"id":"b","score":1.3,"label":1,"race":"B","approach":"FaceSwap"}"#;
        let err = parse_records_str(text).unwrap_err();
        assert_eq!(err, RecordError::ScoreOutOfRange { line: 2, score: 1.3 });
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn fake_label_on_real_face_is_rejected() {
        let err = parse_record_line(
            r#"{"id":"a","score":0.2,"label":1,"race":"A","approach":"RealFace"}"#,
            7,
        )
        .unwrap_err();
        assert!(matches!(err, RecordError::LabelApproachMismatch { line: 7, .. }));
    }

    #[test]
    fn wrong_field_types_and_garbage() {
        let err = parse_record_line(
            r#"{"id":"a","score":"0.2","label":0,"race":"A","approach":"RealFace"}"#,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, RecordError::FieldType { field: "score", .. }));
        let err = parse_record_line(r#"{"id":"a","score":0.2,"label":0,"race":"A"}"#, 3).unwrap_err();
        assert_eq!(err, RecordError::MissingField { line: 3, field: "approach" });
        assert!(matches!(
            parse_record_line("{not json", 4),
            Err(RecordError::Malformed { line: 4, .. })
        ));
        assert!(matches!(
            parse_record_line(r#"{"id":"a","score":0.2,"label":2,"race":"A","approach":"X"}"#, 5),
            Err(RecordError::BadLabel { line: 5, label: 2 })
        ));
    }

    #[test]
    fn extra_keys_are_ignored() {
        let r = parse_record_line(
            r#"{"id":"a","score":0.5,"label":1,"race":"A","approach":"X","frame":3}"#,
            1,
        )
        .unwrap();
        assert_eq!(r.approach, "X");
    }

    #[test]
    fn empty_input_is_not_a_cohort() {
        assert_eq!(
            parse_records_str("\n\n").unwrap_err(),
            RecordError::TooFewRaces { found: 0 }
        );
    }

    #[test]
    fn threshold_is_inclusive() {
        let cohort = Cohort::new(vec![rec("x", 0.7, "A", "FS"), rec("y", 0.1, "B", REAL_FACE)]).unwrap();
        assert_eq!(group_cells(&cohort, 0.5).cell("A", "FS").unwrap().tp, 1);
        assert_eq!(group_cells(&cohort, 0.7).cell("A", "FS").unwrap().tp, 1);
        assert_eq!(group_cells(&cohort, 0.71).cell("A", "FS").unwrap().fn_, 1);
    }

    #[test]
    fn mixed_cohort_matches_hand_tally() {
        let cohort = Cohort::new(vec![
            rec("1", 0.9, "A", "FS"),
            rec("2", 0.3, "A", "FS"),
            rec("3", 0.6, "A", REAL_FACE),
            rec("4", 0.2, "B", REAL_FACE),
        ])
        .unwrap();
        let map = group_cells(&cohort, 0.5).to_map();
        // 2 races x 2 approaches, B/FS empty
        assert_eq!(map.len(), 4);
        let c = |r: &str, a: &str| map[&(r.to_string(), a.to_string())];
        assert_eq!(c("A", "FS"), CellCounts { tp: 1, fp: 0, tn: 0, fn_: 1 });
        assert_eq!(c("A", REAL_FACE), CellCounts { tp: 0, fp: 1, tn: 0, fn_: 0 });
        assert_eq!(c("B", REAL_FACE), CellCounts { tp: 0, fp: 0, tn: 1, fn_: 0 });
        assert!(c("B", "FS").is_empty());
    }

    #[test]
    fn per_race_thresholds_require_every_race() {
        let cohort = Cohort::new(vec![rec("1", 0.9, "A", "FS"), rec("2", 0.3, "B", "FS")]).unwrap();
        let plan = Thresholds::PerRace([("A".to_string(), 0.5)].into());
        assert_eq!(group_cells_with(&cohort, &plan).unwrap_err(), "B");
    }
}
