//! Fairness evaluation and bias-aware pruning for binary forgery detectors.
//!
//! * [`records`]: prediction logs, JSONL ingestion, per-(race, approach) cells.
//! * [`metrics`]: naive, approach-averaged and utility-regularized metrics, AUC.
//! * [`thresholds`]: per-race threshold search and evaluation under a plan.
//! * [`tensor`]: a small sequential inference engine and its file formats.
//! * [`pruning`]: activation-bias estimation, BPFA / WEIG / RoBA pruning, sweeps.
//! * [`synth`]: deterministic synthetic cohorts and toy networks.
//! * [`report`]: bundles, rankings and rendering.

pub mod dataset;
pub mod metrics;
pub mod pruning;
pub mod records;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod thresholds;

pub use metrics::{evaluate, EvalOptions, FairnessReport, MetricError};
pub use records::{parse_records, Cohort, PredictionRecord, Thresholds, REAL_FACE};
