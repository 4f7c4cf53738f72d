//! Report bundles, per-metric rankings and JSON / Markdown / CSV rendering.
//!
//! Markdown tables have one column per run and 13 metric rows grouped as
//! Naive, Approach Averaged, Utility Regularized and Utility (AUC), with
//! values shown to four decimals. JSON keeps full precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::FairnessReport;
use crate::pruning::SweepGrid;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("nothing to render: the bundle has no runs")]
    EmptyBundle,
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    SchemaVersion(u32),
    #[error("invalid report JSON: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown format `{other}` (expected json, markdown or csv)")),
        }
    }
}

/// (group, display name, key) in table order.
const TABLE_ROWS: [(&str, &str, &str); 13] = [
    ("Naive", "DPD", "dpd"),
    ("Naive", "DEOdds", "deodds"),
    ("Naive", "DEO", "deo"),
    ("Naive", "STD", "std"),
    ("Approach Averaged", "AADPD", "aadpd"),
    ("Approach Averaged", "AADEOdds", "aadeodds"),
    ("Approach Averaged", "AADEO", "aadeo"),
    ("Approach Averaged", "AASTD", "aastd"),
    ("Utility Regularized", "URDPD", "urdpd"),
    ("Utility Regularized", "URDEOdds", "urdeodds"),
    ("Utility Regularized", "URDEO", "urdeo"),
    ("Utility Regularized", "URSTD", "urstd"),
    ("Utility", "AUC", "auc"),
];

/// Metric keys in column order, utility last.
pub const METRIC_KEYS: [&str; 14] = [
    "dpd", "deodds", "deo", "std", "aadpd", "aadeodds", "aadeo", "aastd", "urdpd", "urdeodds", "urdeo", "urstd",
    "auc", "acc",
];

fn higher_is_better(key: &str) -> bool {
    matches!(key, "auc" | "acc")
}

fn value(report: &FairnessReport, key: &str) -> f64 {
    report
        .metric_values()
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .expect("known metric key")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub schema_version: u32,
    pub reports: BTreeMap<String, FairnessReport>,
    pub rankings: BTreeMap<String, Vec<String>>,
}

impl ReportBundle {
    pub fn new(reports: BTreeMap<String, FairnessReport>) -> Self {
        let rankings = rank(&reports);
        Self {
            schema_version: SCHEMA_VERSION,
            reports,
            rankings,
        }
    }

    pub fn single(name: impl Into<String>, report: FairnessReport) -> Self {
        Self::new([(name.into(), report)].into())
    }

    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        let bundle: ReportBundle = serde_json::from_str(text).map_err(|e| ReportError::Parse(e.to_string()))?;
        if bundle.schema_version != SCHEMA_VERSION {
            return Err(ReportError::SchemaVersion(bundle.schema_version));
        }
        Ok(bundle)
    }
}

/// Per metric: run names best first (ascending for fairness, descending for
/// utility), ties in name order.
pub fn rank(reports: &BTreeMap<String, FairnessReport>) -> BTreeMap<String, Vec<String>> {
    METRIC_KEYS
        .iter()
        .map(|&key| {
            let mut runs: Vec<(&String, f64)> = reports.iter().map(|(n, r)| (n, value(r, key))).collect();
            // stable sort over name-ordered input keeps ties in name order
            runs.sort_by(|a, b| {
                if higher_is_better(key) {
                    b.1.total_cmp(&a.1)
                } else {
                    a.1.total_cmp(&b.1)
                }
            });
            (key.to_string(), runs.into_iter().map(|(n, _)| n.clone()).collect())
        })
        .collect()
}

pub fn render(bundle: &ReportBundle, format: ReportFormat) -> Result<String, ReportError> {
    if bundle.reports.is_empty() {
        return Err(ReportError::EmptyBundle);
    }
    Ok(match format {
        ReportFormat::Json => serde_json::to_string_pretty(bundle).expect("bundle serializes") + "\n",
        ReportFormat::Markdown => markdown(bundle),
        ReportFormat::Csv => csv(bundle),
    })
}

fn markdown(bundle: &ReportBundle) -> String {
    let runs: Vec<&String> = bundle.reports.keys().collect();
    let mut out = String::from("| Group | Metric |");
    for run in &runs {
        let _ = write!(out, " {run} |");
    }
    out.push_str("\n|:--|:--|");
    out.push_str(&"--:|".repeat(runs.len()));
    out.push('\n');
    for (group, label, key) in TABLE_ROWS {
        let _ = write!(out, "| {group} | {label} |");
        for run in &runs {
            let _ = write!(out, " {:.4} |", value(&bundle.reports[*run], key));
        }
        out.push('\n');
    }
    out
}

fn csv(bundle: &ReportBundle) -> String {
    let mut out = format!("run,{}\n", METRIC_KEYS.join(","));
    for (run, report) in &bundle.reports {
        out.push_str(run);
        for key in METRIC_KEYS {
            let _ = write!(out, ",{}", value(report, key));
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct SweepDocument<'a> {
    schema_version: u32,
    #[serde(flatten)]
    grid: &'a SweepGrid,
}

/// Sweep grid: one row for the unpruned model, then one per (method, rate)
/// with rate-0 rows folded into the first. Unusable rows show `-` in every
/// metric column. JSON keeps every row.
pub fn render_sweep(grid: &SweepGrid, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            serde_json::to_string_pretty(&SweepDocument {
                schema_version: SCHEMA_VERSION,
                grid,
            })
            .expect("grid serializes")
                + "\n"
        }
        ReportFormat::Csv => {
            let mut out = format!("method,rate,pruned_weights,{},usable\n", METRIC_KEYS.join(","));
            let _ = write!(out, "original,0,0");
            for key in METRIC_KEYS {
                let _ = write!(out, ",{}", value(&grid.baseline, key));
            }
            out.push_str(",true\n");
            for row in grid.rows.iter().filter(|r| r.rate > 0.0) {
                let _ = write!(out, "{},{},{}", row.method, row.rate, row.pruned_weights);
                for key in METRIC_KEYS {
                    match (&row.report, row.usable) {
                        (Some(r), true) => {
                            let _ = write!(out, ",{}", value(r, key));
                        }
                        _ => out.push_str(",-"),
                    }
                }
                let _ = writeln!(out, ",{}", row.usable);
            }
            out
        }
        ReportFormat::Markdown => {
            let mut out = String::from("| Method | Rate |");
            for (_, label, _) in TABLE_ROWS {
                let _ = write!(out, " {label} |");
            }
            out.push_str(" ACC |\n|:--|--:|");
            out.push_str(&"--:|".repeat(TABLE_ROWS.len() + 1));
            out.push('\n');
            let mut line = |name: &str, rate: String, report: Option<&FairnessReport>| {
                let _ = write!(out, "| {name} | {rate} |");
                for key in TABLE_ROWS.iter().map(|r| r.2).chain(["acc"]) {
                    match report {
                        Some(r) => {
                            let _ = write!(out, " {:.4} |", value(r, key));
                        }
                        None => out.push_str(" - |"),
                    }
                }
                out.push('\n');
            };
            line("Original", "-".into(), Some(&grid.baseline));
            for row in grid.rows.iter().filter(|r| r.rate > 0.0) {
                let report = row.report.as_ref().filter(|_| row.usable);
                line(&row.method.to_string(), format!("{}%", (row.rate * 1e6).round() / 1e4), report);
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::*;

    fn report(dpd: f64, auc: f64) -> FairnessReport {
        FairnessReport {
            naive: NaiveMetrics { dpd, deodds: 0.1, deo: 0.2, std: 0.05 },
            approach_averaged: ApproachAveragedMetrics { aadpd: 0.1, aadeodds: 0.1, aadeo: 0.1, aastd: 0.1 },
            utility_regularized: UtilityRegularizedMetrics { urdpd: 0.1, urdeodds: 0.1, urdeo: 0.1, urstd: 0.1 },
            utility: Utility { auc, acc: 0.8 },
            per_approach: [("RealFace".to_string(), ApproachStats { gap_pos: 0.1, acc: 0.9, std_acc: 0.01 })].into(),
            threshold_used: ThresholdUsed::Global(0.5),
        }
    }

    #[test]
    fn single_run_markdown_has_thirteen_metric_rows() {
        let md = render(&ReportBundle::single("xception", report(0.15384, 0.9)), ReportFormat::Markdown).unwrap();
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines.len(), 2 + 13);
        assert_eq!(lines[2], "| Naive | DPD | 0.1538 |");
        assert_eq!(lines[14], "| Utility | AUC | 0.9000 |");
    }

    #[test]
    fn rankings_orders() {
        let bundle = ReportBundle::new(
            [
                ("b".to_string(), report(0.3, 0.7)),
                ("a".to_string(), report(0.3, 0.9)),
                ("c".to_string(), report(0.1, 0.8)),
            ]
            .into(),
        );
        assert_eq!(bundle.rankings["dpd"], ["c", "a", "b"]);
        assert_eq!(bundle.rankings["auc"], ["a", "c", "b"]);
        // all equal -> name order
        assert_eq!(bundle.rankings["urstd"], ["a", "b", "c"]);
        let one = ReportBundle::single("only", report(0.1, 0.5));
        assert_eq!(one.rankings["deo"], ["only"]);
    }

    #[test]
    fn json_roundtrip_and_errors() {
        let bundle = ReportBundle::new(
            [("x".to_string(), report(0.1 / 3.0, 0.75)), ("y".to_string(), report(0.2, 0.6))].into(),
        );
        let text = render(&bundle, ReportFormat::Json).unwrap();
        assert_eq!(ReportBundle::from_json(&text).unwrap(), bundle);
        let bumped = text.replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(matches!(ReportBundle::from_json(&bumped), Err(ReportError::SchemaVersion(9))));
        assert!(matches!(
            render(&ReportBundle::new(BTreeMap::new()), ReportFormat::Csv),
            Err(ReportError::EmptyBundle)
        ));
    }

    #[test]
    fn csv_has_one_row_per_run() {
        let bundle = ReportBundle::new([("a".to_string(), report(0.1, 0.5)), ("b".to_string(), report(0.2, 0.5))].into());
        let csv = render(&bundle, ReportFormat::Csv).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("run,dpd,deodds"));
        assert!(lines[1].starts_with("a,0.1,"));
    }
}
