//! Bias-aware unstructured pruning.
//!
//! For every prunable layer the calibration set is pushed through the model
//! and the per-unit L2 norm of the layer output is averaged per race, giving
//! a race × unit matrix `Z`. A unit's activation bias is the population
//! standard deviation of its column of `Z`. Each weight is then scored:
//!
//! | method | score of weight `w` in unit `i` |
//! |--------|---------------------------------|
//! | BPFA   | `|w| / bias_i`                  |
//! | WEIG   | `|w|`                           |
//! | RoBA   | `1 / bias_i`                    |
//!
//! A unit with zero bias scores `+inf` under BPFA and RoBA. Per layer, the
//! `floor(rate × numel)` lowest-scoring weights are zeroed, with ties broken
//! by ascending `|w|` and then ascending flat index. Scores are computed
//! once on the unpruned model.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{evaluate, population_std, EvalOptions, FairnessReport, MetricError};
use crate::records::{Cohort, PredictionRecord, RecordError, Thresholds};
use crate::tensor::{Model, TapPoint, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("pruning rate {0} is outside [0, 1)")]
    InvalidRate(f64),
    #[error("model has no prunable layers")]
    NoPrunableLayers,
    #[error("activation bias needs at least two races, calibration has {found}")]
    TooFewRaces { found: usize },
    #[error("race `{0}` has no calibration samples")]
    EmptyRace(String),
    #[error("calibration sample has undeclared race `{0}`")]
    UnknownRace(String),
    #[error("method {0} needs a calibration set")]
    MissingCalibration(PruneMethod),
    #[error("layer {layer}: bias has {got} entries, weight has {expected} output units")]
    BiasShape {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("sweep needs at least one method")]
    EmptySweep,
    #[error("mask format error: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Records(#[from] RecordError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMethod {
    Bpfa,
    Weig,
    Roba,
}

impl PruneMethod {
    pub const ALL: [PruneMethod; 3] = [PruneMethod::Bpfa, PruneMethod::Weig, PruneMethod::Roba];

    pub fn needs_calibration(self) -> bool {
        !matches!(self, PruneMethod::Weig)
    }
}

impl fmt::Display for PruneMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneMethod::Bpfa => "BPFA",
            PruneMethod::Weig => "WEIG",
            PruneMethod::Roba => "RoBA",
        })
    }
}

impl FromStr for PruneMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bpfa" => Ok(PruneMethod::Bpfa),
            "weig" => Ok(PruneMethod::Weig),
            "roba" => Ok(PruneMethod::Roba),
            other => Err(format!("unknown pruning method `{other}` (expected bpfa, weig or roba)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PruneConfig {
    /// Also prune linear layers (classifier heads included).
    pub include_linear: bool,
    pub tap_point: TapPoint,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            include_linear: true,
            tap_point: TapPoint::PreActivation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSample {
    pub race: String,
    pub input: Tensor,
}

/// Race-labelled inputs used only to estimate activation bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    races: Vec<String>,
    samples: Vec<CalibrationSample>,
}

impl Calibration {
    /// Races are the sorted distinct races of the samples.
    pub fn new(samples: Vec<CalibrationSample>) -> Self {
        let races = samples
            .iter()
            .map(|s| s.race.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Self { races, samples }
    }

    /// Declares the race list explicitly, e.g. to match an evaluation cohort.
    pub fn with_races(races: Vec<String>, samples: Vec<CalibrationSample>) -> Result<Self, PruneError> {
        if let Some(s) = samples.iter().find(|s| !races.contains(&s.race)) {
            return Err(PruneError::UnknownRace(s.race.clone()));
        }
        Ok(Self { races, samples })
    }

    pub fn races(&self) -> &[String] {
        &self.races
    }

    pub fn samples(&self) -> &[CalibrationSample] {
        &self.samples
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBias {
    /// `z[race][unit]`: mean per-unit L2 activation norm, rows in profile race order.
    pub z: Vec<Vec<f64>>,
    /// Population std of each column of `z`.
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasProfile {
    pub races: Vec<String>,
    pub layers: BTreeMap<usize, LayerBias>,
    pub sample_counts: BTreeMap<String, usize>,
}

/// L2 norm of each leading-axis unit: spatial norm per filter for `(C, H, W)`,
/// absolute value per unit for `(N,)`.
pub fn unit_norms(output: &Tensor) -> Vec<f64> {
    let units = output.shape()[0];
    let per = output.numel() / units;
    output
        .data()
        .chunks_exact(per)
        .map(|unit| unit.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt())
        .collect()
}

/// Estimates per-unit racial activation bias for every prunable layer.
pub fn activation_bias(
    model: &Model,
    calibration: &Calibration,
    cfg: &PruneConfig,
) -> Result<BiasProfile, PruneError> {
    let layers = model.prunable_layers(cfg.include_linear);
    if layers.is_empty() {
        return Err(PruneError::NoPrunableLayers);
    }
    let races = calibration.races();
    if races.len() < 2 {
        return Err(PruneError::TooFewRaces { found: races.len() });
    }
    let race_ix: BTreeMap<&str, usize> = races.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
    let mut counts = vec![0usize; races.len()];
    for s in calibration.samples() {
        let ix = *race_ix
            .get(s.race.as_str())
            .ok_or_else(|| PruneError::UnknownRace(s.race.clone()))?;
        counts[ix] += 1;
    }
    if let Some(ix) = counts.iter().position(|&c| c == 0) {
        return Err(PruneError::EmptyRace(races[ix].clone()));
    }

    let taps: BTreeSet<usize> = layers.iter().copied().collect();
    // per sample: per tapped layer unit norms, in sample order
    let norms: Vec<BTreeMap<usize, Vec<f64>>> = calibration
        .samples()
        .par_iter()
        .map(|s| {
            let (_, recorded) = model.forward_with_taps(&s.input, &taps, cfg.tap_point)?;
            Ok(recorded.iter().map(|(&l, t)| (l, unit_norms(t))).collect())
        })
        .collect::<Result<_, TensorError>>()?;

    let mut out = BTreeMap::new();
    for &layer in &layers {
        let units = model.layer_output_shape(layer)[0];
        let mut z = vec![vec![0.0f64; units]; races.len()];
        for (sample, per_layer) in calibration.samples().iter().zip(&norms) {
            let row = &mut z[race_ix[sample.race.as_str()]];
            for (acc, v) in row.iter_mut().zip(&per_layer[&layer]) {
                *acc += v;
            }
        }
        for (row, &n) in z.iter_mut().zip(&counts) {
            for v in row.iter_mut() {
                *v /= n as f64;
            }
        }
        let bias = (0..units)
            .map(|i| population_std(&z.iter().map(|row| row[i]).collect::<Vec<_>>()))
            .collect();
        out.insert(layer, LayerBias { z, bias });
    }
    Ok(BiasProfile {
        races: races.to_vec(),
        layers: out,
        sample_counts: races.iter().cloned().zip(counts).collect(),
    })
}

/// Per-weight pruning scores in flat weight order. `bias` is ignored by WEIG.
pub fn pruning_scores(weights: &Tensor, bias: Option<&[f64]>, method: PruneMethod) -> Result<Vec<f64>, PruneError> {
    let units = weights.shape()[0];
    let per = weights.numel() / units;
    if method == PruneMethod::Weig {
        return Ok(weights.data().iter().map(|&w| f64::from(w.abs())).collect());
    }
    let bias = bias.ok_or(PruneError::MissingCalibration(method))?;
    if bias.len() != units {
        return Err(PruneError::BiasShape {
            layer: usize::MAX,
            expected: units,
            got: bias.len(),
        });
    }
    Ok(weights
        .data()
        .iter()
        .enumerate()
        .map(|(k, &w)| {
            let b = bias[k / per];
            if b == 0.0 {
                f64::INFINITY
            } else if method == PruneMethod::Bpfa {
                f64::from(w.abs()) / b
            } else {
                1.0 / b
            }
        })
        .collect())
}

/// `floor(rate × numel)`, tolerant of binary rounding in the product.
pub fn pruned_count(rate: f64, numel: usize) -> usize {
    let x = rate * numel as f64;
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest as usize
    } else {
        x.floor() as usize
    }
}

/// Flat indices of the `k` weights to prune, in pruning order.
pub fn select_for_pruning(scores: &[f64], weights: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .total_cmp(&scores[b])
            .then(weights[a].abs().total_cmp(&weights[b].abs()))
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMask {
    pub shape: Vec<usize>,
    /// `true` = pruned, flat weight order.
    pub pruned: Vec<bool>,
}

impl LayerMask {
    pub fn count(&self) -> usize {
        self.pruned.iter().filter(|&&p| p).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    pub method: PruneMethod,
    pub rate: f64,
    pub layers: BTreeMap<usize, LayerMask>,
}

impl PruneMask {
    pub fn total_pruned(&self) -> usize {
        self.layers.values().map(LayerMask::count).sum()
    }
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub model: Model,
    pub mask: PruneMask,
    /// `None` for WEIG, which never looks at activations.
    pub bias: Option<BiasProfile>,
}

fn check_rate(rate: f64) -> Result<(), PruneError> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(PruneError::InvalidRate(rate))
    }
}

/// Scores for every prunable layer of the unpruned model.
pub fn layer_scores(
    model: &Model,
    profile: Option<&BiasProfile>,
    method: PruneMethod,
    cfg: &PruneConfig,
) -> Result<BTreeMap<usize, Vec<f64>>, PruneError> {
    let layers = model.prunable_layers(cfg.include_linear);
    if layers.is_empty() {
        return Err(PruneError::NoPrunableLayers);
    }
    layers
        .into_iter()
        .map(|l| {
            let weight = model.layers()[l].weight().expect("prunable layer has weights");
            let bias = match method {
                PruneMethod::Weig => None,
                _ => {
                    let p = profile.ok_or(PruneError::MissingCalibration(method))?;
                    let lb = p.layers.get(&l).ok_or(PruneError::BiasShape {
                        layer: l,
                        expected: weight.shape()[0],
                        got: 0,
                    })?;
                    Some(lb.bias.as_slice())
                }
            };
            let scores = pruning_scores(weight, bias, method).map_err(|e| match e {
                PruneError::BiasShape { expected, got, .. } => PruneError::BiasShape { layer: l, expected, got },
                other => other,
            })?;
            Ok((l, scores))
        })
        .collect()
}

/// Zeroes the lowest-scoring `floor(rate × numel)` weights of every scored layer.
pub fn prune_with_scores(
    model: &Model,
    scores: &BTreeMap<usize, Vec<f64>>,
    method: PruneMethod,
    rate: f64,
) -> Result<(Model, PruneMask), PruneError> {
    check_rate(rate)?;
    let mut pruned = model.clone();
    let mut layers = BTreeMap::new();
    for (&l, layer_scores) in scores {
        let weight = model.layers()[l].weight().expect("prunable layer has weights");
        let k = pruned_count(rate, weight.numel());
        let chosen = select_for_pruning(layer_scores, weight.data(), k);
        let mut mask = vec![false; weight.numel()];
        let values = pruned.weight_values_mut(l).expect("prunable layer has weights");
        for &i in &chosen {
            mask[i] = true;
            values[i] = 0.0;
        }
        layers.insert(
            l,
            LayerMask {
                shape: weight.shape().to_vec(),
                pruned: mask,
            },
        );
    }
    let pruned = Model::new(
        pruned.name(),
        pruned.version(),
        pruned.input_shape().to_vec(),
        pruned.layers().to_vec(),
    )?;
    Ok((pruned, PruneMask { method, rate, layers }))
}

/// Prunes a model in one pass. WEIG ignores `calibration`.
pub fn apply_pruning(
    model: &Model,
    calibration: Option<&Calibration>,
    method: PruneMethod,
    rate: f64,
    cfg: &PruneConfig,
) -> Result<PruneOutcome, PruneError> {
    check_rate(rate)?;
    let bias = if method.needs_calibration() {
        let calib = calibration.ok_or(PruneError::MissingCalibration(method))?;
        Some(activation_bias(model, calib, cfg)?)
    } else {
        None
    };
    let scores = layer_scores(model, bias.as_ref(), method, cfg)?;
    let (model, mask) = prune_with_scores(model, &scores, method, rate)?;
    Ok(PruneOutcome { model, mask, bias })
}

/// Sets every masked weight of `model` to zero (no re-scoring).
pub fn apply_mask(model: &Model, mask: &PruneMask) -> Result<Model, PruneError> {
    let mut out = model.clone();
    for (&l, lm) in &mask.layers {
        let values = out.weight_values_mut(l).ok_or_else(|| {
            PruneError::Format(format!("mask refers to layer {l}, which has no weights"))
        })?;
        if values.len() != lm.pruned.len() {
            return Err(PruneError::Format(format!(
                "mask for layer {l} has {} entries, weight has {}",
                lm.pruned.len(),
                values.len()
            )));
        }
        for (v, &p) in values.iter_mut().zip(&lm.pruned) {
            if p {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

pub const MASK_MAGIC: &[u8; 4] = b"FTMK";

#[derive(Serialize, Deserialize)]
struct MaskLayerEntry {
    layer: usize,
    shape: Vec<usize>,
    pruned: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct MaskHeader {
    format_version: u32,
    method: PruneMethod,
    rate: f64,
    layers: Vec<MaskLayerEntry>,
}

/// Mask sidecar: `"FTMK" | u32 LE header length | header JSON | bitsets`.
/// Each layer's bitset is `ceil(numel / 8)` bytes, bit `i % 8` (LSB first)
/// of byte `i / 8` set when flat weight `i` is pruned.
pub fn write_mask<W: Write>(mut out: W, mask: &PruneMask) -> Result<(), PruneError> {
    let mut bits = Vec::new();
    let mut layers = Vec::new();
    for (&layer, lm) in &mask.layers {
        let offset = bits.len();
        let mut packed = vec![0u8; lm.pruned.len().div_ceil(8)];
        for (i, _) in lm.pruned.iter().enumerate().filter(|(_, &p)| p) {
            packed[i / 8] |= 1 << (i % 8);
        }
        bits.extend_from_slice(&packed);
        layers.push(MaskLayerEntry {
            layer,
            shape: lm.shape.clone(),
            pruned: lm.count(),
            offset,
        });
    }
    let header = serde_json::to_vec(&MaskHeader {
        format_version: 1,
        method: mask.method,
        rate: mask.rate,
        layers,
    })
    .map_err(|e| PruneError::Format(e.to_string()))?;
    out.write_all(MASK_MAGIC)?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(&bits)?;
    Ok(())
}

pub fn read_mask<R: Read>(mut input: R) -> Result<PruneMask, PruneError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..4] != MASK_MAGIC {
        return Err(PruneError::Format("not a mask sidecar (bad magic)".into()));
    }
    let len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let header_end = 8 + len;
    let header: MaskHeader = serde_json::from_slice(bytes.get(8..header_end).ok_or_else(|| {
        PruneError::Format("truncated mask header".into())
    })?)
    .map_err(|e| PruneError::Format(e.to_string()))?;
    let bits = &bytes[header_end..];
    let mut layers = BTreeMap::new();
    for entry in header.layers {
        let numel: usize = entry.shape.iter().product();
        let chunk = bits
            .get(entry.offset..entry.offset + numel.div_ceil(8))
            .ok_or_else(|| PruneError::Format(format!("bitset for layer {} overruns file", entry.layer)))?;
        let pruned: Vec<bool> = (0..numel).map(|i| chunk[i / 8] >> (i % 8) & 1 == 1).collect();
        let lm = LayerMask {
            shape: entry.shape,
            pruned,
        };
        if lm.count() != entry.pruned {
            return Err(PruneError::Format(format!(
                "layer {} declares {} pruned weights, bitset has {}",
                entry.layer,
                entry.pruned,
                lm.count()
            )));
        }
        layers.insert(entry.layer, lm);
    }
    Ok(PruneMask {
        method: header.method,
        rate: header.rate,
        layers,
    })
}

/// Evaluation input: one tensor plus the record metadata it stands for.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub id: String,
    pub race: String,
    pub approach: String,
    pub label: u8,
    pub input: Tensor,
}

/// Runs the model over every sample and returns the scored cohort.
pub fn score_samples(model: &Model, samples: &[EvalSample]) -> Result<Cohort, PruneError> {
    let scores: Vec<f32> = samples
        .par_iter()
        .map(|s| model.score(&s.input))
        .collect::<Result<_, _>>()?;
    let records = samples
        .iter()
        .zip(scores)
        .map(|(s, score)| PredictionRecord {
            id: s.id.clone(),
            score: f64::from(score).clamp(0.0, 1.0),
            label: s.label,
            race: s.race.clone(),
            approach: s.approach.clone(),
        })
        .collect();
    Ok(Cohort::new(records)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: PruneMethod,
    pub rate: f64,
    pub pruned_weights: usize,
    pub usable: bool,
    pub report: Option<FairnessReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub baseline: FairnessReport,
    pub rows: Vec<SweepRow>,
}

/// Pruning rates used when none are given: 0.1%, 0.4%, 0.7%, 1%, 4%, 7%, 10%.
pub const DEFAULT_SWEEP_RATES: [f64; 7] = [0.001, 0.004, 0.007, 0.01, 0.04, 0.07, 0.10];

/// Evaluates every (method, rate) pair on `eval`. A row whose pruned model
/// has AUC exactly 0.5, or whose metrics cannot be computed, is marked unusable.
/// Rate-0 rows reuse the baseline report.
pub fn prune_sweep(
    model: &Model,
    calibration: Option<&Calibration>,
    methods: &[PruneMethod],
    rates: &[f64],
    eval: &[EvalSample],
    thresholds: &Thresholds,
    opts: &EvalOptions,
    cfg: &PruneConfig,
) -> Result<SweepGrid, PruneError> {
    if methods.is_empty() {
        return Err(PruneError::EmptySweep);
    }
    for &r in rates {
        check_rate(r)?;
    }
    let baseline = evaluate(&score_samples(model, eval)?, thresholds, opts)?;
    let any_pruning = rates.iter().any(|&r| r > 0.0);
    let profile = if any_pruning && methods.iter().any(|m| m.needs_calibration()) {
        let calib = calibration.ok_or(PruneError::MissingCalibration(
            *methods.iter().find(|m| m.needs_calibration()).expect("checked"),
        ))?;
        Some(activation_bias(model, calib, cfg)?)
    } else {
        None
    };

    let mut rows = Vec::with_capacity(methods.len() * rates.len());
    for &method in methods {
        let scores = if any_pruning {
            layer_scores(model, profile.as_ref(), method, cfg)?
        } else {
            BTreeMap::new()
        };
        for &rate in rates {
            if rate == 0.0 {
                rows.push(SweepRow {
                    method,
                    rate,
                    pruned_weights: 0,
                    usable: baseline.utility.auc != 0.5,
                    report: Some(baseline.clone()),
                    note: None,
                });
                continue;
            }
            let (pruned, mask) = prune_with_scores(model, &scores, method, rate)?;
            let outcome = score_samples(&pruned, eval).and_then(|c| Ok(evaluate(&c, thresholds, opts)?));
            let (report, note) = match outcome {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            let usable = report.as_ref().is_some_and(|r| r.utility.auc != 0.5);
            rows.push(SweepRow {
                method,
                rate,
                pruned_weights: mask.total_pruned(),
                usable,
                report,
                note,
            });
        }
    }
    Ok(SweepGrid { baseline, rows })
}
