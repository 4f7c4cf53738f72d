//! Independent reference implementations used as test oracles.
//!
//! Everything here recomputes from first principles in f64 with plain
//! nested loops. Nothing in this module calls into the metric, threshold,
//! tensor-kernel or pruning code it is used to check.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use ffb_core::pruning::{Calibration, PruneMethod};
use ffb_core::records::{Cohort, PredictionRecord, REAL_FACE};
use ffb_core::tensor::{Layer, Model, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

// ---------------------------------------------------------------- tensors

#[derive(Debug, Clone)]
pub struct RefTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl RefTensor {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| f64::from(v)).collect(),
        }
    }
}

fn w64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

pub fn ref_conv2d(x: &RefTensor, weight: &Tensor, bias: &[f32], stride: usize, padding: usize) -> RefTensor {
    let (c_in, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let ws = weight.shape();
    let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
    assert_eq!(ws[1], c_in);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let wd = w64(weight);
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = f64::from(bias[co]);
                for ci in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = x.data[(ci * h + iy as usize) * w + ix as usize];
                            let wv = wd[((co * c_in + ci) * kh + ky) * kw + kx];
                            acc += xv * wv;
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    RefTensor {
        shape: vec![c_out, oh, ow],
        data: out,
    }
}

pub fn ref_linear(x: &RefTensor, weight: &Tensor, bias: &[f32]) -> RefTensor {
    let (n_out, n_in) = (weight.shape()[0], weight.shape()[1]);
    assert_eq!(x.data.len(), n_in);
    let wd = w64(weight);
    let data = (0..n_out)
        .map(|o| {
            let mut acc = f64::from(bias[o]);
            for i in 0..n_in {
                acc += wd[o * n_in + i] * x.data[i];
            }
            acc
        })
        .collect();
    RefTensor {
        shape: vec![n_out],
        data,
    }
}

pub fn ref_pool(x: &RefTensor, window: usize, stride: usize, max: bool) -> RefTensor {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut vals = Vec::new();
                for dy in 0..window {
                    for dx in 0..window {
                        vals.push(x.data[(ch * h + oy * stride + dy) * w + ox * stride + dx]);
                    }
                }
                out.push(if max {
                    vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                });
            }
        }
    }
    RefTensor {
        shape: vec![c, oh, ow],
        data: out,
    }
}

pub fn ref_layer(layer: &Layer, x: &RefTensor) -> RefTensor {
    match layer {
        Layer::Conv2d(c) => ref_conv2d(x, &c.weight, &c.bias, c.stride, c.padding),
        Layer::Linear(l) => ref_linear(x, &l.weight, &l.bias),
        Layer::Relu => RefTensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        },
        Layer::Sigmoid => RefTensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
        },
        Layer::MaxPool(p) => ref_pool(x, p.window, p.stride, true),
        Layer::AvgPool(p) => ref_pool(x, p.window, p.stride, false),
        Layer::Flatten => RefTensor {
            shape: vec![x.data.len()],
            data: x.data.clone(),
        },
        Layer::BatchNorm(bn) => {
            let c = x.shape[0];
            let per = x.data.len() / c;
            let data = x
                .data
                .iter()
                .enumerate()
                .map(|(k, &v)| {
                    let ch = k / per;
                    let (m, var) = (f64::from(bn.mean[ch]), f64::from(bn.var[ch]));
                    (v - m) / (var + f64::from(bn.eps)).sqrt() * f64::from(bn.gamma[ch]) + f64::from(bn.beta[ch])
                })
                .collect();
            RefTensor {
                shape: x.shape.clone(),
                data,
            }
        }
    }
}

/// Output of every layer, in order.
pub fn ref_forward_all(model: &Model, input: &Tensor) -> Vec<RefTensor> {
    let mut x = RefTensor::from_tensor(input);
    let mut outs = Vec::new();
    for layer in model.layers() {
        x = ref_layer(layer, &x);
        outs.push(x.clone());
    }
    outs
}

pub fn ref_score(model: &Model, input: &Tensor) -> f64 {
    let outs = ref_forward_all(model, input);
    let v = outs.last().unwrap().data[0];
    match model.layers().last() {
        Some(Layer::Sigmoid) => v,
        _ => 1.0 / (1.0 + (-v).exp()),
    }
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1f64.max(b.abs())
}

// ---------------------------------------------------------------- pruning

pub fn ref_prunable(model: &Model, include_linear: bool) -> Vec<usize> {
    model
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Conv2d(_)) || (include_linear && matches!(l, Layer::Linear(_))))
        .map(|(i, _)| i)
        .collect()
}

fn two_pass_std(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// layer -> (z[race][unit], bias[unit]) from pre-activation outputs.
pub fn ref_activation_bias(model: &Model, calib: &Calibration) -> BTreeMap<usize, (Vec<Vec<f64>>, Vec<f64>)> {
    let races: Vec<String> = calib.samples().iter().map(|s| s.race.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let outputs: Vec<(String, Vec<RefTensor>)> = calib
        .samples()
        .iter()
        .map(|s| (s.race.clone(), ref_forward_all(model, &s.input)))
        .collect();
    let mut out = BTreeMap::new();
    for l in ref_prunable(model, true) {
        let units = outputs[0].1[l].shape[0];
        let mut z = Vec::new();
        for race in &races {
            let mut row = vec![0.0; units];
            let mut n = 0usize;
            for (r, outs) in &outputs {
                if r != race {
                    continue;
                }
                n += 1;
                let t = &outs[l];
                let per = t.data.len() / units;
                for (u, acc) in row.iter_mut().enumerate() {
                    let mut sq = 0.0;
                    for k in 0..per {
                        sq += t.data[u * per + k] * t.data[u * per + k];
                    }
                    *acc += sq.sqrt();
                }
            }
            for v in &mut row {
                *v /= n as f64;
            }
            z.push(row);
        }
        let bias = (0..units)
            .map(|u| two_pass_std(&z.iter().map(|row| row[u]).collect::<Vec<_>>()))
            .collect();
        out.insert(l, (z, bias));
    }
    out
}

pub fn ref_scores(weight: &Tensor, bias: &[f64], method: PruneMethod) -> Vec<f64> {
    let units = weight.shape()[0];
    let per = weight.numel() / units;
    let mut out = Vec::with_capacity(weight.numel());
    for u in 0..units {
        for k in 0..per {
            let w = f64::from(weight.data()[u * per + k]).abs();
            out.push(match method {
                PruneMethod::Weig => w,
                PruneMethod::Bpfa if bias[u] == 0.0 => f64::INFINITY,
                PruneMethod::Bpfa => w / bias[u],
                PruneMethod::Roba if bias[u] == 0.0 => f64::INFINITY,
                PruneMethod::Roba => 1.0 / bias[u],
            });
        }
    }
    out
}

/// Indices of the `k` smallest (score, |w|, index) triples.
pub fn ref_select(scores: &[f64], weights: &[f32], k: usize) -> BTreeSet<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap()
            .then(weights[a].abs().partial_cmp(&weights[b].abs()).unwrap())
            .then(a.cmp(&b))
    });
    idx.into_iter().take(k).collect()
}

// ---------------------------------------------------------------- metrics

#[derive(Debug, Clone, PartialEq)]
pub struct RefMetrics {
    pub dpd: f64,
    pub deodds: f64,
    pub deo: f64,
    pub std: f64,
    pub aadpd: f64,
    pub aadeodds: f64,
    pub aadeo: f64,
    pub aastd: f64,
    pub urdpd: f64,
    pub urdeodds: f64,
    pub urdeo: f64,
    pub urstd: f64,
    pub auc: f64,
    pub acc: f64,
}

impl RefMetrics {
    pub fn values(&self) -> [f64; 14] {
        [
            self.dpd, self.deodds, self.deo, self.std, self.aadpd, self.aadeodds, self.aadeo, self.aastd, self.urdpd,
            self.urdeodds, self.urdeo, self.urstd, self.auc, self.acc,
        ]
    }
}

fn spread(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    max - min
}

fn avg(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Brute-force metrics straight from the records. Every cell must be non-empty.
pub fn ref_metrics(records: &[PredictionRecord], threshold: &dyn Fn(&str) -> f64) -> RefMetrics {
    let races: Vec<&str> = records.iter().map(|r| r.race.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    let approaches: Vec<&str> =
        records.iter().map(|r| r.approach.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    let fakes: Vec<&str> = approaches.iter().copied().filter(|a| *a != REAL_FACE).collect();
    let pred = |r: &PredictionRecord| r.score >= threshold(&r.race);

    let rate = |race: &str, keep: &dyn Fn(&PredictionRecord) -> bool| {
        let sel: Vec<&PredictionRecord> = records.iter().filter(|r| r.race == race && keep(r)).collect();
        sel.iter().filter(|r| pred(r)).count() as f64 / sel.len() as f64
    };
    let acc = |race: &str, keep: &dyn Fn(&PredictionRecord) -> bool| {
        let sel: Vec<&PredictionRecord> = records.iter().filter(|r| r.race == race && keep(r)).collect();
        sel.iter().filter(|r| pred(r) == (r.label == 1)).count() as f64 / sel.len() as f64
    };

    let dpd = spread(&races.iter().map(|s| rate(s, &|_| true)).collect::<Vec<_>>());
    let fpr_gap = spread(&races.iter().map(|s| rate(s, &|r| r.label == 0)).collect::<Vec<_>>());
    let deo = spread(&races.iter().map(|s| rate(s, &|r| r.label == 1)).collect::<Vec<_>>());
    let std = two_pass_std(&races.iter().map(|s| acc(s, &|_| true)).collect::<Vec<_>>());

    let mut gap = BTreeMap::new();
    let mut std_f = BTreeMap::new();
    let mut acc_f = BTreeMap::new();
    for &f in &approaches {
        let rates: Vec<f64> = races.iter().map(|s| rate(s, &|r| r.approach == f)).collect();
        let accs: Vec<f64> = races.iter().map(|s| acc(s, &|r| r.approach == f)).collect();
        gap.insert(f, spread(&rates));
        std_f.insert(f, two_pass_std(&accs));
        acc_f.insert(f, avg(&accs));
    }
    let aadpd = avg(&approaches.iter().map(|f| gap[f]).collect::<Vec<_>>());
    let aadeo = avg(&fakes.iter().map(|f| gap[f]).collect::<Vec<_>>());
    let aastd = avg(&approaches.iter().map(|f| std_f[f]).collect::<Vec<_>>());
    let urdpd = avg(&approaches.iter().map(|f| gap[f] / acc_f[f]).collect::<Vec<_>>());
    let urdeo = avg(&fakes.iter().map(|f| gap[f] / acc_f[f]).collect::<Vec<_>>());
    let urstd = avg(&approaches.iter().map(|f| std_f[f] / acc_f[f]).collect::<Vec<_>>());

    let pos: Vec<f64> = records.iter().filter(|r| r.label == 1).map(|r| r.score).collect();
    let neg: Vec<f64> = records.iter().filter(|r| r.label == 0).map(|r| r.score).collect();
    let correct = records.iter().filter(|r| pred(r) == (r.label == 1)).count();

    RefMetrics {
        dpd,
        deodds: 0.5 * (fpr_gap + deo),
        deo,
        std,
        aadpd,
        aadeodds: 0.5 * (gap[REAL_FACE] + aadeo),
        aadeo,
        aastd,
        urdpd,
        urdeodds: 0.5 * (gap[REAL_FACE] / acc_f[REAL_FACE] + urdeo),
        urdeo,
        urstd,
        auc: ref_auc(&pos, &neg),
        acc: correct as f64 / records.len() as f64,
    }
}

/// O(n²) Mann-Whitney AUC with ties counted as one half.
pub fn ref_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0f64;
    for &p in pos {
        for &n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() as f64 * neg.len() as f64)
}

/// Tries every candidate (0, midpoints of adjacent distinct scores, 1);
/// first maximum wins.
pub fn ref_optimal_threshold(records: &[&PredictionRecord]) -> (f64, f64) {
    let mut distinct: Vec<f64> = records.iter().map(|r| r.score).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let mut cands = vec![0.0];
    for i in 1..distinct.len() {
        let mid = (distinct[i - 1] + distinct[i]) / 2.0;
        cands.push(if mid > distinct[i - 1] { mid } else { distinct[i] });
    }
    cands.push(1.0);
    let mut best = (f64::NAN, -1.0);
    for &t in &cands {
        let correct = records.iter().filter(|r| (r.score >= t) == (r.label == 1)).count();
        let a = correct as f64 / records.len() as f64;
        if a > best.1 {
            best = (t, a);
        }
    }
    best
}

// ---------------------------------------------------------------- cohorts

pub const SCORE_GRID: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

pub fn record(id: String, score: f64, race: &str, approach: &str) -> PredictionRecord {
    PredictionRecord {
        id,
        score,
        label: u8::from(approach != REAL_FACE),
        race: race.to_string(),
        approach: approach.to_string(),
    }
}

/// Random cohort with every (race, approach) cell non-empty and containing at
/// least one record classified correctly at 0.5. Scores come from a coarse
/// grid so ties are common.
pub fn random_cohort<R: Rng>(rng: &mut R) -> Cohort {
    let n_races = rng.gen_range(2..=4);
    let n_fakes = rng.gen_range(1..=3);
    let mut records = Vec::new();
    for s in 0..n_races {
        let race = format!("R{s}");
        for f in 0..=n_fakes {
            let approach = if f == 0 { REAL_FACE.to_string() } else { format!("F{f}") };
            let n = rng.gen_range(1..=12);
            for i in 0..n {
                let score = if i == 0 {
                    if f == 0 { 0.1 } else { 0.9 }
                } else {
                    *SCORE_GRID.choose(rng).unwrap()
                };
                records.push(record(format!("{race}/{approach}/{i}"), score, &race, &approach));
            }
        }
    }
    records.shuffle(rng);
    Cohort::new(records).unwrap()
}

/// Equal cell counts for every (race, approach).
pub fn random_balanced_cohort<R: Rng>(rng: &mut R) -> Cohort {
    let n_races = rng.gen_range(2..=4);
    let n_fakes = rng.gen_range(1..=3);
    let n = rng.gen_range(1..=10);
    let mut records = Vec::new();
    for s in 0..n_races {
        let race = format!("R{s}");
        for f in 0..=n_fakes {
            let approach = if f == 0 { REAL_FACE.to_string() } else { format!("F{f}") };
            for i in 0..n {
                let score = if i == 0 {
                    if f == 0 { 0.1 } else { 0.9 }
                } else {
                    *SCORE_GRID.choose(rng).unwrap()
                };
                records.push(record(format!("{race}/{approach}/{i}"), score, &race, &approach));
            }
        }
    }
    Cohort::new(records).unwrap()
}
