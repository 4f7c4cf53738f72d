//! Random desk-scale networks, calibration sets and evaluation sets.

use rand::Rng;

use crate::metrics::EvalOptions;
use crate::pruning::{score_samples, Calibration, CalibrationSample, EvalSample};
use crate::records::REAL_FACE;
use crate::thresholds::{evaluate_with_plan, plan_thresholds, ThresholdPlan};
use crate::tensor::{BatchNorm, Conv2d, Layer, Linear, Model, Pool, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyConfig {
    /// Lower bound on conv2d + linear layers.
    pub min_prunable: usize,
    /// Upper bound on conv2d + linear layers.
    pub max_prunable: usize,
    /// Upper bound on filters per conv layer and units per hidden linear layer.
    pub max_filters: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            min_prunable: 1,
            max_prunable: 4,
            max_filters: 16,
        }
    }
}

fn uniform_vec<R: Rng>(rng: &mut R, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn weight<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let scale = 1.0 / (fan_in as f32).sqrt();
    let numel = shape.iter().product();
    Tensor::new(shape, uniform_vec(rng, numel, -scale, scale)).expect("finite random weights")
}

/// Random sequential detector ending in a single logit (optionally a sigmoid).
pub fn random_model<R: Rng>(rng: &mut R, cfg: &ToyConfig) -> Model {
    let c_in = rng.gen_range(1..=3);
    let mut shape = vec![c_in, rng.gen_range(4..=8), rng.gen_range(4..=8)];
    let input_shape = shape.clone();
    let max = cfg.max_prunable.max(1);
    let prunable = rng.gen_range(cfg.min_prunable.clamp(1, max)..=max);
    let n_conv = rng.gen_range(0..prunable);
    let n_hidden = prunable - 1 - n_conv;
    let mut layers = Vec::new();

    for _ in 0..n_conv {
        let padding = rng.gen_range(0..=1);
        let max_k = 3.min(shape[1] + 2 * padding).min(shape[2] + 2 * padding);
        let k = rng.gen_range(1..=max_k);
        let filters = rng.gen_range(1..=cfg.max_filters);
        let conv = Conv2d {
            weight: weight(rng, vec![filters, shape[0], k, k], shape[0] * k * k),
            bias: uniform_vec(rng, filters, -0.1, 0.1),
            stride: rng.gen_range(1..=2),
            padding,
        };
        let layer = Layer::Conv2d(conv);
        shape = layer.output_shape(&shape).expect("kernel chosen to fit");
        layers.push(layer);
        if rng.gen_bool(0.3) {
            layers.push(Layer::BatchNorm(BatchNorm {
                mean: uniform_vec(rng, filters, -0.5, 0.5),
                var: uniform_vec(rng, filters, 0.5, 2.0),
                gamma: uniform_vec(rng, filters, 0.5, 1.5),
                beta: uniform_vec(rng, filters, -0.2, 0.2),
                eps: 1e-5,
            }));
        }
        if rng.gen_bool(0.8) {
            layers.push(Layer::Relu);
        }
        if shape[1] >= 2 && shape[2] >= 2 && rng.gen_bool(0.3) {
            let pool = Pool { window: 2, stride: rng.gen_range(1..=2) };
            let layer = if rng.gen_bool(0.5) {
                Layer::MaxPool(pool)
            } else {
                Layer::AvgPool(pool)
            };
            shape = layer.output_shape(&shape).expect("window fits");
            layers.push(layer);
        }
    }
    layers.push(Layer::Flatten);
    let mut width: usize = shape.iter().product();
    for _ in 0..n_hidden {
        let out = rng.gen_range(1..=cfg.max_filters);
        layers.push(Layer::Linear(Linear {
            weight: weight(rng, vec![out, width], width),
            bias: uniform_vec(rng, out, -0.1, 0.1),
        }));
        layers.push(Layer::Relu);
        width = out;
    }
    layers.push(Layer::Linear(Linear {
        weight: weight(rng, vec![1, width], width),
        bias: uniform_vec(rng, 1, -0.1, 0.1),
    }));
    if rng.gen_bool(0.5) {
        layers.push(Layer::Sigmoid);
    }
    Model::new("toy", "1", input_shape, layers).expect("generator keeps shapes consistent")
}

/// Input drawn around a per-group offset so groups produce different activations.
fn shifted_input<R: Rng>(rng: &mut R, shape: &[usize], offset: f32, spread: f32) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| offset + rng.gen_range(-spread..spread)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite input")
}

/// Between 1 and `max_per_race` samples per race.
pub fn random_calibration<R: Rng>(rng: &mut R, input_shape: &[usize], races: &[&str], max_per_race: usize) -> Calibration {
    let mut samples = Vec::new();
    for race in races {
        let offset = rng.gen_range(-1.0..1.0);
        let spread = rng.gen_range(0.5..1.5);
        for _ in 0..rng.gen_range(1..=max_per_race.max(1)) {
            samples.push(CalibrationSample {
                race: race.to_string(),
                input: shifted_input(rng, input_shape, offset, spread),
            });
        }
    }
    Calibration::with_races(races.iter().map(|r| r.to_string()).collect(), samples)
        .expect("samples use declared races")
}

/// `n_per_cell` samples for every race × approach; forgeries get an extra input shift.
pub fn random_eval_set<R: Rng>(
    rng: &mut R,
    input_shape: &[usize],
    races: &[&str],
    fake_approaches: &[&str],
    n_per_cell: usize,
) -> Vec<EvalSample> {
    let mut out = Vec::new();
    for race in races {
        let race_offset = rng.gen_range(-0.5..0.5);
        for approach in std::iter::once(&REAL_FACE).chain(fake_approaches) {
            let fake = *approach != REAL_FACE;
            let shift = if fake { rng.gen_range(0.5..1.5) } else { 0.0 };
            for i in 0..n_per_cell {
                out.push(EvalSample {
                    id: format!("{race}/{approach}/{i}"),
                    race: race.to_string(),
                    approach: approach.to_string(),
                    label: u8::from(fake),
                    input: shifted_input(rng, input_shape, race_offset + shift, 1.0),
                });
            }
        }
    }
    out
}

/// A toy model together with data it can be evaluated on.
#[derive(Debug, Clone)]
pub struct ToyFixture {
    pub model: Model,
    pub calibration: Calibration,
    pub eval: Vec<EvalSample>,
    /// Per-race thresholds fitted to the unpruned model.
    pub plan: ThresholdPlan,
}

/// Draws models until one separates real from fake on its evaluation set
/// (AUC above `min_auc`) and the full report is defined under the fitted
/// plan. Gives up after `attempts` draws.
pub fn random_fixture<R: Rng>(
    rng: &mut R,
    cfg: &ToyConfig,
    races: &[&str],
    fake_approaches: &[&str],
    calib_per_race: usize,
    eval_per_cell: usize,
    attempts: usize,
) -> Option<ToyFixture> {
    const MIN_AUC: f64 = 0.6;
    for _ in 0..attempts {
        let model = random_model(rng, cfg);
        let calibration = random_calibration(rng, model.input_shape(), races, calib_per_race);
        let eval = random_eval_set(rng, model.input_shape(), races, fake_approaches, eval_per_cell);
        let Ok(cohort) = score_samples(&model, &eval) else { continue };
        let Ok(plan) = plan_thresholds(&cohort) else { continue };
        match evaluate_with_plan(&cohort, &plan, &EvalOptions::default()) {
            Ok(report) if report.utility.auc > MIN_AUC => {
                return Some(ToyFixture {
                    model,
                    calibration,
                    eval,
                    plan,
                })
            }
            _ => {}
        }
    }
    None
}
