mod common;

use std::collections::BTreeSet;

use ffb_core::dataset;
use ffb_core::metrics::{evaluate, pairwise_gap, EvalOptions};
use ffb_core::pruning::{
    activation_bias, prune_sweep, Calibration, CalibrationSample, PruneConfig, PruneError, PruneMethod,
    DEFAULT_SWEEP_RATES,
};
use ffb_core::records::Thresholds;
use ffb_core::report::{render_sweep, ReportFormat};
use ffb_core::synth::{self, toy, SynthSpec};
use ffb_core::tensor::{Layer, Linear, Model, TapPoint, Tensor};
use ffb_core::thresholds::{evaluate_with_plan, ThresholdPlan};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

fn half() -> Thresholds {
    Thresholds::Global(0.5)
}

#[test]
fn tpr_row_gap() {
    let rates = [("C", 0.7764), ("As", 0.7365), ("Af", 0.6289), ("I", 0.6801)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    assert!((pairwise_gap(&rates).unwrap() - 0.1475).abs() < 1e-12);
}

#[test]
fn offset_cohort_hides_bias_from_naive_metrics() {
    for gap in [0.0, 0.1, 0.22, 0.4] {
        let cohort = synth::bias_offset_cohort(gap, 0.6, 500).unwrap();
        let r = evaluate(&cohort, &half(), &EvalOptions::default()).unwrap();
        let brute = ref_metrics(cohort.records(), &|_| 0.5);
        assert!((brute.aadpd - gap * 2.0 / 3.0).abs() < 1e-12, "gap {gap}: {}", brute.aadpd);
        assert!((r.approach_averaged.aadpd - gap * 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(brute.dpd, 0.0);
        assert_eq!(r.naive.dpd, 0.0);
        if gap == 0.0 {
            assert!(r.metric_values()[..12].iter().all(|(_, v)| *v == 0.0));
        }
    }
}

#[test]
fn distortion_cohort_edge_cases() {
    let zero = synth::aggregation_distortion_cohort(0.2, 0.8, 0.0, 500).unwrap();
    let r = evaluate(&zero, &half(), &EvalOptions::default()).unwrap();
    assert_eq!(r.utility_regularized.urdeo, 0.0);

    let flat = synth::aggregation_distortion_cohort(0.5, 0.5, 0.1, 500).unwrap();
    let r = evaluate(&flat, &half(), &EvalOptions::default()).unwrap();
    assert!((r.utility_regularized.urdeo - 0.1 / 0.5).abs() < 1e-12);
}

#[test]
fn best_threshold_cohort_std_and_dpd() {
    let cohort = SynthSpec::from_json(synth::bundled("table6_best").unwrap()).unwrap().generate().unwrap();
    let plan = ThresholdPlan::from_json(synth::bundled("table6_best_thresholds").unwrap()).unwrap();
    let r = evaluate_with_plan(&cohort, &plan, &EvalOptions::default()).unwrap();
    assert!((r.approach_averaged.aastd - 0.0220).abs() <= 5e-4);
    assert!((r.approach_averaged.aadpd - 0.0544).abs() <= 5e-4);
}

fn single_linear(inputs: &[(&str, f32)]) -> (Model, Calibration) {
    let model = Model::new(
        "lin",
        "1",
        vec![1],
        vec![Layer::Linear(Linear {
            weight: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            bias: vec![0.0],
        })],
    )
    .unwrap();
    let samples = inputs
        .iter()
        .map(|(race, x)| CalibrationSample {
            race: race.to_string(),
            input: Tensor::new(vec![1], vec![*x]).unwrap(),
        })
        .collect();
    (model, Calibration::new(samples))
}

#[test]
fn identical_activations_have_zero_bias() {
    let (model, calib) = single_linear(&[("A", 0.7), ("B", 0.7), ("C", -0.7)]);
    let profile = activation_bias(&model, &calib, &PruneConfig::default()).unwrap();
    assert_eq!(profile.layers[&0].bias, vec![0.0]);
}

#[test]
fn four_race_bias_is_population_std() {
    let (model, calib) = single_linear(&[("A", 1.0), ("B", 2.0), ("C", 3.0), ("D", 4.0)]);
    let profile = activation_bias(&model, &calib, &PruneConfig::default()).unwrap();
    assert_eq!(profile.layers[&0].z, vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]]);
    assert!((profile.layers[&0].bias[0] - 1.25f64.sqrt()).abs() < 1e-12);
}

#[test]
fn calibration_needs_two_populated_races() {
    let (model, calib) = single_linear(&[("A", 1.0), ("A", 2.0)]);
    assert!(matches!(
        activation_bias(&model, &calib, &PruneConfig::default()),
        Err(PruneError::TooFewRaces { found: 1 })
    ));
}

#[test]
fn taps_match_layer_by_layer_execution() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = toy::ToyConfig { min_prunable: 3, ..Default::default() };
    for _ in 0..20 {
        let model = toy::random_model(&mut rng, &cfg);
        let calib = toy::random_calibration(&mut rng, model.input_shape(), &["A", "B"], 2);
        let taps: BTreeSet<usize> = ref_prunable(&model, true).into_iter().collect();
        for s in calib.samples() {
            let (score, recorded) = model.forward_with_taps(&s.input, &taps, TapPoint::PreActivation).unwrap();
            let (_, none) = model.forward_with_taps(&s.input, &BTreeSet::new(), TapPoint::PreActivation).unwrap();
            assert!(none.is_empty());
            assert_eq!(score, model.score(&s.input).unwrap());
            let reference = ref_forward_all(&model, &s.input);
            for (l, t) in &recorded {
                assert_eq!(t.shape(), reference[*l].shape.as_slice());
                for (g, w) in t.data().iter().zip(&reference[*l].data) {
                    assert!(close(f64::from(*g), *w, 1e-5), "layer {l}: {g} vs {w}");
                }
            }
        }
    }
}

fn sweep_fixture() -> (Model, Calibration, Vec<ffb_core::pruning::EvalSample>, Thresholds) {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let cfg = toy::ToyConfig { min_prunable: 3, ..Default::default() };
    let f = toy::random_fixture(&mut rng, &cfg, &["A", "B", "C"], &["F1"], 6, 12, 100).unwrap();
    (f.model, f.calibration, f.eval, f.plan.thresholds())
}

#[test]
fn sweep_grid_shape() {
    let (model, calib, eval, plan) = sweep_fixture();
    let opts = EvalOptions::default();
    let grid = prune_sweep(
        &model,
        Some(&calib),
        &PruneMethod::ALL,
        &DEFAULT_SWEEP_RATES,
        &eval,
        &plan,
        &opts,
        &PruneConfig::default(),
    )
    .unwrap();
    assert_eq!(grid.rows.len(), 3 * 7);
    for method in PruneMethod::ALL {
        let rates: Vec<f64> = grid.rows.iter().filter(|r| r.method == method).map(|r| r.rate).collect();
        assert_eq!(rates, DEFAULT_SWEEP_RATES);
    }
    let csv = render_sweep(&grid, ReportFormat::Csv);
    assert_eq!(csv.lines().count(), 1 + 1 + 21);
}

#[test]
fn rate_zero_sweep_is_the_baseline() {
    let (model, _, eval, plan) = sweep_fixture();
    let opts = EvalOptions::default();
    // no calibration needed when nothing is pruned
    let grid = prune_sweep(&model, None, &PruneMethod::ALL, &[0.0], &eval, &plan, &opts, &PruneConfig::default())
        .unwrap();
    assert_eq!(grid.rows.len(), 3);
    assert!(grid.rows.iter().all(|r| r.report.as_ref() == Some(&grid.baseline) && r.pruned_weights == 0));
    assert_eq!(render_sweep(&grid, ReportFormat::Csv).lines().count(), 2);
    assert!(matches!(
        prune_sweep(&model, None, &[], &[0.1], &eval, &plan, &opts, &PruneConfig::default()),
        Err(PruneError::EmptySweep)
    ));
}

#[test]
fn dataset_directories_roundtrip() {
    let (model, calib, eval, _) = sweep_fixture();
    let dir = tempfile::tempdir().unwrap();
    dataset::write_calibration(&dir.path().join("calib"), &calib).unwrap();
    dataset::write_eval_set(&dir.path().join("eval"), &eval).unwrap();
    let calib_back = dataset::load_calibration(&dir.path().join("calib")).unwrap();
    assert_eq!(calib_back.samples(), calib.samples());
    let eval_back = dataset::load_eval_set(&dir.path().join("eval").join(dataset::MANIFEST_NAME)).unwrap();
    assert_eq!(eval_back, eval);
    assert_eq!(
        activation_bias(&model, &calib_back, &PruneConfig::default()).unwrap(),
        activation_bias(&model, &calib, &PruneConfig::default()).unwrap()
    );

    std::fs::write(dir.path().join("bad.jsonl"), "{\"file\": \"x.ften\"}\n").unwrap();
    let err = dataset::load_calibration(&dir.path().join("bad.jsonl")).unwrap_err();
    assert!(err.to_string().contains("line 1"), "{err}");
}
