use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ffb_core::dataset;
use ffb_core::metrics::{evaluate, EvalOptions};
use ffb_core::pruning::{
    apply_pruning, prune_sweep, write_mask, Calibration, PruneConfig, PruneMethod, DEFAULT_SWEEP_RATES,
};
use ffb_core::records::{parse_records, write_records, Cohort, Thresholds};
use ffb_core::report::{render, render_sweep, ReportBundle};
use ffb_core::synth::{self, toy, SynthSpec};
use ffb_core::tensor::{read_model, write_model, Model, TapPoint};
use ffb_core::thresholds::{plan_thresholds, score_histogram, ThresholdPlan};

use crate::{Command, EvalArgs, PruneArgs, PruneConfigArgs, RenderArgs, SweepArgs, SynthArgs, Tap, ThresholdArgs,
    ThresholdSource, ToyArgs};

/// Invalid flag combination detected after parsing; exits with 64.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Eval(a) => eval(a),
        Command::Threshold(a) => threshold(a),
        Command::Prune(a) => prune(a),
        Command::Sweep(a) => sweep(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Toy(a) => toy_cmd(a),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn load_cohort(path: &Path) -> Result<Cohort> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    parse_records(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn load_thresholds(source: &ThresholdSource) -> Result<Thresholds> {
    match (&source.threshold, &source.thresholds) {
        (Some(_), Some(_)) => Err(UsageError("--threshold and --thresholds are mutually exclusive".into()).into()),
        (_, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let plan = ThresholdPlan::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
            Ok(plan.thresholds())
        }
        (Some(t), None) => Ok(Thresholds::Global(*t)),
        (None, None) => Ok(Thresholds::Global(0.5)),
    }
}

fn load_model(path: &Path) -> Result<Model> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_model(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn save_model(path: &Path, model: &Model) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

fn load_calibration(path: Option<&PathBuf>) -> Result<Option<Calibration>> {
    path.map(|p| dataset::load_calibration(p).with_context(|| format!("loading calibration {}", p.display())))
        .transpose()
}

fn prune_config(args: &PruneConfigArgs) -> PruneConfig {
    PruneConfig {
        include_linear: !args.conv_only,
        tap_point: match args.tap {
            Tap::Pre => TapPoint::PreActivation,
            Tap::Post => TapPoint::PostActivation,
        },
    }
}

fn run_name(name: Option<String>, path: &Path) -> String {
    name.unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    })
}

fn eval(args: EvalArgs) -> Result<()> {
    let thresholds = load_thresholds(&args.source)?;
    let cohort = load_cohort(&args.records)?;
    let opts = EvalOptions {
        skip_missing: args.skip_missing,
    };
    let report = evaluate(&cohort, &thresholds, &opts)?;
    let bundle = ReportBundle::single(run_name(args.name, &args.records), report);
    emit(args.out.as_deref(), &render(&bundle, args.format.into())?)
}

fn threshold(args: ThresholdArgs) -> Result<()> {
    let cohort = load_cohort(&args.records)?;
    let plan = plan_thresholds(&cohort)?;
    for (race, thr) in &plan.per_race {
        log::info!("{race}: threshold {thr}");
    }
    if let Some(path) = &args.histogram {
        let hist = score_histogram(&cohort, args.bins)?;
        let text = serde_json::to_string_pretty(&hist)? + "\n";
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    emit(args.out.as_deref(), &(plan.to_json() + "\n"))
}

fn prune(args: PruneArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let method: PruneMethod = args.method.into();
    let calibration = load_calibration(args.calib.as_ref())?;
    let cfg = prune_config(&args.config);
    let outcome = apply_pruning(&model, calibration.as_ref(), method, args.rate, &cfg)?;

    save_model(&args.out, &outcome.model)?;
    let mask_path = args.mask.unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".mask");
        PathBuf::from(p)
    });
    let mut w = BufWriter::new(File::create(&mask_path).with_context(|| format!("creating {}", mask_path.display()))?);
    write_mask(&mut w, &outcome.mask)?;
    w.flush()?;

    let mut stdout = std::io::stdout().lock();
    for (layer, lm) in &outcome.mask.layers {
        writeln!(
            stdout,
            "layer {layer} ({}): pruned {} / {}",
            model.layers()[*layer].kind(),
            lm.count(),
            lm.pruned.len()
        )?;
    }
    writeln!(stdout, "total: pruned {} weights ({method}, rate {})", outcome.mask.total_pruned(), args.rate)?;
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    if args.methods.is_empty() {
        return Err(UsageError("--methods needs at least one method".into()).into());
    }
    let thresholds = load_thresholds(&args.source)?;
    let model = load_model(&args.model)?;
    let eval_set = dataset::load_eval_set(&args.eval_set)
        .with_context(|| format!("loading evaluation set {}", args.eval_set.display()))?;
    let calibration = load_calibration(args.calib.as_ref())?;
    let methods: Vec<PruneMethod> = args.methods.iter().map(|&m| m.into()).collect();
    let rates = args.rates.unwrap_or_else(|| DEFAULT_SWEEP_RATES.to_vec());
    let opts = EvalOptions {
        skip_missing: args.skip_missing,
    };
    let grid = prune_sweep(
        &model,
        calibration.as_ref(),
        &methods,
        &rates,
        &eval_set,
        &thresholds,
        &opts,
        &prune_config(&args.config),
    )?;
    for row in grid.rows.iter().filter(|r| !r.usable) {
        log::warn!(
            "{} at rate {}: unusable{}",
            row.method,
            row.rate,
            row.note.as_deref().map(|n| format!(" ({n})")).unwrap_or_default()
        );
    }
    emit(args.out.as_deref(), &render_sweep(&grid, args.format.into()))
}

fn synth_cmd(args: SynthArgs) -> Result<()> {
    let text = match (&args.spec, &args.bundled) {
        (Some(path), None) => fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        (None, Some(name)) => match synth::bundled(name) {
            Some(text) => text.to_string(),
            None => {
                let names: Vec<&str> = synth::BUNDLED_SPECS.iter().map(|(n, _)| *n).collect();
                bail!(UsageError(format!("unknown bundled spec `{name}` (available: {})", names.join(", "))));
            }
        },
        _ => bail!(UsageError("give either a spec file or --bundled".into())),
    };
    let mut value: serde_json::Value = serde_json::from_str(&text).context("invalid synth spec")?;
    if let Some(seed) = args.seed {
        match value.as_object_mut() {
            Some(obj) => {
                obj.insert("seed".into(), seed.into());
            }
            None => bail!("invalid synth spec: expected a JSON object"),
        }
    }
    let spec = SynthSpec::from_json(&value.to_string())?;
    let cohort = spec.generate()?;
    log::info!("generated {} records", cohort.len());

    let mut buf = Vec::new();
    write_records(&mut buf, cohort.records())?;
    match &args.out {
        Some(path) => fs::write(path, &buf).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(&buf)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn render_cmd(args: RenderArgs) -> Result<()> {
    let mut reports = BTreeMap::new();
    for path in &args.bundles {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let bundle = ReportBundle::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
        for (name, report) in bundle.reports {
            if reports.insert(name.clone(), report).is_some() {
                bail!("run `{name}` appears in more than one bundle");
            }
        }
    }
    let merged = ReportBundle::new(reports);
    emit(args.out.as_deref(), &render(&merged, args.format.into())?)
}

fn toy_cmd(args: ToyArgs) -> Result<()> {
    if args.races.len() < 2 {
        bail!(UsageError("--races needs at least two races".into()));
    }
    if args.approaches.is_empty() || args.approaches.iter().any(|a| a == ffb_core::REAL_FACE) {
        bail!(UsageError(format!("--approaches lists fake approaches only (not {})", ffb_core::REAL_FACE)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let cfg = toy::ToyConfig {
        min_prunable: 3,
        ..toy::ToyConfig::default()
    };
    let races: Vec<&str> = args.races.iter().map(String::as_str).collect();
    let approaches: Vec<&str> = args.approaches.iter().map(String::as_str).collect();
    let Some(fixture) =
        toy::random_fixture(&mut rng, &cfg, &races, &approaches, args.calib_per_race, args.eval_per_cell, 1000)
    else {
        bail!("no usable toy detector found for seed {}", args.seed);
    };

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let model_path = args.out.join("model.ftm");
    save_model(&model_path, &fixture.model)?;
    dataset::write_calibration(&args.out.join("calib"), &fixture.calibration)?;
    dataset::write_eval_set(&args.out.join("eval"), &fixture.eval)?;
    fs::write(args.out.join("plan.json"), fixture.plan.to_json() + "\n")?;
    println!(
        "wrote {} (input {:?}, {} prunable layers), {} calibration and {} evaluation tensors, plan.json",
        model_path.display(),
        fixture.model.input_shape(),
        fixture.model.prunable_layers(true).len(),
        fixture.calibration.samples().len(),
        fixture.eval.len()
    );
    Ok(())
}
