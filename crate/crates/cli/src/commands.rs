use std::fs;
use std::path::Path;

use autoprobe::eval::experiment::{
    alpha_summary, evaluate_examples, resolve_split, run_ablation, run_experiment, run_sweep, EvalReport,
    ExperimentSpec, MethodResult,
};
use autoprobe::eval::oracle_search;
use autoprobe::eval::synth::{generate, SynthConfig};
use autoprobe::oracles::{label_dataset, load_units, OracleConfig, OracleRunner};
use autoprobe::predictor::predict;
use autoprobe::repr_store::{validate_manifest, write_dataset};
use autoprobe::train::{load_model, prepare_examples, save_model, train_on, ProbeCell, ProbeModel};
use autoprobe::{Dataset, Error, LabelKind, PositionRole, TokenStrategy};
use serde::Serialize;
use serde_json::json;

use crate::output::{emit, to_json, write_atomic_with, CliResult, Failure};
use crate::{Cli, Command, DatasetAction, Format, LabelArgs, PredictArgs, SynthArgs, TrainArgs};

pub fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.parallelism {
        if n == 0 {
            return Err(Failure::input("--parallelism must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    match &cli.command {
        Command::Dataset { action } => {
            json_only(cli, "dataset")?;
            match action {
                DatasetAction::Info { path } => dataset_info(cli, path),
                DatasetAction::Validate { path } => dataset_validate(cli, path),
            }
        }
        Command::Label(args) => {
            json_only(cli, "label")?;
            label(cli, args)
        }
        Command::Train(args) => {
            json_only(cli, "train")?;
            train(cli, args)
        }
        Command::Eval(args) => eval(cli, &args.dataset, &args.model, args.spec.as_deref()),
        Command::Predict(args) => predict_samples(cli, args),
        Command::OracleSearch(args) => {
            let (dataset, spec) = load_inputs(cli, &args.dataset, args.spec.as_deref())?;
            let table = oracle_search(&dataset, &spec)?;
            let mut report = partial_report(&dataset, &spec)?;
            if let Some(best) = table.first() {
                report.methods.push(MethodResult {
                    name: format!("oracle(L{}:{})", best.layer, best.position),
                    metrics: best.metrics,
                    alpha: None,
                });
            }
            report.oracle_table = Some(table);
            emit_report(cli, &report)
        }
        Command::Ablate(args) => {
            let (dataset, spec) = load_inputs(cli, &args.dataset, args.spec.as_deref())?;
            let (train_ids, test_ids) = resolve_split(&dataset, &spec)?;
            let axes = spec.ablation.clone().unwrap_or_default();
            let mut report = partial_report(&dataset, &spec)?;
            report.ablation = Some(run_ablation(&dataset, &spec, &axes, &train_ids, &test_ids));
            emit_report(cli, &report)
        }
        Command::Sweep(args) => {
            let (dataset, spec) = load_inputs(cli, &args.common.dataset, args.common.spec.as_deref())?;
            let (train_ids, test_ids) = resolve_split(&dataset, &spec)?;
            let mut report = partial_report(&dataset, &spec)?;
            report.sweep = Some(run_sweep(&dataset, &spec, &train_ids, &test_ids, &args.fractions)?);
            emit_report(cli, &report)
        }
        Command::Experiment(args) => {
            let (dataset, spec) = load_inputs(cli, &args.dataset, args.spec.as_deref())?;
            emit_report(cli, &run_experiment(&dataset, &spec)?)
        }
        Command::Synth(args) => {
            json_only(cli, "synth")?;
            synth(cli, args)
        }
    }
}

fn json_only(cli: &Cli, command: &str) -> CliResult<()> {
    match cli.format {
        Format::Json => Ok(()),
        Format::Csv => Err(Failure::input(format!("{command} has no csv output"))),
    }
}

fn open_dataset(path: &Path) -> CliResult<Dataset> {
    Dataset::open(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn open_model(path: &Path) -> CliResult<ProbeModel> {
    let file = fs::File::open(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    load_model(std::io::BufReader::new(file)).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn read_input(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

/// The experiment spec with `--seed` applied to training and to every
/// random token strategy.
fn load_spec(cli: &Cli, path: Option<&Path>) -> CliResult<ExperimentSpec> {
    let mut spec = match path {
        Some(p) => serde_json::from_slice::<ExperimentSpec>(&read_input(p)?)
            .map_err(|e| Failure::input(format!("{}: {e}", p.display())))?,
        None => ExperimentSpec::default(),
    };
    spec.train_config.seed = cli.seed;
    reseed(&mut spec.model.token_strategy, cli.seed);
    if let Some(axes) = &mut spec.ablation {
        for t in &mut axes.token_strategies {
            reseed(t, cli.seed);
        }
    }
    spec.train_config.validate()?;
    Ok(spec)
}

fn reseed(strategy: &mut TokenStrategy, seed: u64) {
    if let TokenStrategy::Random { seed: s } = strategy {
        *s = seed;
    }
}

fn load_inputs(cli: &Cli, dataset: &Path, spec: Option<&Path>) -> CliResult<(Dataset, ExperimentSpec)> {
    Ok((open_dataset(dataset)?, load_spec(cli, spec)?))
}

fn partial_report(dataset: &Dataset, spec: &ExperimentSpec) -> CliResult<EvalReport> {
    let (train_ids, test_ids) = resolve_split(dataset, spec)?;
    Ok(EvalReport {
        experiment: spec.name.clone(),
        spec_hash: spec.hash(),
        label_kind: spec.label_kind,
        train_size: train_ids.len(),
        test_size: test_ids.len(),
        methods: Vec::new(),
        oracle_table: None,
        sweep: None,
        ablation: None,
        wall_clock_seconds: None,
    })
}

fn emit_report(cli: &Cli, report: &EvalReport) -> CliResult<()> {
    let bytes = match cli.format {
        Format::Json => to_json(report)?,
        Format::Csv => report.to_csv()?.into_bytes(),
    };
    emit(cli.out.as_deref(), &bytes)
}

fn label_coverage(dataset: &Dataset) -> serde_json::Value {
    let mut coverage = serde_json::Map::new();
    for kind in LabelKind::ALL {
        let (mut zero, mut one, mut none) = (0usize, 0usize, 0usize);
        for s in dataset.samples() {
            match s.label(kind) {
                Some(0) => zero += 1,
                Some(_) => one += 1,
                None => none += 1,
            }
        }
        coverage.insert(kind.to_string(), json!({ "0": zero, "1": one, "unlabeled": none }));
    }
    serde_json::Value::Object(coverage)
}

fn dataset_summary(dataset: &Dataset) -> serde_json::Value {
    let m = dataset.manifest();
    json!({
        "format_version": m.format_version,
        "hidden_dim": m.hidden_dim,
        "model_layer_count": m.model_layer_count,
        "layers_stored": m.layers_stored,
        "positions_schema": m.positions_schema,
        "samples": m.samples.len(),
        "label_coverage": label_coverage(dataset),
    })
}

fn dataset_info(cli: &Cli, path: &Path) -> CliResult<()> {
    let dataset = open_dataset(path)?;
    let m = dataset.manifest();
    eprintln!(
        "{}: d={} L={} layers={:?} samples={}",
        path.display(),
        m.hidden_dim,
        m.model_layer_count,
        m.layers_stored,
        m.samples.len()
    );
    emit(cli.out.as_deref(), &to_json(&dataset_summary(&dataset))?)
}

fn dataset_validate(cli: &Cli, path: &Path) -> CliResult<()> {
    let dataset = open_dataset(path)?;
    let mut violations = validate_manifest(dataset.manifest());
    if let Err(e) = dataset.verify_payload() {
        violations.push(e.to_string());
    }
    let mut summary = dataset_summary(&dataset);
    summary["violations"] = json!(violations);
    emit(cli.out.as_deref(), &to_json(&summary)?)?;
    match violations.first() {
        None => Ok(()),
        Some(first) => Err(Failure::input(format!("{}: {first}", path.display()))),
    }
}

fn label(cli: &Cli, args: &LabelArgs) -> CliResult<()> {
    let kind: LabelKind = args.kind.parse()?;
    let target = match (&cli.out, cli.overwrite) {
        (Some(out), _) => out.clone(),
        (None, true) => args.dataset.clone(),
        (None, false) => {
            return Err(Failure::input(
                "label writes a new dataset: pass --out PATH, or --overwrite to replace the input",
            ))
        }
    };
    let dataset = open_dataset(&args.dataset)?;
    let mut config = OracleConfig::from_json(&read_input(&args.oracle_config)?)
        .map_err(|e| Failure::input(format!("{}: {e}", args.oracle_config.display())))?;
    if let Some(n) = cli.parallelism {
        config.parallelism = n;
    }
    let units = load_units(&args.units, dataset.manifest())?;
    let (manifest, report) = label_dataset(
        dataset.manifest(),
        &units,
        &config,
        kind,
        cli.overwrite,
        &OracleRunner::from_env(),
    )?;
    write_atomic_with(&target, |w| {
        dataset
            .write_with_manifest(&manifest, w)
            .map(|_| ())
            .map_err(Failure::from)
    })?;
    eprintln!("labeled dataset written to {}", target.display());
    emit(args.report.as_deref(), &to_json(&report)?)
}

fn train(cli: &Cli, args: &TrainArgs) -> CliResult<()> {
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| Failure::input("train needs --out for the model file"))?;
    let (dataset, spec) = load_inputs(cli, &args.dataset, args.spec.as_deref())?;
    let ids = spec.train.select(&dataset);
    if ids.is_empty() {
        return Err(Error::Empty("train filter selects no samples".into()).into());
    }
    let (probe, report) = train_on(&dataset, &ids, spec.label_kind, &spec.train_config, &spec.model)?;
    write_atomic_with(out, |w| save_model(&probe, w).map(|_| ()).map_err(Failure::from))?;
    #[derive(Serialize)]
    struct TrainOutput<'a> {
        model: String,
        train_samples: usize,
        report: &'a autoprobe::TrainReport,
    }
    let summary = TrainOutput {
        model: out.display().to_string(),
        train_samples: ids.len(),
        report: &report,
    };
    emit(args.report.as_deref(), &to_json(&summary)?)
}

fn eval(cli: &Cli, dataset: &Path, model: &Path, spec: Option<&Path>) -> CliResult<()> {
    let (dataset, spec) = load_inputs(cli, dataset, spec)?;
    let probe = open_model(model)?;
    // the label kind the model was trained on wins over the spec's
    let kind = probe.provenance.label_kind.unwrap_or(spec.label_kind);
    let test_ids = spec.test.select(&dataset);
    if test_ids.is_empty() {
        return Err(Error::Empty("test filter selects no samples".into()).into());
    }
    let (layout, examples, row_index) = prepare_examples(&dataset, &test_ids, kind, &probe.spec)?;
    if layout != probe.layout {
        return Err(Error::DimensionMismatch(format!(
            "model reads d={} from layers {:?}, dataset gives d={} from layers {:?}",
            probe.layout.hidden_dim, probe.layout.layers, layout.hidden_dim, layout.layers
        ))
        .into());
    }
    let (metrics, mean_alpha) = evaluate_examples(&probe, &examples)?;
    let report = EvalReport {
        experiment: spec.name.clone(),
        spec_hash: spec.hash(),
        label_kind: kind,
        train_size: probe.provenance.train_samples,
        test_size: examples.len(),
        methods: vec![MethodResult {
            name: probe.spec.label(),
            metrics,
            alpha: Some(alpha_summary(&row_index, mean_alpha)),
        }],
        oracle_table: None,
        sweep: None,
        ablation: None,
        wall_clock_seconds: None,
    };
    emit_report(cli, &report)
}

fn predict_samples(cli: &Cli, args: &PredictArgs) -> CliResult<()> {
    let dataset = open_dataset(&args.dataset)?;
    let probe = open_model(&args.model)?;
    let ids: Vec<String> = if args.ids.is_empty() {
        dataset.ids().map(str::to_string).collect()
    } else {
        args.ids.clone()
    };
    #[derive(Serialize)]
    struct Row {
        sample_id: String,
        label: u8,
        probability: f64,
    }
    let rows = ids
        .into_iter()
        .map(|id| {
            let p = predict(&probe, &dataset, &id)?;
            Ok(Row {
                sample_id: id,
                label: p.label,
                probability: p.probability,
            })
        })
        .collect::<autoprobe::Result<Vec<_>>>()?;
    let bytes = match cli.format {
        Format::Json => to_json(&rows)?,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &rows {
                w.serialize(r).map_err(|e| Failure::Runtime(e.to_string()))?;
            }
            w.into_inner().map_err(|e| Failure::Runtime(e.to_string()))?
        }
    };
    emit(cli.out.as_deref(), &bytes)
}

fn parse_cells(cells: &str) -> CliResult<usize> {
    let bad = || Failure::input(format!("--cells expects LAYERSx4, got '{cells}'"));
    let (layers, positions) = cells.split_once(['x', 'X']).ok_or_else(bad)?;
    let layers: usize = layers.trim().parse().map_err(|_| bad())?;
    if positions.trim() != "4" {
        return Err(Failure::input(
            "synthetic datasets store the 4 boundary positions per layer",
        ));
    }
    Ok(layers)
}

fn parse_signal(signal: &str) -> CliResult<Option<ProbeCell>> {
    if signal == "none" {
        return Ok(None);
    }
    let bad = || Failure::input(format!("--signal expects LAYER,POSITION or none, got '{signal}'"));
    let (layer, position) = signal.split_once(',').ok_or_else(bad)?;
    let layer = layer.trim().parse().map_err(|_| bad())?;
    let position: PositionRole = position.trim().parse()?;
    Ok(Some(ProbeCell { layer, position }))
}

fn synth(cli: &Cli, args: &SynthArgs) -> CliResult<()> {
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| Failure::input("synth needs --out for the dataset file"))?;
    let config = SynthConfig {
        layers: parse_cells(&args.cells)?,
        hidden_dim: args.d,
        samples: args.n,
        signal: parse_signal(&args.signal)?,
        margin: args.margin,
        sigma: args.sigma,
        test_fraction: args.test_fraction,
        label_kind: args.kind.parse()?,
        seed: cli.seed,
        ..SynthConfig::default()
    };
    let (manifest, blocks) = generate(&config)?;
    write_atomic_with(out, |w| {
        write_dataset(&manifest, &blocks, w).map(|_| ()).map_err(Failure::from)
    })?;
    println!("{}", out.display());
    Ok(())
}
