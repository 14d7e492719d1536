//! Declarative experiments: train/test split by tags, the main probe, the
//! requested baselines, training-size sweeps and ablation grids.

use std::collections::HashSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::baselines::{majority_class, oracle_search, run_fixed_probe, BaselineKind, OracleRow};
use super::metrics::{compute_metrics, Metrics};
use super::synth::{TEST_BENCHMARK, TRAIN_BENCHMARK};
use crate::predictor::{Aggregator, ClassifierSpec, Prediction};
use crate::repr_store::{Dataset, LabelKind, SampleRecord};
use crate::sampling::{LayerConfig, RowId, TokenStrategy};
use crate::train::{fit, prepare_examples, Example, ModelSpec, ProbeModel, Provenance, TrainConfig};
use crate::{Error, Result};

/// Selects samples by provenance tags; an empty list matches anything.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleFilter {
    pub benchmarks: Vec<String>,
    pub models: Vec<String>,
    pub languages: Vec<String>,
    pub ids: Vec<String>,
}

impl SampleFilter {
    pub fn benchmark(name: &str) -> Self {
        Self {
            benchmarks: vec![name.to_string()],
            ..Self::default()
        }
    }

    pub fn matches(&self, r: &SampleRecord) -> bool {
        let ok = |list: &[String], v: &str| list.is_empty() || list.iter().any(|x| x == v);
        ok(&self.benchmarks, &r.benchmark)
            && ok(&self.models, &r.model_name)
            && ok(&self.languages, &r.language)
            && ok(&self.ids, &r.id)
    }

    pub fn select(&self, dataset: &Dataset) -> Vec<String> {
        dataset
            .samples()
            .iter()
            .filter(|r| self.matches(r))
            .map(|r| r.id.clone())
            .collect()
    }
}

/// Axes of the ablation grid; the run enumerates their full product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationAxes {
    pub selector: Vec<bool>,
    pub aggregators: Vec<Aggregator>,
    pub classifiers: Vec<ClassifierSpec>,
    pub layer_intervals: Vec<usize>,
    pub token_strategies: Vec<TokenStrategy>,
}

impl Default for AblationAxes {
    fn default() -> Self {
        Self {
            selector: vec![true, false],
            aggregators: Aggregator::ALL.to_vec(),
            classifiers: ClassifierSpec::all_defaults().to_vec(),
            layer_intervals: (1..=5).collect(),
            token_strategies: vec![
                TokenStrategy::Full { fixed_len: 256 },
                TokenStrategy::Random { seed: 0 },
                TokenStrategy::BoundaryAware,
            ],
        }
    }
}

impl AblationAxes {
    /// Every combination, outermost axis first (selector, aggregator,
    /// classifier, k, token strategy).
    pub fn enumerate(&self, base: &ModelSpec) -> Vec<ModelSpec> {
        let mut out = Vec::new();
        for &selector in &self.selector {
            for &aggregator in &self.aggregators {
                for classifier in &self.classifiers {
                    for &k in &self.layer_intervals {
                        for &token_strategy in &self.token_strategies {
                            out.push(ModelSpec {
                                classifier: classifier.clone(),
                                aggregator,
                                token_strategy,
                                layer_interval: LayerConfig { k },
                                selector,
                                cell: None,
                                hidden_dim: base.hidden_dim,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub label_kind: LabelKind,
    pub train: SampleFilter,
    pub test: SampleFilter,
    pub model: ModelSpec,
    pub train_config: TrainConfig,
    pub baselines: Vec<BaselineKind>,
    pub sweep_fractions: Option<Vec<f64>>,
    pub ablation: Option<AblationAxes>,
    /// Adds wall-clock time to the report (which then stops being
    /// byte-reproducible).
    pub record_wall_clock: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "autoprobe".into(),
            label_kind: LabelKind::Functionality,
            train: SampleFilter::benchmark(TRAIN_BENCHMARK),
            test: SampleFilter::benchmark(TEST_BENCHMARK),
            model: ModelSpec::default(),
            train_config: TrainConfig::default(),
            baselines: vec![BaselineKind::MajorityClass, BaselineKind::openia()],
            sweep_fractions: None,
            ablation: None,
            record_wall_clock: false,
        }
    }
}

impl ExperimentSpec {
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).unwrap_or_default();
        hex::encode(Sha256::digest(&json))
    }
}

/// Mean attention weight per row over an evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSummary {
    pub rows: Vec<String>,
    pub mean_alpha: Vec<f64>,
    pub argmax: usize,
    pub argmax_row: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub name: String,
    pub metrics: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<AlphaSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub train_size: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub selector: bool,
    pub aggregator: Aggregator,
    pub classifier: ClassifierSpec,
    pub layer_interval: usize,
    pub token_strategy: TokenStrategy,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    pub spec_hash: String,
    pub label_kind: LabelKind,
    pub train_size: usize,
    pub test_size: usize,
    pub methods: Vec<MethodResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_table: Option<Vec<OracleRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<SweepRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Vec<AblationRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.name == name)
    }

    /// Flat table: one line per method, oracle cell, sweep point and
    /// ablation configuration.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
        w.write_record([
            "section",
            "name",
            "accuracy",
            "weighted_precision",
            "weighted_recall",
            "weighted_f1",
            "tp",
            "fp",
            "tn",
            "fn",
            "error",
        ])
        .map_err(csv_err)?;
        let mut row = |section: &str, name: &str, m: Option<&Metrics>, err: &str| {
            let mut rec = vec![section.to_string(), name.to_string()];
            match m {
                Some(m) => rec.extend([
                    m.accuracy.to_string(),
                    m.weighted_precision.to_string(),
                    m.weighted_recall.to_string(),
                    m.weighted_f1.to_string(),
                    m.tp.to_string(),
                    m.fp.to_string(),
                    m.tn.to_string(),
                    m.fn_.to_string(),
                ]),
                None => rec.extend(std::iter::repeat_n(String::new(), 8)),
            }
            rec.push(err.to_string());
            w.write_record(&rec)
        };
        for m in &self.methods {
            row("method", &m.name, Some(&m.metrics), "").map_err(csv_err)?;
        }
        for o in self.oracle_table.iter().flatten() {
            row("oracle", &format!("L{}:{}", o.layer, o.position), Some(&o.metrics), "").map_err(csv_err)?;
        }
        for s in self.sweep.iter().flatten() {
            row(
                "sweep",
                &format!("{}@{}", s.fraction, s.train_size),
                Some(&s.metrics),
                "",
            )
            .map_err(csv_err)?;
        }
        for a in self.ablation.iter().flatten() {
            row(
                "ablation",
                &a.config,
                a.metrics.as_ref(),
                a.error.as_deref().unwrap_or(""),
            )
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
    }
}

/// Train and test sample ids. Fails on overlap, empty sides, or missing
/// labels.
pub fn resolve_split(dataset: &Dataset, spec: &ExperimentSpec) -> Result<(Vec<String>, Vec<String>)> {
    let train = spec.train.select(dataset);
    let test = spec.test.select(dataset);
    let train_set: HashSet<&str> = train.iter().map(String::as_str).collect();
    if let Some(id) = test.iter().find(|id| train_set.contains(id.as_str())) {
        return Err(Error::SplitOverlap(id.clone()));
    }
    if train.is_empty() {
        return Err(Error::Empty("train filter selects no samples".into()));
    }
    if test.is_empty() {
        return Err(Error::Empty("test filter selects no samples".into()));
    }
    for id in train.iter().chain(&test) {
        if dataset.record(id)?.label(spec.label_kind).is_none() {
            return Err(Error::MissingLabel {
                sample_id: id.clone(),
                kind: spec.label_kind.to_string(),
            });
        }
    }
    Ok((train, test))
}

/// Metrics of `probe` on prepared examples, plus the mean attention weights.
pub fn evaluate_examples(probe: &ProbeModel, examples: &[Example]) -> Result<(Metrics, Vec<f64>)> {
    let mut y_true = Vec::with_capacity(examples.len());
    let mut y_pred = Vec::with_capacity(examples.len());
    let mut alpha_sum = vec![0.0; probe.layout.rows];
    for ex in examples {
        let (logit, alpha) = probe.score(&ex.h)?;
        for (s, a) in alpha_sum.iter_mut().zip(&alpha) {
            *s += a;
        }
        y_true.push(ex.y);
        y_pred.push(Prediction::from_logit(logit).label);
    }
    let n = examples.len().max(1) as f64;
    for s in &mut alpha_sum {
        *s /= n;
    }
    Ok((compute_metrics(&y_true, &y_pred)?, alpha_sum))
}

pub fn alpha_summary(row_index: &[RowId], mean_alpha: Vec<f64>) -> AlphaSummary {
    let argmax = mean_alpha
        .iter()
        .enumerate()
        .fold(0, |best, (i, a)| if *a > mean_alpha[best] { i } else { best });
    AlphaSummary {
        rows: row_index.iter().map(RowId::to_string).collect(),
        argmax_row: row_index.get(argmax).map(RowId::to_string).unwrap_or_default(),
        argmax,
        mean_alpha,
    }
}

/// Result of training one model spec on the split.
pub struct TrainedEval {
    pub probe: ProbeModel,
    pub metrics: Metrics,
    pub alpha: AlphaSummary,
}

/// Trains `model` on `train_ids` and scores it on `test_ids`.
pub fn train_and_evaluate(
    dataset: &Dataset,
    train_ids: &[String],
    test_ids: &[String],
    kind: LabelKind,
    model: &ModelSpec,
    config: &TrainConfig,
) -> Result<TrainedEval> {
    let (layout, train, _) = prepare_examples(dataset, train_ids, kind, model)?;
    let (_, test, row_index) = prepare_examples(dataset, test_ids, kind, model)?;
    let provenance = Provenance {
        label_kind: Some(kind),
        train_samples: train.len(),
        seed: config.seed,
        config_hash: crate::train::config_hash(config, model),
        ..Provenance::default()
    };
    let (probe, _) = fit(&train, layout, config, model, provenance)?;
    let (metrics, mean_alpha) = evaluate_examples(&probe, &test)?;
    Ok(TrainedEval {
        probe,
        metrics,
        alpha: alpha_summary(&row_index, mean_alpha),
    })
}

/// `ceil(fraction * N)` training ids with class proportions preserved,
/// chosen with a seeded shuffle.
pub fn stratified_subsample(
    dataset: &Dataset,
    ids: &[String],
    kind: LabelKind,
    fraction: f64,
    seed: u64,
) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("sweep fraction {fraction} outside (0, 1]")));
    }
    let total = ((fraction * ids.len() as f64).ceil() as usize).min(ids.len());
    if total == ids.len() {
        return Ok(ids.to_vec());
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for id in ids {
        match dataset.record(id)?.label(kind) {
            Some(1) => pos.push(id.clone()),
            Some(_) => neg.push(id.clone()),
            None => {
                return Err(Error::MissingLabel {
                    sample_id: id.clone(),
                    kind: kind.to_string(),
                })
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let n_pos = ((total as f64 * pos.len() as f64 / ids.len() as f64).round() as usize)
        .min(pos.len())
        .max(total.saturating_sub(neg.len()));
    let n_neg = total - n_pos;
    let chosen: HashSet<&String> = pos[..n_pos].iter().chain(&neg[..n_neg]).collect();
    // keep dataset order
    Ok(ids.iter().filter(|id| chosen.contains(id)).cloned().collect())
}

/// Runs the main probe, every requested baseline, and the optional sweep
/// and ablation tables. Deterministic for a fixed spec.
pub fn run_experiment(dataset: &Dataset, spec: &ExperimentSpec) -> Result<EvalReport> {
    let started = Instant::now();
    spec.train_config.validate()?;
    let (train_ids, test_ids) = resolve_split(dataset, spec)?;
    let kind = spec.label_kind;
    let labels = |ids: &[String]| -> Result<Vec<u8>> {
        ids.iter()
            .map(|id| Ok(dataset.record(id)?.label(kind).unwrap_or(0)))
            .collect()
    };

    let main = train_and_evaluate(dataset, &train_ids, &test_ids, kind, &spec.model, &spec.train_config)?;
    let mut methods = vec![MethodResult {
        name: "autoprobe".into(),
        metrics: main.metrics,
        alpha: Some(main.alpha),
    }];

    let mut oracle_table = None;
    for baseline in &spec.baselines {
        match baseline {
            BaselineKind::MajorityClass => methods.push(MethodResult {
                name: "majority_class".into(),
                metrics: majority_class(&labels(&train_ids)?, &labels(&test_ids)?)?,
                alpha: None,
            }),
            BaselineKind::FixedProbe { layer, position } => {
                let layer = layer.unwrap_or(dataset.manifest().model_layer_count);
                methods.push(MethodResult {
                    name: format!("fixed_probe(L{layer}:{position})"),
                    metrics: run_fixed_probe(dataset, spec, layer, *position)?,
                    alpha: None,
                });
            }
            BaselineKind::OracleSearch => {
                let table = oracle_search(dataset, spec)?;
                if let Some(best) = table.first() {
                    methods.push(MethodResult {
                        name: format!("oracle(L{}:{})", best.layer, best.position),
                        metrics: best.metrics,
                        alpha: None,
                    });
                }
                oracle_table = Some(table);
            }
        }
    }

    let sweep = match &spec.sweep_fractions {
        Some(fractions) => Some(run_sweep(dataset, spec, &train_ids, &test_ids, fractions)?),
        None => None,
    };
    let ablation = spec
        .ablation
        .as_ref()
        .map(|axes| run_ablation(dataset, spec, axes, &train_ids, &test_ids));

    Ok(EvalReport {
        experiment: spec.name.clone(),
        spec_hash: spec.hash(),
        label_kind: kind,
        train_size: train_ids.len(),
        test_size: test_ids.len(),
        methods,
        oracle_table,
        sweep,
        ablation,
        wall_clock_seconds: spec.record_wall_clock.then(|| started.elapsed().as_secs_f64()),
    })
}

pub fn run_sweep(
    dataset: &Dataset,
    spec: &ExperimentSpec,
    train_ids: &[String],
    test_ids: &[String],
    fractions: &[f64],
) -> Result<Vec<SweepRow>> {
    fractions
        .iter()
        .map(|&fraction| {
            let subset = stratified_subsample(dataset, train_ids, spec.label_kind, fraction, spec.train_config.seed)?;
            let result = train_and_evaluate(
                dataset,
                &subset,
                test_ids,
                spec.label_kind,
                &spec.model,
                &spec.train_config,
            )?;
            Ok(SweepRow {
                fraction,
                train_size: subset.len(),
                metrics: result.metrics,
            })
        })
        .collect()
}

/// Configurations that cannot run on this dataset (unstored layers or
/// positions) are reported with their error instead of aborting the grid.
pub fn run_ablation(
    dataset: &Dataset,
    spec: &ExperimentSpec,
    axes: &AblationAxes,
    train_ids: &[String],
    test_ids: &[String],
) -> Vec<AblationRow> {
    axes.enumerate(&spec.model)
        .par_iter()
        .map(|model| {
            let outcome = train_and_evaluate(dataset, train_ids, test_ids, spec.label_kind, model, &spec.train_config);
            let (metrics, error) = match outcome {
                Ok(r) => (Some(r.metrics), None),
                Err(e) => (None, Some(e.to_string())),
            };
            AblationRow {
                config: model.label(),
                selector: model.selector,
                aggregator: model.aggregator,
                classifier: model.classifier.clone(),
                layer_interval: model.layer_interval.k,
                token_strategy: model.token_strategy,
                metrics,
                error,
            }
        })
        .collect()
}
