//! Joint training of the attention scorer and the classifier head.

mod backprop;
mod gradcheck;
mod model_file;

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use backprop::ProbeParams;
pub use gradcheck::{grad_check, grad_check_with_eps, kink_distance, GRAD_CHECK_EPS};
pub use model_file::{load_model, save_model, MODEL_FORMAT_VERSION, MODEL_MAGIC};

use crate::eval::metrics::{compute_metrics, Metrics};
use crate::linalg::Matrix;
use crate::predictor::{Aggregator, ClassifierSpec, PredictorParams};
use crate::repr_store::{Dataset, DatasetManifest, LabelKind, SampleRecord};
use crate::sampling::{
    assemble_from_block, boundary_positions, select_layers, select_positions, AssembledInput, LayerConfig,
    PositionRole, RowId, TokenPosition, TokenStrategy,
};
use crate::selector::AttentionParams;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Sgd,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeights {
    /// `N / (2 * N_class)` from the training labels.
    InverseFrequency,
    Explicit {
        negative: f64,
        positive: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub shuffle: bool,
    pub class_weights: Option<ClassWeights>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 42,
            optimizer: Optimizer::Adam,
            shuffle: true,
            class_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// A single (layer, boundary position) input, used by fixed-position
/// probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProbeCell {
    pub layer: usize,
    pub position: PositionRole,
}

/// What a probe reads and how it classifies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub classifier: ClassifierSpec,
    pub aggregator: Aggregator,
    pub token_strategy: TokenStrategy,
    pub layer_interval: LayerConfig,
    /// When false the scorer stays at zero and attention is uniform.
    pub selector: bool,
    /// Reads exactly this cell instead of sampling layers and tokens.
    pub cell: Option<ProbeCell>,
    /// Expected hidden size; checked against the dataset when set.
    pub hidden_dim: Option<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            classifier: ClassifierSpec::default_mlp(),
            aggregator: Aggregator::Max,
            token_strategy: TokenStrategy::BoundaryAware,
            layer_interval: LayerConfig::default(),
            selector: true,
            cell: None,
            hidden_dim: None,
        }
    }
}

impl ModelSpec {
    pub fn fixed_cell(classifier: ClassifierSpec, layer: usize, position: PositionRole) -> Self {
        Self {
            classifier,
            aggregator: Aggregator::Mean,
            selector: false,
            cell: Some(ProbeCell { layer, position }),
            ..Self::default()
        }
    }

    /// Short label, e.g. `mlp/max/boundary4/k1/sel`.
    pub fn label(&self) -> String {
        match self.cell {
            Some(c) => format!("{}/L{}:{}", self.classifier, c.layer, c.position),
            None => format!(
                "{}/{}/{}/k{}/{}",
                self.classifier,
                self.aggregator,
                self.token_strategy,
                self.layer_interval.k,
                if self.selector { "sel" } else { "nosel" }
            ),
        }
    }

    fn positions_per_layer(&self) -> usize {
        if self.cell.is_some() {
            1
        } else {
            self.token_strategy.positions_per_layer()
        }
    }
}

/// Layers and shape a probe reads from a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub hidden_dim: usize,
    pub model_layer_count: usize,
    pub layers: Vec<usize>,
    pub rows: usize,
}

impl InputLayout {
    pub fn resolve(manifest: &DatasetManifest, spec: &ModelSpec) -> Result<Self> {
        if let Some(d) = spec.hidden_dim {
            if d != manifest.hidden_dim {
                return Err(Error::DimensionMismatch(format!(
                    "model expects hidden_dim {d}, dataset has {}",
                    manifest.hidden_dim
                )));
            }
        }
        let layers = match spec.cell {
            Some(cell) => {
                if cell.position.boundary_slot().is_none() {
                    return Err(Error::Config("a probe cell needs a boundary position".into()));
                }
                vec![cell.layer]
            }
            None => select_layers(manifest.model_layer_count, spec.layer_interval.k)?,
        };
        if let Some(&l) = layers.iter().find(|l| !manifest.layers_stored.contains(l)) {
            return Err(Error::LayerNotStored(l));
        }
        Ok(Self {
            hidden_dim: manifest.hidden_dim,
            model_layer_count: manifest.model_layer_count,
            rows: layers.len() * spec.positions_per_layer(),
            layers,
        })
    }
}

/// Where a trained probe came from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub label_kind: Option<LabelKind>,
    /// SHA-256 over the sorted training sample ids.
    pub dataset_digest: String,
    pub train_samples: usize,
    pub benchmarks: Vec<String>,
    pub models: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
}

/// A trained probe: scorer, classifier, and the sampling it was trained
/// under.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub spec: ModelSpec,
    pub layout: InputLayout,
    pub params: ProbeParams,
    pub provenance: Provenance,
}

impl ProbeModel {
    /// Untrained probe with zero scorer and Glorot-initialized classifier.
    pub fn init(spec: ModelSpec, layout: InputLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&spec, &layout, &mut rng);
        Self {
            spec,
            layout,
            params,
            provenance: Provenance::default(),
        }
    }

    /// Token positions this probe reads for `record`.
    pub fn positions_for(&self, record: &SampleRecord) -> Vec<TokenPosition> {
        match self.spec.cell {
            Some(cell) => {
                let slot = cell.position.boundary_slot().unwrap_or(0);
                vec![boundary_positions(record)[slot]]
            }
            None => select_positions(&self.spec.token_strategy, record),
        }
    }

    fn check_dataset(&self, manifest: &DatasetManifest) -> Result<()> {
        if manifest.hidden_dim != self.layout.hidden_dim {
            return Err(Error::DimensionMismatch(format!(
                "probe hidden_dim {} vs dataset {}",
                self.layout.hidden_dim, manifest.hidden_dim
            )));
        }
        if manifest.model_layer_count != self.layout.model_layer_count {
            return Err(Error::DimensionMismatch(format!(
                "probe trained for {} model layers, dataset has {}",
                self.layout.model_layer_count, manifest.model_layer_count
            )));
        }
        Ok(())
    }

    /// Assembles the rows this probe reads for one stored sample.
    pub fn assemble(&self, dataset: &Dataset, sample_id: &str) -> Result<AssembledInput> {
        self.check_dataset(dataset.manifest())?;
        let record = dataset.record(sample_id)?;
        let block = dataset.block(sample_id)?;
        let positions = self.positions_for(record);
        assemble_from_block(
            &block,
            &dataset.manifest().positions_schema,
            record,
            &self.layout.layers,
            &positions,
        )
    }

    /// `(logit, alpha)` for an assembled matrix.
    pub fn score(&self, h: &Matrix) -> Result<(f64, Vec<f64>)> {
        if h.rows() != self.layout.rows || h.cols() != self.layout.hidden_dim {
            return Err(Error::DimensionMismatch(format!(
                "input {}x{}, probe expects {}x{}",
                h.rows(),
                h.cols(),
                self.layout.rows,
                self.layout.hidden_dim
            )));
        }
        Ok(backprop::infer(&self.params, self.spec.aggregator, h))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }
}

pub(crate) fn init_params<R: rand::Rng>(spec: &ModelSpec, layout: &InputLayout, rng: &mut R) -> ProbeParams {
    let input_dim = spec.aggregator.output_dim(layout.rows, layout.hidden_dim);
    ProbeParams {
        attention: AttentionParams::zeros(layout.hidden_dim),
        predictor: PredictorParams::glorot(&spec.classifier, input_dim, rng),
    }
}

/// One training or evaluation example: assembled rows and label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub h: Matrix,
    pub y: u8,
}

/// Assembles the inputs of `ids` for `spec`, together with the row
/// identities (taken from the first example).
pub fn prepare_examples(
    dataset: &Dataset,
    ids: &[String],
    kind: LabelKind,
    spec: &ModelSpec,
) -> Result<(InputLayout, Vec<Example>, Vec<RowId>)> {
    let layout = InputLayout::resolve(dataset.manifest(), spec)?;
    let probe = ProbeModel {
        spec: spec.clone(),
        layout: layout.clone(),
        params: ProbeParams {
            attention: AttentionParams::zeros(0),
            predictor: PredictorParams { layers: Vec::new() },
        },
        provenance: Provenance::default(),
    };
    let mut examples = Vec::with_capacity(ids.len());
    let mut row_index = Vec::new();
    for id in ids {
        let record = dataset.record(id)?;
        let y = record.label(kind).ok_or_else(|| Error::MissingLabel {
            sample_id: id.clone(),
            kind: kind.to_string(),
        })?;
        let input = probe.assemble(dataset, id)?;
        if input.h.rows() != layout.rows {
            return Err(Error::ShapeMismatch(format!(
                "sample '{id}' yields {} rows, expected {}",
                input.h.rows(),
                layout.rows
            )));
        }
        if row_index.is_empty() {
            row_index = input.row_index;
        }
        examples.push(Example {
            id: id.clone(),
            h: input.h,
            y,
        });
    }
    Ok((layout, examples, row_index))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_metrics: Metrics,
    pub optimizer_steps: usize,
    pub parameter_count: usize,
    pub warnings: Vec<String>,
    /// Excluded from determinism comparisons.
    pub wall_clock_seconds: f64,
}

/// Trains on every sample of `dataset`.
pub fn train(
    dataset: &Dataset,
    label_kind: LabelKind,
    config: &TrainConfig,
    spec: &ModelSpec,
) -> Result<(ProbeModel, TrainReport)> {
    let ids: Vec<String> = dataset.ids().map(str::to_string).collect();
    train_on(dataset, &ids, label_kind, config, spec)
}

/// Trains on the listed samples of `dataset`.
pub fn train_on(
    dataset: &Dataset,
    ids: &[String],
    label_kind: LabelKind,
    config: &TrainConfig,
    spec: &ModelSpec,
) -> Result<(ProbeModel, TrainReport)> {
    config.validate()?;
    let (layout, examples, _) = prepare_examples(dataset, ids, label_kind, spec)?;
    let mut provenance = provenance_for(dataset, ids, config, spec)?;
    provenance.label_kind = Some(label_kind);
    fit(&examples, layout, config, spec, provenance)
}

fn provenance_for(dataset: &Dataset, ids: &[String], config: &TrainConfig, spec: &ModelSpec) -> Result<Provenance> {
    let mut sorted: Vec<&str> = ids.iter().map(String::as_str).collect();
    sorted.sort_unstable();
    let mut h = Sha256::new();
    for id in &sorted {
        h.update(id.as_bytes());
        h.update([0u8]);
    }
    let mut benchmarks = BTreeSet::new();
    let mut models = BTreeSet::new();
    for id in ids {
        let r = dataset.record(id)?;
        benchmarks.insert(r.benchmark.clone());
        models.insert(r.model_name.clone());
    }
    Ok(Provenance {
        label_kind: None,
        dataset_digest: hex::encode(h.finalize()),
        train_samples: ids.len(),
        benchmarks: benchmarks.into_iter().collect(),
        models: models.into_iter().collect(),
        seed: config.seed,
        config_hash: config_hash(config, spec),
    })
}

pub fn config_hash(config: &TrainConfig, spec: &ModelSpec) -> String {
    let json = serde_json::to_vec(&(config, spec)).unwrap_or_default();
    hex::encode(Sha256::digest(&json))[..16].to_string()
}

/// Minibatch training on prepared examples.
pub fn fit(
    examples: &[Example],
    layout: InputLayout,
    config: &TrainConfig,
    spec: &ModelSpec,
    provenance: Provenance,
) -> Result<(ProbeModel, TrainReport)> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("no training examples".into()));
    }
    let started = Instant::now();
    let mut warnings = Vec::new();
    let positives = examples.iter().filter(|e| e.y == 1).count();
    if positives == 0 || positives == examples.len() {
        let msg = format!(
            "training set has a single class ({positives} of {} positive)",
            examples.len()
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let class_weights = match config.class_weights {
        None => None,
        Some(ClassWeights::Explicit { negative, positive }) => Some((negative, positive)),
        Some(ClassWeights::InverseFrequency) => {
            let n = examples.len() as f64;
            let w = |count: usize| if count == 0 { 1.0 } else { n / (2.0 * count as f64) };
            Some((w(examples.len() - positives), w(positives)))
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = init_params(spec, &layout, &mut rng);
    let mut grads = params.zeros_like();
    let mut opt = OptimizerState::new(config, &params);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut steps = 0;

    for _ in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            grads.fill(0.0);
            for &i in batch {
                let ex = &examples[i];
                let w = crate::predictor::class_weight(ex.y, class_weights);
                epoch_loss += backprop::example_loss_grad(
                    &params,
                    &spec.classifier,
                    spec.aggregator,
                    &ex.h,
                    ex.y,
                    w,
                    &mut grads,
                    spec.selector,
                );
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut params, &grads, spec.selector);
            steps += 1;
        }
        let mean = epoch_loss / examples.len() as f64;
        if !mean.is_finite() || !params.is_finite() {
            return Err(Error::Diverged(format!("epoch {} loss {mean}", epoch_losses.len() + 1)));
        }
        epoch_losses.push(mean);
    }

    params.round_to_f32();
    let model = ProbeModel {
        spec: spec.clone(),
        layout,
        params,
        provenance,
    };
    let mut y_true = Vec::with_capacity(examples.len());
    let mut y_pred = Vec::with_capacity(examples.len());
    for ex in examples {
        let (logit, _) = model.score(&ex.h)?;
        y_true.push(ex.y);
        y_pred.push(crate::predictor::Prediction::from_logit(logit).label);
    }
    let report = TrainReport {
        epoch_losses,
        train_metrics: compute_metrics(&y_true, &y_pred)?,
        optimizer_steps: steps,
        parameter_count: model.parameter_count(),
        warnings,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    fn new(config: &TrainConfig, params: &ProbeParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.slices().iter().map(|s| vec![0.0; s.len()]).collect();
        Self {
            kind: config.optimizer,
            lr: config.learning_rate,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    // Tensors 0 and 1 are the scorer; frozen when the selector is off.
    fn step(&mut self, params: &mut ProbeParams, grads: &ProbeParams, train_attention: bool) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        let grad_slices = grads.slices();
        for (ti, p) in params.slices_mut().into_iter().enumerate() {
            if ti < 2 && !train_attention {
                continue;
            }
            let g = grad_slices[ti];
            let lr = self.lr;
            match self.kind {
                Optimizer::Sgd => axpy_neg(lr, g, p),
                Optimizer::Adam => {
                    let (m, v) = (&mut self.m[ti], &mut self.v[ti]);
                    for j in 0..p.len() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        p[j] -= lr * mh / (vh.sqrt() + ADAM_EPSILON);
                    }
                }
            }
        }
    }
}

fn axpy_neg(lr: f64, g: &[f64], p: &mut [f64]) {
    for (pi, gi) in p.iter_mut().zip(g) {
        *pi -= lr * gi;
    }
}

#[cfg(test)]
mod tests;
