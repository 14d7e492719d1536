//! White-box baselines: fixed-position probes, the exhaustive boundary
//! search, and the majority-class floor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::experiment::{evaluate_examples, resolve_split, ExperimentSpec};
use super::metrics::{compute_metrics, Metrics};
use crate::repr_store::Dataset;
use crate::sampling::PositionRole;
use crate::train::{fit, prepare_examples, ModelSpec, Provenance};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineKind {
    /// Probe on one (layer, boundary position). `layer: null` means the
    /// model's last layer; last layer + last token is the Openia setup.
    FixedProbe {
        #[serde(default)]
        layer: Option<usize>,
        position: PositionRole,
    },
    OracleSearch,
    MajorityClass,
}

impl BaselineKind {
    pub fn openia() -> Self {
        BaselineKind::FixedProbe {
            layer: None,
            position: PositionRole::Last,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub layer: usize,
    pub position: PositionRole,
    pub metrics: Metrics,
}

/// Trains the experiment's classifier on a single (layer, position) row
/// and scores it on the test split.
pub fn run_fixed_probe(
    dataset: &Dataset,
    spec: &ExperimentSpec,
    layer: usize,
    position: PositionRole,
) -> Result<Metrics> {
    if position.boundary_slot().is_none() {
        return Err(Error::Config(format!(
            "fixed probe position must be a boundary position, got {position}"
        )));
    }
    if !dataset.manifest().layers_stored.contains(&layer) {
        return Err(Error::LayerNotStored(layer));
    }
    let (train_ids, test_ids) = resolve_split(dataset, spec)?;
    let model = ModelSpec {
        hidden_dim: spec.model.hidden_dim,
        ..ModelSpec::fixed_cell(spec.model.classifier.clone(), layer, position)
    };
    let (layout, train, _) = prepare_examples(dataset, &train_ids, spec.label_kind, &model)?;
    let (_, test, _) = prepare_examples(dataset, &test_ids, spec.label_kind, &model)?;
    let (probe, _) = fit(&train, layout, &spec.train_config, &model, Provenance::default())?;
    Ok(evaluate_examples(&probe, &test)?.0)
}

/// One fixed probe per stored layer and boundary position, sorted by
/// weighted F1 descending, then layer ascending, then position order.
pub fn oracle_search(dataset: &Dataset, spec: &ExperimentSpec) -> Result<Vec<OracleRow>> {
    let cells: Vec<(usize, PositionRole)> = dataset
        .manifest()
        .layers_stored
        .iter()
        .flat_map(|&l| PositionRole::BOUNDARY.into_iter().map(move |p| (l, p)))
        .collect();
    let mut rows = cells
        .par_iter()
        .map(|&(layer, position)| {
            run_fixed_probe(dataset, spec, layer, position).map(|metrics| OracleRow {
                layer,
                position,
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        b.metrics
            .weighted_f1
            .total_cmp(&a.metrics.weighted_f1)
            .then(a.layer.cmp(&b.layer))
            .then(a.position.cmp(&b.position))
    });
    Ok(rows)
}

/// Predicts the majority training class (ties to 1) for every test sample.
pub fn majority_class(train_labels: &[u8], test_labels: &[u8]) -> Result<Metrics> {
    let ones = train_labels.iter().filter(|&&y| y == 1).count();
    let label = u8::from(2 * ones >= train_labels.len());
    compute_metrics(test_labels, &vec![label; test_labels.len()])
}
