//! Planted-signal datasets: Gaussian noise rows around a fixed per-cell
//! mean (a shared positive baseline plus a random per-cell part), except
//! that in one (layer, boundary position) cell the class means are
//! further shifted to `+/- margin * sigma` along a random unit direction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::repr_store::{Dataset, DatasetManifest, HiddenBlock, LabelKind, PositionsSchema, SampleRecord};
use crate::sampling::{stored_positions, PositionRole};
use crate::train::ProbeCell;
use crate::{Error, Result};

pub const TRAIN_BENCHMARK: &str = "synth-train";
pub const TEST_BENCHMARK: &str = "synth-test";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Model layers; all are stored.
    pub layers: usize,
    pub hidden_dim: usize,
    pub samples: usize,
    /// `None` generates labels independent of the hidden states.
    pub signal: Option<ProbeCell>,
    /// Distance of each class mean from the cell mean, in units of `sigma`.
    pub margin: f64,
    pub sigma: f64,
    /// Per-coordinate spread, in units of `sigma`, of the fixed mean each
    /// cell has in every sample. Lets cells be told apart by content, as
    /// layers and positions of a real model can; carries no label
    /// information. 0 makes every cell share the baseline mean.
    pub cell_offset: f64,
    /// Common mean of every coordinate, in units of `sigma`. A positive
    /// baseline keeps weighted rows away from zero, where max pooling
    /// would clip one class of the signal.
    pub cell_baseline: f64,
    pub test_fraction: f64,
    pub label_kind: LabelKind,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            hidden_dim: 64,
            samples: 400,
            signal: Some(ProbeCell {
                layer: 3,
                position: PositionRole::LastCode,
            }),
            margin: 2.0,
            sigma: 1.0,
            cell_offset: 1.0,
            cell_baseline: 2.0,
            test_fraction: 0.2,
            label_kind: LabelKind::Functionality,
            seed: 42,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("synthetic layers and hidden_dim must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test_fraction must be in [0, 1)".into()));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0)
            || !self.margin.is_finite()
            || !(self.cell_offset.is_finite() && self.cell_offset >= 0.0)
            || !self.cell_baseline.is_finite()
        {
            return Err(Error::Config(
                "sigma must be finite and > 0, margin and cell_baseline finite, cell_offset >= 0".into(),
            ));
        }
        if let Some(cell) = self.signal {
            if cell.layer == 0 || cell.layer > self.layers || cell.position.boundary_slot().is_none() {
                return Err(Error::Config(format!(
                    "signal cell L{}:{} outside {} layers x 4 boundary positions",
                    cell.layer, cell.position, self.layers
                )));
            }
        }
        Ok(())
    }
}

/// Manifest and blocks of a planted-signal dataset. Labels are balanced;
/// a stratified `test_fraction` of each class is tagged
/// [`TEST_BENCHMARK`], the rest [`TRAIN_BENCHMARK`].
pub fn generate(config: &SynthConfig) -> Result<(DatasetManifest, Vec<HiddenBlock>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.hidden_dim;
    let noise = Normal::new(0.0, config.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let mut direction: Vec<f64> = (0..d).map(|_| unit.sample(&mut rng)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut direction {
        *v /= norm;
    }

    let rows = config.layers * 4;
    let cell_means: Vec<Vec<f64>> = (0..rows)
        .map(|_| {
            (0..d)
                .map(|_| config.sigma * (config.cell_baseline + config.cell_offset * unit.sample(&mut rng)))
                .collect()
        })
        .collect();

    let n = config.samples;
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n / 2)).collect();
    labels.shuffle(&mut rng);
    let mut is_test = vec![false; n];
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let take = (members.len() as f64 * config.test_fraction).round() as usize;
        for &i in &members[..take] {
            is_test[i] = true;
        }
    }

    let layers: Vec<usize> = (1..=config.layers).collect();
    let mut manifest = DatasetManifest::new(d, config.layers, layers.clone(), PositionsSchema::Boundary4);
    manifest.label_kinds_present.insert(config.label_kind);
    let signal_row = config
        .signal
        .map(|c| (c.layer - 1) * 4 + c.position.boundary_slot().expect("validated"));

    let mut blocks = Vec::with_capacity(n);
    for i in 0..n {
        let m = rng.gen_range(8..=64);
        let first_code = rng.gen_range(1..m / 2);
        let last_code = rng.gen_range(m / 2..m - 1);
        let mut record = SampleRecord::new(format!("synth-{i:05}"), m);
        record.first_code_idx = Some(first_code);
        record.last_code_idx = Some(last_code);
        record.labels.insert(config.label_kind, labels[i]);
        record.benchmark = if is_test[i] { TEST_BENCHMARK } else { TRAIN_BENCHMARK }.into();
        record.model_name = "synthetic".into();
        record.language = "python".into();

        let mut values = Vec::with_capacity(rows * d);
        let shift = if labels[i] == 1 { 1.0 } else { -1.0 } * config.margin * config.sigma;
        for (r, mean) in cell_means.iter().enumerate() {
            for (u, mu) in direction.iter().zip(mean) {
                let mut v = mu + noise.sample(&mut rng);
                if Some(r) == signal_row {
                    v += shift * u;
                }
                values.push(v as f32);
            }
        }
        blocks.push(HiddenBlock {
            hidden_dim: d,
            layers: layers.clone(),
            positions: stored_positions(&PositionsSchema::Boundary4, &record),
            values,
        });
        manifest.samples.push(record);
    }
    manifest.assign_offsets();
    Ok((manifest, blocks))
}

pub fn generate_dataset(config: &SynthConfig) -> Result<Dataset> {
    let (manifest, blocks) = generate(config)?;
    Dataset::from_parts(&manifest, &blocks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_stratified() {
        let cfg = SynthConfig {
            samples: 100,
            hidden_dim: 4,
            layers: 2,
            signal: Some(ProbeCell {
                layer: 2,
                position: PositionRole::First,
            }),
            ..SynthConfig::default()
        };
        let (m, blocks) = generate(&cfg).unwrap();
        assert_eq!(blocks.len(), 100);
        let pos = m.samples.iter().filter(|s| s.label(cfg.label_kind) == Some(1)).count();
        assert_eq!(pos, 50);
        let test: Vec<_> = m.samples.iter().filter(|s| s.benchmark == TEST_BENCHMARK).collect();
        assert_eq!(test.len(), 20);
        assert_eq!(test.iter().filter(|s| s.label(cfg.label_kind) == Some(1)).count(), 10);
        assert!(crate::repr_store::validate_manifest(&m).is_empty());
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = SynthConfig {
            samples: 10,
            hidden_dim: 3,
            ..SynthConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn rejects_cell_outside_grid() {
        let cfg = SynthConfig {
            signal: Some(ProbeCell {
                layer: 9,
                position: PositionRole::First,
            }),
            ..SynthConfig::default()
        };
        assert!(generate(&cfg).is_err());
    }
}
