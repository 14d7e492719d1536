//! Writes the seed corpora for the `fuzz/` targets.
//!
//! cargo run -p autoprobe --example fuzz_seeds -- fuzz/corpus

use std::fs;
use std::path::{Path, PathBuf};

use autoprobe::eval::experiment::ExperimentSpec;
use autoprobe::eval::synth::{generate, SynthConfig};
use autoprobe::oracles::OracleConfig;
use autoprobe::repr_store::write_dataset;
use autoprobe::train::{save_model, train, ModelSpec, ProbeCell};
use autoprobe::{ClassifierSpec, Dataset, LabelKind, PositionRole, TrainConfig};

fn put(root: &Path, target: &str, name: &str, bytes: &[u8]) {
    let dir = root.join(target);
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join(name), bytes).unwrap();
}

fn main() -> autoprobe::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fuzz/corpus".into()));

    let small = SynthConfig {
        layers: 2,
        hidden_dim: 3,
        samples: 6,
        signal: Some(ProbeCell {
            layer: 1,
            position: PositionRole::Last,
        }),
        ..SynthConfig::default()
    };
    let empty = SynthConfig {
        samples: 0,
        ..small.clone()
    };
    for (name, config) in [("small.aprb", &small), ("empty.aprb", &empty)] {
        let (manifest, blocks) = generate(config)?;
        let mut bytes = Vec::new();
        write_dataset(&manifest, &blocks, &mut bytes)?;
        put(&root, "read_dataset", name, &bytes);
        put(
            &root,
            "manifest",
            &name.replace(".aprb", ".json"),
            &serde_json::to_vec(&manifest)?,
        );
    }

    let (manifest, blocks) = generate(&small)?;
    let dataset = Dataset::from_parts(&manifest, &blocks)?;
    let config = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    for (name, classifier) in [
        ("logreg.aprm", ClassifierSpec::LogisticRegression),
        ("mlp.aprm", ClassifierSpec::Mlp { hidden: vec![4] }),
        ("svm.aprm", ClassifierSpec::LinearSvm),
    ] {
        let spec = ModelSpec {
            classifier,
            ..ModelSpec::default()
        };
        let (probe, _) = train(&dataset, LabelKind::Functionality, &config, &spec)?;
        let mut bytes = Vec::new();
        save_model(&probe, &mut bytes)?;
        put(&root, "load_model", name, &bytes);
    }

    put(
        &root,
        "experiment_spec",
        "default.json",
        &serde_json::to_vec_pretty(&ExperimentSpec::default())?,
    );
    put(
        &root,
        "experiment_spec",
        "minimal.json",
        br#"{"model": {"classifier": "logistic_regression"}}"#,
    );

    put(
        &root,
        "oracle_config",
        "default.json",
        &serde_json::to_vec_pretty(&OracleConfig::default())?,
    );
    put(
        &root,
        "oracle_config",
        "full.json",
        br#"{"timeout_secs": 5, "parallelism": 2, "file_name": "unit.py",
  "compilability": {"name": "py_compile", "command": "python3 -m py_compile {file}"},
  "functionality": {"command": "python3 -m pytest -q {file} -k {test}", "tests": ["t1"], "per_unit": {"u1": ["t2"]}},
  "security": [{"name": "bandit", "command": "bandit -q {file}", "timeout_secs": 30}]}"#,
    );
    Ok(())
}
