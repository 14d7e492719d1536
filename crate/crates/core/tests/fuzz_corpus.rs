//! The checked-in fuzz seeds must stay decodable, or the fuzzers start from
//! rejected inputs only. Regenerate with the `fuzz_seeds` example.

use std::fs;
use std::path::PathBuf;

use autoprobe::eval::experiment::ExperimentSpec;
use autoprobe::oracles::OracleConfig;
use autoprobe::repr_store::validate_manifest;
use autoprobe::train::load_model;
use autoprobe::{Dataset, DatasetManifest};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let path = e.unwrap().path();
            (
                path.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&path).unwrap(),
            )
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn dataset_seeds_read_and_verify() {
    for (name, bytes) in seeds("read_dataset") {
        let ds = Dataset::from_bytes(bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        ds.verify_payload().unwrap();
    }
}

#[test]
fn model_seeds_load() {
    let names: Vec<String> = seeds("load_model")
        .into_iter()
        .map(|(name, bytes)| {
            load_model(&bytes[..]).unwrap_or_else(|e| panic!("{name}: {e}"));
            name
        })
        .collect();
    assert_eq!(names, ["logreg.aprm", "mlp.aprm", "svm.aprm"]);
}

#[test]
fn manifest_seeds_are_valid() {
    for (name, bytes) in seeds("manifest") {
        let manifest: DatasetManifest = serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(validate_manifest(&manifest), Vec::<String>::new(), "{name}");
    }
}

#[test]
fn config_seeds_parse() {
    for (name, bytes) in seeds("experiment_spec") {
        let spec: ExperimentSpec = serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        spec.train_config.validate().unwrap();
    }
    for (name, bytes) in seeds("oracle_config") {
        OracleConfig::from_json(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
