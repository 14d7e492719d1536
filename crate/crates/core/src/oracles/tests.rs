use super::*;
use crate::repr_store::SampleRecord;

fn unit(src: &str) -> CodeUnit {
    CodeUnit::new("u1", "python", src)
}

fn sh(name: &str, script: &str) -> OracleCommand {
    OracleCommand::new(name, &format!("sh -c '{script}'"))
}

#[test]
fn compilability_follows_exit_status() {
    let r = OracleRunner::default();
    let ok = r.label_compilability(&unit("x = 1\n"), &sh("c", "exit 0")).unwrap();
    assert_eq!(ok.label, Some(1));
    assert_eq!(ok.evidence[0].exit_code, Some(0));
    let bad = r.label_compilability(&unit("x = 1\n"), &sh("c", "exit 3")).unwrap();
    assert_eq!(bad.label, Some(0));
    assert_eq!(bad.evidence[0].exit_code, Some(3));
    assert_eq!(bad.reason.as_deref(), Some("c: failed"));
}

#[test]
fn file_placeholder_points_at_the_source() {
    let r = OracleRunner::default();
    let cmd = OracleCommand::new("grep", "grep -q needle {file}");
    assert_eq!(r.label_compilability(&unit("needle\n"), &cmd).unwrap().label, Some(1));
    assert_eq!(r.label_compilability(&unit("hay\n"), &cmd).unwrap().label, Some(0));
}

#[test]
fn timeout_is_a_failure() {
    let r = OracleRunner::default();
    let cmd = sh("slow", "sleep 5").with_timeout(0.3);
    let t0 = std::time::Instant::now();
    let out = r.label_compilability(&unit("x\n"), &cmd).unwrap();
    assert!(t0.elapsed() < Duration::from_secs(3));
    assert_eq!(out.label, Some(0));
    assert_eq!(out.evidence[0].status, CheckStatus::Timeout);
    assert_eq!(out.evidence[0].exit_code, None);
}

#[test]
fn functionality_stops_at_first_failure() {
    let r = OracleRunner::default();
    let suite = TestSuite {
        command: "sh -c 'test {test} != bad'".into(),
        tests: vec!["a".into(), "bad".into(), "c".into()],
        timeout_secs: None,
    };
    let out = r.label_functionality(&unit("x\n"), &suite).unwrap();
    assert_eq!(out.label, Some(0));
    assert_eq!(out.evidence.len(), 2);
    assert_eq!(out.reason.as_deref(), Some("bad: failed"));

    let all_pass = TestSuite {
        tests: vec!["a".into(), "b".into()],
        ..suite
    };
    let out = r.label_functionality(&unit("x\n"), &all_pass).unwrap();
    assert_eq!(out.label, Some(1));
    assert_eq!(out.evidence.len(), 2);
}

#[test]
fn functionality_without_tests_is_refused() {
    let suite = TestSuite {
        command: "true".into(),
        tests: vec![],
        timeout_secs: None,
    };
    let err = OracleRunner::default().label_functionality(&unit("x\n"), &suite);
    assert!(matches!(err, Err(Error::Empty(_))));
}

#[test]
fn security_is_conjunctive() {
    let r = OracleRunner::default();
    let pass = sh("a", "exit 0");
    let fail = sh("b", "exit 1");
    let out = r.label_security(&unit("x\n"), &[pass.clone(), pass.clone()]).unwrap();
    assert_eq!(out.label, Some(1));
    let out = r.label_security(&unit("x\n"), &[pass, fail]).unwrap();
    assert_eq!(out.label, Some(0));
    assert_eq!(out.evidence.len(), 2);
}

#[test]
fn security_without_analyzers_is_unlabeled() {
    let r = OracleRunner::default();
    let out = r.label_security(&unit("x\n"), &[]).unwrap();
    assert_eq!(out.label, None);
    let missing = OracleCommand::new("ghost", "definitely-not-a-real-analyzer-xyz {file}");
    let out = r.label_security(&unit("x\n"), &[missing]).unwrap();
    assert_eq!(out.label, None);
    assert!(out.reason.unwrap().contains("ghost"));
}

#[test]
fn missing_compiler_is_an_error() {
    let cmd = OracleCommand::new("cc", "definitely-not-a-real-compiler-xyz {file}");
    let err = OracleRunner::default().label_compilability(&unit("x\n"), &cmd);
    assert!(matches!(err, Err(Error::CommandNotFound(_))));
}

#[test]
fn units_run_in_separate_directories() {
    let root = tempfile::tempdir().unwrap();
    let r = OracleRunner {
        tmp_root: Some(root.path().to_path_buf()),
        file_name: None,
    };
    // Leaves a marker and fails if one is already present.
    let cmd = sh("iso", "test ! -e marker && touch marker");
    for _ in 0..3 {
        assert_eq!(r.label_compilability(&unit("x\n"), &cmd).unwrap().label, Some(1));
    }
    // workdirs are removed afterwards
    assert_eq!(fs::read_dir(root.path()).unwrap().count(), 0);
}

#[test]
fn output_digest_is_stable() {
    let r = OracleRunner::default();
    let cmd = sh("echo", "echo hello");
    let a = r.label_compilability(&unit("x\n"), &cmd).unwrap();
    let b = r.label_compilability(&unit("x\n"), &cmd).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.evidence[0].output_digest, hex::encode(Sha256::digest(b"hello\n")));
}

#[test]
fn file_name_follows_language() {
    assert_eq!(default_file_name("Python"), "main.py");
    assert_eq!(default_file_name("c"), "main.c");
    assert_eq!(default_file_name("cobol"), "main.txt");
}

#[test]
fn config_parses_and_validates() {
    let json = br#"{
        "timeout_secs": 5,
        "parallelism": 2,
        "compilability": {"name": "py", "command": "python3 -m py_compile {file}"},
        "functionality": {"command": "sh {test}", "tests": ["t1"]},
        "security": [{"name": "lint", "command": "true", "timeout_secs": 1}]
    }"#;
    let cfg = OracleConfig::from_json(json).unwrap();
    assert_eq!(cfg.parallelism, 2);
    assert_eq!(cfg.security[0].timeout_secs, Some(1.0));
    assert!(OracleConfig::from_json(br#"{"timeout_secs": 0}"#).is_err());
    assert!(OracleConfig::from_json(br#"{"compilability": {"command": "  "}}"#).is_err());
    assert!(OracleConfig::from_json(b"[").is_err());
}

fn manifest(ids: &[&str]) -> DatasetManifest {
    let mut m = DatasetManifest::new(4, 2, vec![1, 2], crate::repr_store::PositionsSchema::Boundary4);
    for id in ids {
        let mut r = SampleRecord::new(*id, 6);
        r.first_code_idx = Some(1);
        r.last_code_idx = Some(4);
        r.language = "python".into();
        m.samples.push(r);
    }
    m
}

fn compile_config() -> OracleConfig {
    OracleConfig {
        compilability: Some(OracleCommand::new("grep", "grep -q ok {file}")),
        parallelism: 2,
        ..OracleConfig::default()
    }
}

#[test]
fn label_dataset_writes_labels_and_counts() {
    let m = manifest(&["a", "b", "c"]);
    let units = vec![
        CodeUnit::new("a", "python", "ok\n"),
        CodeUnit::new("b", "python", "no\n"),
        CodeUnit::new("c", "python", "ok\n"),
    ];
    let (out, report) = label_dataset(
        &m,
        &units,
        &compile_config(),
        LabelKind::Compilability,
        false,
        &OracleRunner::default(),
    )
    .unwrap();
    assert_eq!(out.samples[0].label(LabelKind::Compilability), Some(1));
    assert_eq!(out.samples[1].label(LabelKind::Compilability), Some(0));
    assert!(out.label_kinds_present.contains(&LabelKind::Compilability));
    assert_eq!(report.counts["1"], 2);
    assert_eq!(report.counts["0"], 1);
    assert_eq!(report.counts["unlabeled"], 0);

    // rerun on the labeled manifest needs overwrite, and is idempotent
    let again = label_dataset(
        &out,
        &units,
        &compile_config(),
        LabelKind::Compilability,
        false,
        &OracleRunner::default(),
    );
    assert!(matches!(again, Err(Error::LabelConflict(_))));
    let (out2, report2) = label_dataset(
        &out,
        &units,
        &compile_config(),
        LabelKind::Compilability,
        true,
        &OracleRunner::default(),
    )
    .unwrap();
    assert_eq!(out2, out);
    assert_eq!(report2, report);
}

#[test]
fn label_dataset_rejects_unknown_ids() {
    let m = manifest(&["a"]);
    let units = vec![CodeUnit::new("zz", "python", "ok\n")];
    let err = label_dataset(
        &m,
        &units,
        &compile_config(),
        LabelKind::Compilability,
        false,
        &OracleRunner::default(),
    );
    assert!(matches!(err, Err(Error::UnknownSample(id)) if id == "zz"));
}

#[test]
fn load_units_from_json_and_directory() {
    let m = manifest(&["a", "b"]);
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("src.json");
    fs::write(&json, r#"{"b": "print(2)", "a": "print(1)"}"#).unwrap();
    let units = load_units(&json, &m).unwrap();
    assert_eq!(units.len(), 2);
    assert_eq!(units[0].sample_id, "a");
    assert_eq!(units[0].language, "python");

    let srcdir = dir.path().join("src");
    fs::create_dir(&srcdir).unwrap();
    fs::write(srcdir.join("b.py"), "print(2)").unwrap();
    let units = load_units(&srcdir, &m).unwrap();
    assert_eq!(units.len(), 1);
    assert_eq!(units[0].source_text, "print(2)");

    fs::write(&json, r#"{"nope": "x"}"#).unwrap();
    assert!(matches!(load_units(&json, &m), Err(Error::UnknownSample(_))));
}

#[test]
fn workdir_path_is_masked_in_digests() {
    assert_eq!(mask(b"x /tmp/a/f.py y", b"/tmp/a"), b"x {workdir}/f.py y");
    let r = OracleRunner::default();
    let cmd = OracleCommand::new("echo", "echo {file}");
    let a = r.label_compilability(&unit("x\n"), &cmd).unwrap();
    let b = r.label_compilability(&unit("x\n"), &cmd).unwrap();
    assert_eq!(a.evidence[0].output_digest, b.evidence[0].output_digest);
    assert_eq!(
        a.evidence[0].output_digest,
        hex::encode(Sha256::digest(b"{workdir}/main.py\n"))
    );
}
