//! Ground-truth labels from external commands.
//!
//! Every check is a command template whose exit status decides the outcome:
//! 0 is success, anything else (including a timeout) is failure. A label
//! is 1 only when every configured check succeeds. Each unit runs in its own
//! fresh temporary directory; there is no further sandboxing, so untrusted
//! code should be labeled inside a container.

mod exec;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::repr_store::{DatasetManifest, LabelKind};
use crate::{Error, Result};
use exec::{run_template, RunStatus};

pub const DEFAULT_TIMEOUT_SECS: f64 = 30.0;
/// Environment variable naming the parent directory for unit workdirs.
pub const TMPDIR_ENV: &str = "AUTOPROBE_TMPDIR";

/// A command template. Placeholders: `{file}` (the unit's source file),
/// `{workdir}` (its private directory) and, for tests, `{test}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCommand {
    #[serde(default)]
    pub name: String,
    pub command: String,
    #[serde(default)]
    pub timeout_secs: Option<f64>,
}

impl OracleCommand {
    pub fn new(name: &str, command: &str) -> Self {
        Self {
            name: name.to_string(),
            command: command.to_string(),
            timeout_secs: None,
        }
    }

    pub fn with_timeout(mut self, secs: f64) -> Self {
        self.timeout_secs = Some(secs);
        self
    }

    fn timeout(&self) -> Result<Duration> {
        let secs = self.timeout_secs.unwrap_or(DEFAULT_TIMEOUT_SECS);
        if !(secs > 0.0 && secs.is_finite()) {
            return Err(Error::Config(format!("timeout for '{}' must be > 0", self.name)));
        }
        Ok(Duration::from_secs_f64(secs))
    }

    fn display_name(&self) -> &str {
        if self.name.is_empty() {
            &self.command
        } else {
            &self.name
        }
    }
}

/// A test runner template (with `{test}`) and the tests to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSuite {
    pub command: String,
    pub tests: Vec<String>,
    #[serde(default)]
    pub timeout_secs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeUnit {
    pub sample_id: String,
    pub source_text: String,
    #[serde(default)]
    pub language: String,
    #[serde(default)]
    pub tests: Option<TestSuite>,
    #[serde(default)]
    pub security_checks: Vec<OracleCommand>,
}

impl CodeUnit {
    pub fn new(sample_id: &str, language: &str, source_text: &str) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            source_text: source_text.to_string(),
            language: language.to_string(),
            tests: None,
            security_checks: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Passed,
    Failed,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckEvidence {
    pub name: String,
    pub status: CheckStatus,
    pub exit_code: Option<i32>,
    /// SHA-256 of the captured stdout followed by stderr, with the unit's
    /// temporary directory replaced by `{workdir}`.
    pub output_digest: String,
}

/// A label (or `None` for unlabeled) with the evidence behind it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelOutcome {
    pub label: Option<u8>,
    pub evidence: Vec<CheckEvidence>,
    pub reason: Option<String>,
}

impl LabelOutcome {
    fn conjunction(evidence: Vec<CheckEvidence>) -> Self {
        let failed = evidence.iter().find(|e| e.status != CheckStatus::Passed);
        let reason = failed.map(|e| {
            let what = match e.status {
                CheckStatus::Timeout => "timeout",
                _ => "failed",
            };
            format!("{}: {what}", e.name)
        });
        Self {
            label: Some(u8::from(failed.is_none())),
            evidence,
            reason,
        }
    }

    fn unlabeled(reason: String) -> Self {
        Self {
            label: None,
            evidence: Vec::new(),
            reason: Some(reason),
        }
    }
}

/// Creates per-unit working directories and runs checks inside them.
#[derive(Debug, Clone, Default)]
pub struct OracleRunner {
    /// Parent of the per-unit directories; the system temp dir when unset.
    pub tmp_root: Option<PathBuf>,
    /// Source file name; derived from the language when unset.
    pub file_name: Option<String>,
}

struct Workdir {
    dir: tempfile::TempDir,
    file: PathBuf,
}

impl OracleRunner {
    /// Honors `AUTOPROBE_TMPDIR`.
    pub fn from_env() -> Self {
        Self {
            tmp_root: std::env::var_os(TMPDIR_ENV).map(PathBuf::from),
            file_name: None,
        }
    }

    fn workdir(&self, unit: &CodeUnit) -> Result<Workdir> {
        if unit.source_text.is_empty() {
            return Err(Error::Config(format!("unit '{}' has empty source", unit.sample_id)));
        }
        let root = self.tmp_root.clone().unwrap_or_else(std::env::temp_dir);
        let dir = tempfile::Builder::new()
            .prefix("autoprobe-unit-")
            .tempdir_in(&root)
            .map_err(|e| Error::Sandbox(format!("creating workdir in {}: {e}", root.display())))?;
        let name = self
            .file_name
            .clone()
            .unwrap_or_else(|| default_file_name(&unit.language).to_string());
        let file = dir.path().join(name);
        fs::write(&file, &unit.source_text).map_err(|e| Error::Sandbox(format!("writing {}: {e}", file.display())))?;
        Ok(Workdir { dir, file })
    }

    fn check(&self, wd: &Workdir, cmd: &OracleCommand, name: &str, test: Option<&str>) -> Result<CheckEvidence> {
        let file = wd.file.to_string_lossy();
        let workdir = wd.dir.path().to_string_lossy();
        let mut vars = vec![("file", file.as_ref()), ("workdir", workdir.as_ref())];
        if let Some(t) = test {
            vars.push(("test", t));
        }
        let run = run_template(&cmd.command, &vars, wd.dir.path(), cmd.timeout()?)?;
        let (status, exit_code) = match run.status {
            RunStatus::Exited(0) => (CheckStatus::Passed, Some(0)),
            RunStatus::Exited(c) => (CheckStatus::Failed, Some(c)),
            RunStatus::Signaled => (CheckStatus::Failed, None),
            RunStatus::TimedOut => (CheckStatus::Timeout, None),
        };
        Ok(CheckEvidence {
            name: name.to_string(),
            status,
            exit_code,
            output_digest: hex::encode(Sha256::digest(mask(&run.output, workdir.as_bytes()))),
        })
    }

    /// 1 iff the compile/parse command exits 0 within its timeout.
    pub fn label_compilability(&self, unit: &CodeUnit, cmd: &OracleCommand) -> Result<LabelOutcome> {
        let wd = self.workdir(unit)?;
        let ev = self.check(&wd, cmd, cmd.display_name(), None)?;
        Ok(LabelOutcome::conjunction(vec![ev]))
    }

    /// 1 iff every test exits 0. Stops at the first failing test, which is
    /// the last evidence entry.
    pub fn label_functionality(&self, unit: &CodeUnit, suite: &TestSuite) -> Result<LabelOutcome> {
        if suite.tests.is_empty() {
            return Err(Error::Empty(format!("no tests for unit '{}'", unit.sample_id)));
        }
        let wd = self.workdir(unit)?;
        let cmd = OracleCommand {
            name: String::new(),
            command: suite.command.clone(),
            timeout_secs: suite.timeout_secs,
        };
        let mut evidence = Vec::with_capacity(suite.tests.len());
        for test in &suite.tests {
            let ev = self.check(&wd, &cmd, test, Some(test))?;
            let failed = ev.status != CheckStatus::Passed;
            evidence.push(ev);
            if failed {
                break;
            }
        }
        Ok(LabelOutcome::conjunction(evidence))
    }

    /// 1 iff every analyzer exits 0. No analyzers, or a missing analyzer
    /// binary, leaves the unit unlabeled.
    pub fn label_security(&self, unit: &CodeUnit, checks: &[OracleCommand]) -> Result<LabelOutcome> {
        if checks.is_empty() {
            return Ok(LabelOutcome::unlabeled("no analyzers configured".into()));
        }
        let wd = self.workdir(unit)?;
        let mut evidence = Vec::with_capacity(checks.len());
        for cmd in checks {
            match self.check(&wd, cmd, cmd.display_name(), None) {
                Ok(ev) => evidence.push(ev),
                Err(Error::CommandNotFound(bin)) => {
                    return Ok(LabelOutcome::unlabeled(format!(
                        "analyzer '{}' not found ({bin})",
                        cmd.display_name()
                    )))
                }
                Err(e) => return Err(e),
            }
        }
        Ok(LabelOutcome::conjunction(evidence))
    }
}

// Output often echoes the random workdir path; mask it so digests repeat.
fn mask(output: &[u8], path: &[u8]) -> Vec<u8> {
    if path.is_empty() {
        return output.to_vec();
    }
    let mut out = Vec::with_capacity(output.len());
    let mut i = 0;
    while i < output.len() {
        if output[i..].starts_with(path) {
            out.extend_from_slice(b"{workdir}");
            i += path.len();
        } else {
            out.push(output[i]);
            i += 1;
        }
    }
    out
}

fn default_file_name(language: &str) -> &'static str {
    match language.to_ascii_lowercase().as_str() {
        "python" | "py" => "main.py",
        "c" => "main.c",
        "cpp" | "c++" => "main.cpp",
        "rust" | "rs" => "main.rs",
        "java" => "Main.java",
        "javascript" | "js" => "main.js",
        "go" => "main.go",
        _ => "main.txt",
    }
}

/// Functionality test configuration: one runner template, a default test
/// list, and optional per-unit test lists.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FunctionalityConfig {
    pub command: String,
    pub tests: Vec<String>,
    pub per_unit: BTreeMap<String, Vec<String>>,
    pub timeout_secs: Option<f64>,
}

/// The oracle config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// Default per-command timeout.
    pub timeout_secs: f64,
    pub parallelism: usize,
    pub file_name: Option<String>,
    pub compilability: Option<OracleCommand>,
    pub functionality: Option<FunctionalityConfig>,
    pub security: Vec<OracleCommand>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            parallelism: 1,
            file_name: None,
            compilability: None,
            functionality: None,
            security: Vec::new(),
        }
    }
}

impl OracleConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::Config("timeout_secs must be > 0".into()));
        }
        let commands = self.compilability.iter().chain(&self.security);
        for c in commands {
            self.with_default_timeout(c).timeout()?;
            if c.command.trim().is_empty() {
                return Err(Error::Config("empty command template".into()));
            }
        }
        Ok(())
    }

    fn with_default_timeout(&self, cmd: &OracleCommand) -> OracleCommand {
        let mut c = cmd.clone();
        c.timeout_secs = c.timeout_secs.or(Some(self.timeout_secs));
        c
    }

    fn suite_for(&self, unit: &CodeUnit) -> Result<TestSuite> {
        if let Some(s) = &unit.tests {
            return Ok(s.clone());
        }
        let f = self
            .functionality
            .as_ref()
            .ok_or_else(|| Error::Config("no functionality tests configured".into()))?;
        Ok(TestSuite {
            command: f.command.clone(),
            tests: f.per_unit.get(&unit.sample_id).unwrap_or(&f.tests).clone(),
            timeout_secs: f.timeout_secs.or(Some(self.timeout_secs)),
        })
    }

    fn outcome(&self, runner: &OracleRunner, unit: &CodeUnit, kind: LabelKind) -> Result<LabelOutcome> {
        match kind {
            LabelKind::Compilability => {
                let cmd = self
                    .compilability
                    .as_ref()
                    .ok_or_else(|| Error::Config("no compilability command configured".into()))?;
                runner.label_compilability(unit, &self.with_default_timeout(cmd))
            }
            LabelKind::Functionality => runner.label_functionality(unit, &self.suite_for(unit)?),
            LabelKind::Security => {
                let checks: Vec<OracleCommand> = self
                    .security
                    .iter()
                    .chain(&unit.security_checks)
                    .map(|c| self.with_default_timeout(c))
                    .collect();
                runner.label_security(unit, &checks)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitReport {
    pub sample_id: String,
    pub label: Option<u8>,
    pub reason: Option<String>,
    pub evidence: Vec<CheckEvidence>,
}

/// Per-class counts (`"0"`, `"1"`, `"unlabeled"`) and per-unit evidence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelingReport {
    pub kind: LabelKind,
    pub counts: BTreeMap<String, usize>,
    pub units: Vec<UnitReport>,
}

/// Labels `units` for `kind` and returns the updated manifest. Nothing is
/// written back unless every unit was processed. Existing labels of `kind`
/// are only replaced with `overwrite`.
pub fn label_dataset(
    manifest: &DatasetManifest,
    units: &[CodeUnit],
    config: &OracleConfig,
    kind: LabelKind,
    overwrite: bool,
    runner: &OracleRunner,
) -> Result<(DatasetManifest, LabelingReport)> {
    config.validate()?;
    let index: HashMap<&str, usize> = manifest
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    for unit in units {
        let i = *index
            .get(unit.sample_id.as_str())
            .ok_or_else(|| Error::UnknownSample(unit.sample_id.clone()))?;
        if !overwrite && manifest.samples[i].labels.contains_key(&kind) {
            return Err(Error::LabelConflict(format!(
                "sample '{}' already has a {kind} label (use overwrite)",
                unit.sample_id
            )));
        }
    }

    let mut runner = runner.clone();
    if runner.file_name.is_none() {
        runner.file_name = config.file_name.clone();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism.max(1))
        .build()
        .map_err(|e| Error::Sandbox(format!("thread pool: {e}")))?;
    let outcomes: Vec<LabelOutcome> = pool.install(|| {
        units
            .par_iter()
            .map(|u| config.outcome(&runner, u, kind))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut updated = manifest.clone();
    let mut counts: BTreeMap<String, usize> = ["0", "1", "unlabeled"].iter().map(|k| (k.to_string(), 0)).collect();
    let mut reports = Vec::with_capacity(units.len());
    for (unit, outcome) in units.iter().zip(outcomes) {
        let record = &mut updated.samples[index[unit.sample_id.as_str()]];
        match outcome.label {
            Some(l) => {
                record.labels.insert(kind, l);
            }
            None => {
                record.labels.remove(&kind);
            }
        }
        let key = outcome.label.map_or("unlabeled".to_string(), |l| l.to_string());
        *counts.entry(key).or_default() += 1;
        reports.push(UnitReport {
            sample_id: unit.sample_id.clone(),
            label: outcome.label,
            reason: outcome.reason,
            evidence: outcome.evidence,
        });
    }
    updated.refresh_label_kinds();
    Ok((
        updated,
        LabelingReport {
            kind,
            counts,
            units: reports,
        },
    ))
}

/// Loads code units for the samples of `manifest`.
///
/// `path` is either a JSON object mapping sample id to source text, or a
/// directory whose files are named `<sample_id>.<ext>`.
pub fn load_units(path: &Path, manifest: &DatasetManifest) -> Result<Vec<CodeUnit>> {
    let language: HashMap<&str, &str> = manifest
        .samples
        .iter()
        .map(|s| (s.id.as_str(), s.language.as_str()))
        .collect();
    let mut sources: BTreeMap<String, String> = BTreeMap::new();
    if path.is_dir() {
        for entry in fs::read_dir(path)? {
            let p = entry?.path();
            if !p.is_file() {
                continue;
            }
            let Some(stem) = p.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            sources.insert(stem.to_string(), fs::read_to_string(&p)?);
        }
    } else {
        sources = serde_json::from_slice(&fs::read(path)?)?;
    }
    // manifest order
    let mut units = Vec::with_capacity(sources.len());
    for s in &manifest.samples {
        if let Some(text) = sources.remove(&s.id) {
            units.push(CodeUnit::new(&s.id, language[s.id.as_str()], &text));
        }
    }
    if let Some(extra) = sources.keys().next() {
        return Err(Error::UnknownSample(extra.clone()));
    }
    Ok(units)
}

#[cfg(test)]
mod tests;
