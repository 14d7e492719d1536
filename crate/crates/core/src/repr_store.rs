//! The APRB1 hidden-state container and the in-memory dataset model.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "APRB1\0" | u32 format_version | u64 manifest_len | manifest JSON | payload
//! ```
//!
//! The payload concatenates each sample's tensor in manifest order, row-major
//! `[layer, position, d]`, as float32 LE. Sample offsets are relative to the
//! start of the payload and must be contiguous; the file ends exactly where
//! the last sample's tensor ends.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, Cursor, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::sampling::{stored_positions, TokenPosition};
use crate::{Error, Result};

pub const DATASET_MAGIC: [u8; 6] = *b"APRB1\0";
pub const DATASET_FORMAT_VERSION: u32 = 1;
/// Magic + version + manifest length.
pub const HEADER_LEN: u64 = 6 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Compilability,
    Functionality,
    Security,
}

impl LabelKind {
    pub const ALL: [LabelKind; 3] = [LabelKind::Compilability, LabelKind::Functionality, LabelKind::Security];

    pub fn name(self) -> &'static str {
        match self {
            LabelKind::Compilability => "compilability",
            LabelKind::Functionality => "functionality",
            LabelKind::Security => "security",
        }
    }
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LabelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LabelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown label kind '{s}'")))
    }
}

/// Which token positions each sample's tensor stores.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositionsSchema {
    /// first token, last token, first code token, last code token
    #[serde(rename = "boundary4")]
    Boundary4,
    /// token indices `0..n`, zero-filled past the sequence end
    #[serde(rename = "full")]
    Full(usize),
    #[serde(rename = "custom")]
    Custom(Vec<usize>),
}

impl PositionsSchema {
    pub fn positions_per_layer(&self) -> usize {
        match self {
            PositionsSchema::Boundary4 => 4,
            PositionsSchema::Full(n) => *n,
            PositionsSchema::Custom(v) => v.len(),
        }
    }
}

/// One generated code unit.
///
/// A label of 1 means correct, 0 incorrect; a kind missing from `labels` is
/// unlabeled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// Token count of the generated sequence.
    pub m: usize,
    #[serde(default)]
    pub first_code_idx: Option<usize>,
    #[serde(default)]
    pub last_code_idx: Option<usize>,
    #[serde(default)]
    pub labels: BTreeMap<LabelKind, u8>,
    #[serde(default)]
    pub benchmark: String,
    #[serde(default)]
    pub model_name: String,
    #[serde(default)]
    pub language: String,
    #[serde(default)]
    pub payload_offset: u64,
    #[serde(default)]
    pub payload_length: u64,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, m: usize) -> Self {
        Self {
            id: id.into(),
            m,
            first_code_idx: None,
            last_code_idx: None,
            labels: BTreeMap::new(),
            benchmark: String::new(),
            model_name: String::new(),
            language: String::new(),
            payload_offset: 0,
            payload_length: 0,
        }
    }

    pub fn label(&self, kind: LabelKind) -> Option<u8> {
        self.labels.get(&kind).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub hidden_dim: usize,
    pub model_layer_count: usize,
    pub layers_stored: Vec<usize>,
    pub positions_schema: PositionsSchema,
    #[serde(default)]
    pub label_kinds_present: BTreeSet<LabelKind>,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn new(
        hidden_dim: usize,
        model_layer_count: usize,
        layers_stored: Vec<usize>,
        positions_schema: PositionsSchema,
    ) -> Self {
        Self {
            format_version: DATASET_FORMAT_VERSION,
            hidden_dim,
            model_layer_count,
            layers_stored,
            positions_schema,
            label_kinds_present: BTreeSet::new(),
            samples: Vec::new(),
        }
    }

    /// Tensor size in bytes every sample must have.
    pub fn sample_payload_len(&self) -> u64 {
        [self.positions_schema.positions_per_layer(), self.hidden_dim, 4]
            .iter()
            .fold(self.layers_stored.len() as u64, |acc, &n| acc.saturating_mul(n as u64))
    }

    /// Lays samples out contiguously in manifest order.
    pub fn assign_offsets(&mut self) {
        let len = self.sample_payload_len();
        let mut offset = 0;
        for s in &mut self.samples {
            s.payload_offset = offset;
            s.payload_length = len;
            offset += len;
        }
    }

    pub fn payload_len(&self) -> u64 {
        self.samples.iter().map(|s| s.payload_length).sum()
    }

    /// Recomputes `label_kinds_present` from the sample labels.
    pub fn refresh_label_kinds(&mut self) {
        self.label_kinds_present = self.samples.iter().flat_map(|s| s.labels.keys().copied()).collect();
    }
}

/// One sample's stored tensor `[layers x positions x d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenBlock {
    pub hidden_dim: usize,
    pub layers: Vec<usize>,
    pub positions: Vec<TokenPosition>,
    pub values: Vec<f32>,
}

impl HiddenBlock {
    pub fn row(&self, layer_slot: usize, position_slot: usize) -> &[f32] {
        let start = (layer_slot * self.positions.len() + position_slot) * self.hidden_dim;
        &self.values[start..start + self.hidden_dim]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.layers.len(), self.positions.len(), self.hidden_dim]
    }
}

/// Every broken invariant of `manifest`, one description each. Empty iff
/// the manifest is well formed.
pub fn validate_manifest(manifest: &DatasetManifest) -> Vec<String> {
    let mut v = Vec::new();
    if manifest.format_version != DATASET_FORMAT_VERSION {
        v.push(format!("unsupported format_version {}", manifest.format_version));
    }
    if manifest.hidden_dim == 0 {
        v.push("hidden_dim must be >= 1".into());
    }
    if manifest.model_layer_count == 0 {
        v.push("model_layer_count must be >= 1".into());
    }
    if manifest.layers_stored.is_empty() {
        v.push("layers_stored is empty".into());
    }
    if manifest.layers_stored.windows(2).any(|w| w[0] >= w[1]) {
        v.push("layers_stored not strictly increasing".into());
    }
    if let Some(l) = manifest
        .layers_stored
        .iter()
        .find(|&&l| l == 0 || l > manifest.model_layer_count)
    {
        v.push(format!("stored layer {l} outside 1..={}", manifest.model_layer_count));
    }
    match &manifest.positions_schema {
        PositionsSchema::Full(0) => v.push("full positions schema needs length >= 1".into()),
        PositionsSchema::Custom(p) if p.is_empty() => v.push("custom positions schema is empty".into()),
        _ => {}
    }

    let expected_len = manifest.sample_payload_len();
    let mut seen = HashSet::new();
    let mut offset = 0u64;
    for s in &manifest.samples {
        let at = |msg: String| format!("sample '{}': {msg}", s.id);
        if s.id.is_empty() {
            v.push("sample with empty id".into());
        }
        if !seen.insert(s.id.as_str()) {
            v.push(at("duplicate id".into()));
        }
        if s.m == 0 {
            v.push(at("token count m must be >= 1".into()));
        }
        match (s.first_code_idx, s.last_code_idx) {
            (Some(a), Some(b)) => {
                if a > b {
                    v.push(at(format!("first_code_idx {a} > last_code_idx {b}")));
                }
                if b >= s.m {
                    v.push(at(format!("last_code_idx {b} >= m {}", s.m)));
                }
            }
            (None, None) => {}
            _ => v.push(at("code span must be both present or both null".into())),
        }
        for (kind, value) in &s.labels {
            if *value > 1 {
                v.push(at(format!("label not in {{0,1}} ({kind}={value})")));
            }
            if !manifest.label_kinds_present.contains(kind) {
                v.push(at(format!("label kind {kind} not declared in label_kinds_present")));
            }
        }
        if s.payload_length != expected_len {
            v.push(at(format!(
                "payload_length {} != expected {expected_len}",
                s.payload_length
            )));
        }
        if s.payload_offset != offset {
            v.push(at(format!("payload_offset {} != expected {offset}", s.payload_offset)));
        }
        offset = offset.saturating_add(s.payload_length);
    }
    v
}

/// Writes `manifest` and `blocks` as an APRB1 container.
///
/// Payload offsets and lengths are assigned by the writer; whatever the
/// manifest carries is overwritten.
pub fn write_dataset<W: Write>(manifest: &DatasetManifest, blocks: &[HiddenBlock], mut sink: W) -> Result<u64> {
    if blocks.len() != manifest.samples.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} blocks for {} samples",
            blocks.len(),
            manifest.samples.len()
        )));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = manifest.samples.iter().find(|s| !seen.insert(s.id.as_str())) {
        return Err(Error::DuplicateId(dup.id.clone()));
    }
    let mut manifest = manifest.clone();
    manifest.assign_offsets();
    if let Some(first) = validate_manifest(&manifest).into_iter().next() {
        return Err(Error::Invalid(first));
    }

    let per_layer = manifest.positions_schema.positions_per_layer();
    for (s, b) in manifest.samples.iter().zip(blocks) {
        if b.layers != manifest.layers_stored
            || b.positions.len() != per_layer
            || b.hidden_dim != manifest.hidden_dim
            || b.values.len() != manifest.layers_stored.len() * per_layer * manifest.hidden_dim
        {
            return Err(Error::ShapeMismatch(format!(
                "sample '{}': block shape {:?} with {} values, expected [{}, {per_layer}, {}]",
                s.id,
                b.shape(),
                b.values.len(),
                manifest.layers_stored.len(),
                manifest.hidden_dim
            )));
        }
        if b.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(s.id.clone()));
        }
    }

    let json = serde_json::to_vec(&manifest)?;
    sink.write_all(&DATASET_MAGIC)?;
    sink.write_all(&DATASET_FORMAT_VERSION.to_le_bytes())?;
    sink.write_all(&(json.len() as u64).to_le_bytes())?;
    sink.write_all(&json)?;
    let mut buf = Vec::new();
    for b in blocks {
        buf.clear();
        buf.reserve(b.values.len() * 4);
        for x in &b.values {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        sink.write_all(&buf)?;
    }
    sink.flush()?;
    Ok(HEADER_LEN + json.len() as u64 + manifest.payload_len())
}

trait BlockSource: Read + Seek + Send {}
impl<T: Read + Seek + Send> BlockSource for T {}

/// A validated dataset. The manifest is held in memory; tensors are read
/// from the underlying source on demand, one sample range at a time.
pub struct Dataset {
    manifest: DatasetManifest,
    index: HashMap<String, usize>,
    payload_start: u64,
    source: Mutex<Box<dyn BlockSource>>,
}

impl fmt::Debug for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dataset")
            .field("samples", &self.manifest.samples.len())
            .field("hidden_dim", &self.manifest.hidden_dim)
            .field("layers_stored", &self.manifest.layers_stored)
            .finish()
    }
}

/// Reads and validates an APRB1 container. Only the header and manifest
/// are read eagerly; tensors are checked when their block is loaded (see
/// [`Dataset::verify_payload`] for a full scan).
pub fn read_dataset<R: Read + Seek + Send + 'static>(mut source: R) -> Result<Dataset> {
    let total = source.seek(SeekFrom::End(0))?;
    source.seek(SeekFrom::Start(0))?;

    let mut magic = [0u8; 6];
    if total < 6 {
        return Err(Error::BadMagic);
    }
    source.read_exact(&mut magic)?;
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic);
    }
    if total < HEADER_LEN {
        return Err(Error::Malformed("header truncated".into()));
    }
    let mut word = [0u8; 4];
    source.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut dword = [0u8; 8];
    source.read_exact(&mut dword)?;
    let manifest_len = u64::from_le_bytes(dword);
    if manifest_len > total - HEADER_LEN {
        return Err(Error::Malformed(format!(
            "manifest length {manifest_len} exceeds file size {total}"
        )));
    }
    let mut json = vec![0u8; manifest_len as usize];
    source.read_exact(&mut json)?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&json).map_err(|e| Error::Malformed(format!("manifest json: {e}")))?;
    if manifest.format_version != version {
        return Err(Error::Malformed(format!(
            "manifest format_version {} disagrees with header {version}",
            manifest.format_version
        )));
    }
    if let Some(first) = validate_manifest(&manifest).into_iter().next() {
        return Err(Error::Invalid(first));
    }

    let payload_start = HEADER_LEN + manifest_len;
    let available = total - payload_start;
    if let Some(s) = manifest
        .samples
        .iter()
        .find(|s| s.payload_offset.saturating_add(s.payload_length) > available)
    {
        return Err(Error::Truncated {
            sample_id: s.id.clone(),
        });
    }
    if available != manifest.payload_len() {
        return Err(Error::Malformed(format!(
            "{} trailing payload bytes",
            available - manifest.payload_len()
        )));
    }

    let index = manifest
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.clone(), i))
        .collect();
    Ok(Dataset {
        manifest,
        index,
        payload_start,
        source: Mutex::new(Box::new(source)),
    })
}

impl Dataset {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        read_dataset(BufReader::new(File::open(path)?))
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        read_dataset(Cursor::new(bytes))
    }

    /// Writes and re-reads in memory; handy for generated datasets.
    pub fn from_parts(manifest: &DatasetManifest, blocks: &[HiddenBlock]) -> Result<Self> {
        let mut buf = Vec::new();
        write_dataset(manifest, blocks, &mut buf)?;
        Self::from_bytes(buf)
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn samples(&self) -> &[SampleRecord] {
        &self.manifest.samples
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn hidden_dim(&self) -> usize {
        self.manifest.hidden_dim
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.samples.iter().map(|s| s.id.as_str())
    }

    pub fn record(&self, id: &str) -> Result<&SampleRecord> {
        self.index
            .get(id)
            .map(|&i| &self.manifest.samples[i])
            .ok_or_else(|| Error::UnknownSample(id.to_string()))
    }

    /// Loads one sample's tensor, touching only its payload range.
    pub fn block(&self, id: &str) -> Result<HiddenBlock> {
        let record = self.record(id)?;
        let mut bytes = vec![0u8; record.payload_length as usize];
        {
            let mut src = self.source.lock().unwrap_or_else(|e| e.into_inner());
            src.seek(SeekFrom::Start(self.payload_start + record.payload_offset))?;
            src.read_exact(&mut bytes).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Error::Truncated {
                    sample_id: record.id.clone(),
                },
                _ => Error::Io(e),
            })?;
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(record.id.clone()));
        }
        Ok(HiddenBlock {
            hidden_dim: self.manifest.hidden_dim,
            layers: self.manifest.layers_stored.clone(),
            positions: stored_positions(&self.manifest.positions_schema, record),
            values,
        })
    }

    /// Loads every block in manifest order.
    pub fn blocks(&self) -> Result<Vec<HiddenBlock>> {
        self.ids().map(|id| self.block(id)).collect()
    }

    /// Reads the whole payload, failing on the first unreadable or
    /// non-finite sample.
    pub fn verify_payload(&self) -> Result<()> {
        for id in self.ids() {
            self.block(id)?;
        }
        Ok(())
    }

    /// Writes this dataset's tensors under a replacement manifest (same
    /// samples, same order; e.g. after labeling).
    pub fn write_with_manifest<W: Write>(&self, manifest: &DatasetManifest, sink: W) -> Result<u64> {
        if manifest.samples.len() != self.len()
            || manifest.samples.iter().zip(self.samples()).any(|(a, b)| a.id != b.id)
        {
            return Err(Error::ShapeMismatch(
                "replacement manifest must keep the sample list".into(),
            ));
        }
        write_dataset(manifest, &self.blocks()?, sink)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::PositionRole;

    fn tiny_manifest(n: usize) -> DatasetManifest {
        let mut m = DatasetManifest::new(3, 4, vec![1, 3], PositionsSchema::Boundary4);
        for i in 0..n {
            let mut s = SampleRecord::new(format!("s{i}"), 10);
            s.first_code_idx = Some(2);
            s.last_code_idx = Some(7);
            s.labels.insert(LabelKind::Functionality, (i % 2) as u8);
            m.samples.push(s);
        }
        m.refresh_label_kinds();
        m
    }

    fn block_for(m: &DatasetManifest, s: &SampleRecord, fill: f32) -> HiddenBlock {
        let positions = stored_positions(&m.positions_schema, s);
        let n = m.layers_stored.len() * positions.len() * m.hidden_dim;
        HiddenBlock {
            hidden_dim: m.hidden_dim,
            layers: m.layers_stored.clone(),
            positions,
            values: (0..n).map(|i| fill + i as f32).collect(),
        }
    }

    fn blocks(m: &DatasetManifest) -> Vec<HiddenBlock> {
        m.samples
            .iter()
            .enumerate()
            .map(|(i, s)| block_for(m, s, i as f32 * 100.0))
            .collect()
    }

    #[test]
    fn empty_dataset_has_no_payload() {
        let m = DatasetManifest::new(8, 4, vec![1, 2, 3, 4], PositionsSchema::Boundary4);
        let mut buf = Vec::new();
        let n = write_dataset(&m, &[], &mut buf).unwrap();
        assert_eq!(n as usize, buf.len());
        let json_len = u64::from_le_bytes(buf[10..18].try_into().unwrap());
        assert_eq!(buf.len() as u64, HEADER_LEN + json_len);
        assert!(Dataset::from_bytes(buf).unwrap().is_empty());
    }

    #[test]
    fn payload_length_is_shape_times_four() {
        let m = tiny_manifest(1);
        let mut out = m.clone();
        out.assign_offsets();
        assert_eq!(out.samples[0].payload_length, 2 * 4 * 3 * 4);
    }

    #[test]
    fn three_samples_keep_manifest_order() {
        let m = tiny_manifest(3);
        let ds = Dataset::from_parts(&m, &blocks(&m)).unwrap();
        assert_eq!(ds.ids().collect::<Vec<_>>(), vec!["s0", "s1", "s2"]);
        let b = ds.block("s1").unwrap();
        assert_eq!(b.row(1, 3), &[100.0 + 21.0, 122.0, 123.0][..]);
        assert_eq!(b.positions[2].role, PositionRole::FirstCode);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let m = tiny_manifest(1);
        let mut buf = Vec::new();
        write_dataset(&m, &blocks(&m), &mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(Dataset::from_bytes(buf), Err(Error::BadMagic)));
        assert_eq!(Error::BadMagic.to_string(), "bad magic");
    }

    #[test]
    fn truncation_names_first_unreadable_sample() {
        let m = tiny_manifest(3);
        let mut buf = Vec::new();
        write_dataset(&m, &blocks(&m), &mut buf).unwrap();
        buf.truncate(buf.len() - 96 - 10);
        match Dataset::from_bytes(buf) {
            Err(Error::Truncated { sample_id }) => assert_eq!(sample_id, "s1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn writer_rejects_bad_input() {
        let m = tiny_manifest(2);
        let mut b = blocks(&m);
        b[1].values[4] = f32::NAN;
        assert!(matches!(write_dataset(&m, &b, Vec::new()), Err(Error::NonFinite(id)) if id == "s1"));

        let mut b = blocks(&m);
        b[0].values.pop();
        assert!(matches!(
            write_dataset(&m, &b, Vec::new()),
            Err(Error::ShapeMismatch(_))
        ));

        let mut dup = m.clone();
        dup.samples[1].id = "s0".into();
        assert!(matches!(
            write_dataset(&dup, &blocks(&m), Vec::new()),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn non_finite_payload_rejected_on_read() {
        let m = tiny_manifest(1);
        let mut buf = Vec::new();
        write_dataset(&m, &blocks(&m), &mut buf).unwrap();
        let n = buf.len();
        buf[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        let ds = Dataset::from_bytes(buf).unwrap();
        assert!(matches!(ds.verify_payload(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn violations_are_reported() {
        let mut m = tiny_manifest(2);
        m.assign_offsets();
        assert!(validate_manifest(&m).is_empty());

        let mut bad = m.clone();
        bad.samples[0].first_code_idx = Some(8);
        let v = validate_manifest(&bad);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("s0"));

        let mut bad = m.clone();
        bad.samples[1].labels.insert(LabelKind::Functionality, 2);
        let v = validate_manifest(&bad);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("label not in {0,1}"));

        let mut bad = m;
        bad.layers_stored = vec![3, 1];
        assert!(!validate_manifest(&bad).is_empty());
    }

    #[test]
    fn unsupported_version() {
        let m = tiny_manifest(1);
        let mut buf = Vec::new();
        write_dataset(&m, &blocks(&m), &mut buf).unwrap();
        buf[6] = 2;
        assert!(matches!(Dataset::from_bytes(buf), Err(Error::UnsupportedVersion(2))));
    }
}
