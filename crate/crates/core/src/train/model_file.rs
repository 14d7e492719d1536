//! APRM1 probe model files.
//!
//! ```text
//! "APRM1\0" | u32 version | u64 header_len | header JSON | f32 LE parameters
//! ```
//!
//! Parameters follow [`ProbeParams::slices`] order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{InputLayout, ModelSpec, ProbeModel, ProbeParams, Provenance};
use crate::predictor::{Aggregator, ClassifierSpec, PredictorParams};
use crate::selector::AttentionParams;
use crate::{Error, Result};

pub const MODEL_MAGIC: [u8; 6] = *b"APRM1\0";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    spec: ModelSpec,
    layout: InputLayout,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
}

pub fn save_model<W: Write>(probe: &ProbeModel, mut sink: W) -> Result<u64> {
    if !probe.params.is_finite() {
        return Err(Error::Model("refusing to save non-finite parameters".into()));
    }
    let names = probe.params.tensor_names();
    let tensors = names
        .into_iter()
        .zip(probe.params.slices())
        .map(|(name, s)| TensorEntry { name, len: s.len() })
        .collect();
    let header = ModelHeader {
        spec: probe.spec.clone(),
        layout: probe.layout.clone(),
        provenance: probe.provenance.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut payload = Vec::with_capacity(probe.parameter_count() * 4);
    for s in probe.params.slices() {
        for v in s {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    sink.write_all(&MODEL_MAGIC)?;
    sink.write_all(&MODEL_FORMAT_VERSION.to_le_bytes())?;
    sink.write_all(&(json.len() as u64).to_le_bytes())?;
    sink.write_all(&json)?;
    sink.write_all(&payload)?;
    sink.flush()?;
    Ok((6 + 4 + 8 + json.len() + payload.len()) as u64)
}

/// Parses a model file; any inconsistency fails the whole load.
pub fn load_model<R: Read>(mut source: R) -> Result<ProbeModel> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    parse_model(&bytes)
}

fn parse_model(bytes: &[u8]) -> Result<ProbeModel> {
    if bytes.len() < 6 || bytes[..6] != MODEL_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 18 {
        return Err(Error::Model("header truncated".into()));
    }
    let version = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes"));
    let rest = &bytes[18..];
    if header_len > rest.len() as u64 {
        return Err(Error::Model("header length exceeds file".into()));
    }
    let (json, payload) = rest.split_at(header_len as usize);
    let header: ModelHeader = serde_json::from_slice(json).map_err(|e| Error::Model(format!("header json: {e}")))?;

    let layout = &header.layout;
    if layout.hidden_dim == 0 || layout.rows == 0 {
        return Err(Error::Model("empty input layout".into()));
    }
    if layout.layers.len().checked_mul(header.spec.positions_per_layer()) != Some(layout.rows) {
        return Err(Error::Model(
            "row count disagrees with layers and token strategy".into(),
        ));
    }
    let input_dim = match header.spec.aggregator {
        Aggregator::Concat => layout.rows.checked_mul(layout.hidden_dim),
        _ => Some(layout.hidden_dim),
    };
    // Size everything against the payload before allocating.
    let count = input_dim.and_then(|n| expected_count(&header.spec.classifier, n, layout.hidden_dim));
    let (Some(input_dim), Some(count)) = (input_dim, count) else {
        return Err(Error::Model("declared shapes overflow".into()));
    };
    if payload.len() as u64 != count as u64 * 4 {
        return Err(Error::Model(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            count as u64 * 4
        )));
    }
    let mut params = ProbeParams {
        attention: AttentionParams::zeros(layout.hidden_dim),
        predictor: PredictorParams::zeros(&header.spec.classifier, input_dim),
    };
    let expected: Vec<(String, usize)> = params
        .tensor_names()
        .into_iter()
        .zip(params.slices().iter().map(|s| s.len()))
        .collect();
    let declared: Vec<(String, usize)> = header.tensors.iter().map(|t| (t.name.clone(), t.len)).collect();
    if declared != expected {
        return Err(Error::Model("tensor table does not match the model spec".into()));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    for s in params.slices_mut() {
        for v in s.iter_mut() {
            *v = values.next().expect("length checked");
        }
    }
    if !params.is_finite() {
        return Err(Error::Model("non-finite parameter".into()));
    }
    Ok(ProbeModel {
        spec: header.spec,
        layout: header.layout,
        params,
        provenance: header.provenance,
    })
}

fn expected_count(classifier: &ClassifierSpec, input_dim: usize, hidden_dim: usize) -> Option<usize> {
    let sizes = classifier.layer_sizes(input_dim);
    let mut count = hidden_dim.checked_add(1)?;
    for w in sizes.windows(2) {
        count = count.checked_add(w[0].checked_mul(w[1])?.checked_add(w[1])?)?;
    }
    Some(count)
}
