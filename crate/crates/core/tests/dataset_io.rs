use std::io::{Cursor, Read, Seek, SeekFrom};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use autoprobe::eval::synth::{generate, SynthConfig};
use autoprobe::repr_store::{read_dataset, validate_manifest, write_dataset, HEADER_LEN};
use autoprobe::{Error, LabelKind};

/// Counts the bytes pulled through `read`.
struct Counting {
    inner: Cursor<Vec<u8>>,
    read: Arc<AtomicU64>,
}

impl Read for Counting {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.read.fetch_add(n as u64, Ordering::SeqCst);
        Ok(n)
    }
}

impl Seek for Counting {
    fn seek(&mut self, pos: SeekFrom) -> std::io::Result<u64> {
        self.inner.seek(pos)
    }
}

fn synth_bytes(samples: usize) -> Vec<u8> {
    let (m, blocks) = generate(&SynthConfig {
        samples,
        hidden_dim: 16,
        layers: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut bytes = Vec::new();
    write_dataset(&m, &blocks, &mut bytes).unwrap();
    bytes
}

fn manifest_len(bytes: &[u8]) -> u64 {
    u64::from_le_bytes(bytes[10..18].try_into().unwrap())
}

#[test]
fn opening_reads_only_the_manifest() {
    let bytes = synth_bytes(50);
    let header = HEADER_LEN + manifest_len(&bytes);
    let counter = Arc::new(AtomicU64::new(0));
    let ds = read_dataset(Counting {
        inner: Cursor::new(bytes),
        read: counter.clone(),
    })
    .unwrap();
    assert_eq!(counter.load(Ordering::SeqCst), header);

    let per_sample = ds.manifest().sample_payload_len();
    let id = ds.samples()[17].id.clone();
    ds.block(&id).unwrap();
    assert_eq!(counter.load(Ordering::SeqCst), header + per_sample);
}

#[test]
fn truncation_names_the_first_unreadable_sample() {
    let bytes = synth_bytes(10);
    let ds = read_dataset(Cursor::new(bytes.clone())).unwrap();
    let per = ds.manifest().sample_payload_len() as usize;
    let cut = bytes.len() - 3 * per + 5;
    match read_dataset(Cursor::new(bytes[..cut].to_vec())) {
        Err(Error::Truncated { sample_id }) => assert_eq!(sample_id, ds.samples()[7].id),
        other => panic!("expected truncation, got {other:?}"),
    }
}

#[test]
fn trailing_bytes_are_rejected() {
    let mut bytes = synth_bytes(3);
    bytes.extend_from_slice(&[0, 0, 0, 0]);
    assert!(matches!(read_dataset(Cursor::new(bytes)), Err(Error::Malformed(_))));
}

#[test]
fn corrupted_length_fields_are_detected() {
    let bytes = synth_bytes(5);
    // every byte of the manifest length, plus a few bytes inside the
    // manifest that hold payload offsets and lengths
    for i in 10..18 {
        for flip in [0x01u8, 0x80, 0xff] {
            let mut bad = bytes.clone();
            bad[i] ^= flip;
            assert!(read_dataset(Cursor::new(bad)).is_err(), "byte {i} ^ {flip:#x}");
        }
    }
    let json_end = 18 + manifest_len(&bytes) as usize;
    let json = std::str::from_utf8(&bytes[18..json_end]).unwrap();
    for key in ["\"payload_offset\":", "\"payload_length\":"] {
        for (at, _) in json.match_indices(key).take(3) {
            let digit = 18 + at + key.len();
            let mut bad = bytes.clone();
            bad[digit] = if bad[digit] == b'9' { b'1' } else { bad[digit] + 1 };
            assert!(read_dataset(Cursor::new(bad)).is_err(), "{key} at {at}");
        }
    }
}

#[test]
fn header_errors() {
    let bytes = synth_bytes(2);
    let mut magic = bytes.clone();
    magic[2] = b'X';
    assert!(matches!(read_dataset(Cursor::new(magic)), Err(Error::BadMagic)));
    let mut version = bytes.clone();
    version[6] = 2;
    assert!(matches!(
        read_dataset(Cursor::new(version)),
        Err(Error::UnsupportedVersion(2))
    ));
    assert!(read_dataset(Cursor::new(bytes[..12].to_vec())).is_err());
    assert!(read_dataset(Cursor::new(Vec::new())).is_err());
}

#[test]
fn non_finite_values_surface_on_load() {
    let bytes = synth_bytes(4);
    let mut bad = bytes.clone();
    let n = bad.len();
    bad[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    let ds = read_dataset(Cursor::new(bad)).unwrap();
    let last = ds.samples()[3].id.clone();
    assert!(ds.block(&ds.samples()[0].id).is_ok());
    assert!(matches!(ds.block(&last), Err(Error::NonFinite(id)) if id == last));
    assert!(matches!(ds.verify_payload(), Err(Error::NonFinite(_))));
}

#[test]
fn writer_rejects_bad_input() {
    let (m, mut blocks) = generate(&SynthConfig {
        samples: 4,
        hidden_dim: 3,
        layers: 2,
        signal: None,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut dup = m.clone();
    dup.samples[1].id = dup.samples[0].id.clone();
    assert!(matches!(
        write_dataset(&dup, &blocks, Vec::new()),
        Err(Error::DuplicateId(_))
    ));

    let mut bad_label = m.clone();
    bad_label.samples[0].labels.insert(LabelKind::Functionality, 2);
    assert!(!validate_manifest(&bad_label).is_empty());
    assert!(matches!(
        write_dataset(&bad_label, &blocks, Vec::new()),
        Err(Error::Invalid(_))
    ));

    blocks[2].values[0] = f32::INFINITY;
    assert!(matches!(
        write_dataset(&m, &blocks, Vec::new()),
        Err(Error::NonFinite(_))
    ));
    blocks[2].values.pop();
    assert!(matches!(
        write_dataset(&m, &blocks, Vec::new()),
        Err(Error::ShapeMismatch(_))
    ));
}

#[test]
fn empty_dataset_round_trips() {
    let (mut m, _) = generate(&SynthConfig {
        samples: 0,
        hidden_dim: 3,
        layers: 2,
        signal: None,
        ..SynthConfig::default()
    })
    .unwrap();
    m.samples.clear();
    let mut bytes = Vec::new();
    write_dataset(&m, &[], &mut bytes).unwrap();
    let ds = read_dataset(Cursor::new(bytes)).unwrap();
    assert!(ds.is_empty());
}
