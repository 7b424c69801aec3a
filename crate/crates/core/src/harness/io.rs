//! Binary artifact formats.
//!
//! Embedding file (`MRFE`), all integers little-endian:
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `MRFE`                  |
//! | 4      | 4    | version (u32, currently 1)    |
//! | 8      | 8    | rows (u64)                    |
//! | 16     | 8    | cols (u64)                    |
//! | 24     | 1    | labels present (0 or 1)       |
//! | 25     | 7    | reserved, zero                |
//! | 32     | 8    | payload offset (u64)          |
//! | 40..   |      | rows·cols f64, row-major      |
//! |        |      | then rows i32 labels if flag  |
//!
//! Checkpoint file (`MRFC`): magic, u32 version, u64 manifest length, the
//! JSON manifest, then the f64 tensor payload. The manifest holds the
//! serialized object with every float array replaced by a reference into the
//! payload, plus a tensor list (JSON pointer, length, offset).

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::numerics::Matrix;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"MRFE";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MRFC";
pub const VERSION: u32 = 1;
const EMBEDDING_HEADER: usize = 40;
const TENSOR_KEY: &str = "$tensor";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("file truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("unsupported version {0}")]
    VersionUnsupported(u32),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.display().to_string(), source }
}

pub fn encode_embeddings(matrix: &Matrix, labels: Option<&[i32]>) -> Result<Vec<u8>, FormatError> {
    if let Some(l) = labels {
        if l.len() != matrix.rows() {
            return Err(FormatError::Malformed(format!("{} labels for {} rows", l.len(), matrix.rows())));
        }
    }
    let mut out = Vec::with_capacity(EMBEDDING_HEADER + matrix.as_slice().len() * 8 + matrix.rows() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(matrix.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(matrix.cols() as u64).to_le_bytes());
    out.push(labels.is_some() as u8);
    out.extend_from_slice(&[0; 7]);
    out.extend_from_slice(&(EMBEDDING_HEADER as u64).to_le_bytes());
    for v in matrix.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in labels.unwrap_or(&[]) {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

fn need(bytes: &[u8], n: usize) -> Result<(), FormatError> {
    if bytes.len() < n {
        Err(FormatError::Truncated { needed: n, have: bytes.len() })
    } else {
        Ok(())
    }
}

fn u64_at(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

fn check_magic(bytes: &[u8], expected: &[u8; 4]) -> Result<(), FormatError> {
    need(bytes, 4)?;
    if &bytes[..4] != expected {
        return Err(FormatError::BadMagic { found: bytes[..4].try_into().expect("4 bytes"), expected: *expected });
    }
    need(bytes, 8)?;
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(FormatError::VersionUnsupported(version));
    }
    Ok(())
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<(Matrix, Option<Vec<i32>>), FormatError> {
    check_magic(bytes, EMBEDDING_MAGIC)?;
    need(bytes, EMBEDDING_HEADER)?;
    let rows = u64_at(bytes, 8) as usize;
    let cols = u64_at(bytes, 16) as usize;
    let has_labels = match bytes[24] {
        0 => false,
        1 => true,
        f => return Err(FormatError::Malformed(format!("label flag {f}"))),
    };
    let offset = u64_at(bytes, 32) as usize;
    if offset < EMBEDDING_HEADER {
        return Err(FormatError::Malformed(format!("payload offset {offset} inside the header")));
    }
    let values = rows
        .checked_mul(cols)
        .ok_or_else(|| FormatError::Malformed("rows * cols overflows".into()))?;
    let label_start = offset + values * 8;
    let end = label_start + if has_labels { rows * 4 } else { 0 };
    need(bytes, end)?;
    let data = bytes[offset..label_start]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let labels = has_labels.then(|| {
        bytes[label_start..end]
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()
    });
    let matrix = Matrix::from_vec(rows, cols, data).map_err(|e| FormatError::Malformed(e.to_string()))?;
    Ok((matrix, labels))
}

pub fn export_embeddings(path: &Path, matrix: &Matrix, labels: Option<&[i32]>) -> Result<(), FormatError> {
    fs::write(path, encode_embeddings(matrix, labels)?).map_err(io_err(path))
}

pub fn import_embeddings(path: &Path) -> Result<(Matrix, Option<Vec<i32>>), FormatError> {
    decode_embeddings(&fs::read(path).map_err(io_err(path))?)
}

/// Float arrays are moved out of `value` into `payload`; integer arrays and
/// everything else stay in the JSON.
fn extract(value: &mut Value, pointer: &mut String, payload: &mut Vec<f64>, tensors: &mut Vec<Value>) {
    match value {
        Value::Array(items) if !items.is_empty() && items.iter().all(|v| v.as_number().is_some_and(|n| n.is_f64())) => {
            let offset = payload.len();
            payload.extend(items.iter().map(|v| v.as_f64().expect("checked")));
            tensors.push(json!({ "path": pointer.clone(), "offset": offset, "len": items.len() }));
            *value = json!({ TENSOR_KEY: tensors.len() - 1 });
        }
        Value::Array(items) => {
            for (i, v) in items.iter_mut().enumerate() {
                let len = pointer.len();
                pointer.push_str(&format!("/{i}"));
                extract(v, pointer, payload, tensors);
                pointer.truncate(len);
            }
        }
        Value::Object(map) => {
            for (k, v) in map.iter_mut() {
                let len = pointer.len();
                pointer.push('/');
                pointer.push_str(&k.replace('~', "~0").replace('/', "~1"));
                extract(v, pointer, payload, tensors);
                pointer.truncate(len);
            }
        }
        _ => {}
    }
}

fn restore(value: &mut Value, tensors: &[Value], payload: &[f64]) -> Result<(), FormatError> {
    let bad = |m: &str| FormatError::Malformed(m.to_string());
    match value {
        Value::Object(map) if map.len() == 1 && map.contains_key(TENSOR_KEY) => {
            let idx = map[TENSOR_KEY].as_u64().ok_or_else(|| bad("tensor reference is not an index"))? as usize;
            let t = tensors.get(idx).ok_or_else(|| bad("tensor reference out of range"))?;
            let offset = t["offset"].as_u64().ok_or_else(|| bad("tensor offset"))? as usize;
            let len = t["len"].as_u64().ok_or_else(|| bad("tensor len"))? as usize;
            let slice = payload.get(offset..offset + len).ok_or_else(|| bad("tensor outside payload"))?;
            *value = Value::Array(slice.iter().map(|&v| json!(v)).collect());
        }
        Value::Array(items) => {
            for v in items {
                restore(v, tensors, payload)?;
            }
        }
        Value::Object(map) => {
            for v in map.values_mut() {
                restore(v, tensors, payload)?;
            }
        }
        _ => {}
    }
    Ok(())
}

/// Serializes any value; `kind` tags what the checkpoint holds and is checked
/// on load.
pub fn encode_checkpoint<T: Serialize>(kind: &str, meta: &Value, object: &T) -> Result<Vec<u8>, FormatError> {
    let mut value = serde_json::to_value(object).map_err(|e| FormatError::Malformed(e.to_string()))?;
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    extract(&mut value, &mut String::new(), &mut payload, &mut tensors);
    let manifest = json!({ "kind": kind, "meta": meta, "tensors": tensors, "object": value });
    let manifest = serde_json::to_vec(&manifest).map_err(|e| FormatError::Malformed(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + manifest.len() + payload.len() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub struct Checkpoint<T> {
    pub meta: Value,
    pub object: T,
    /// `(JSON pointer, length)` of every stored float tensor.
    pub manifest: Vec<(String, usize)>,
}

pub fn decode_checkpoint<T: DeserializeOwned>(bytes: &[u8], kind: &str) -> Result<Checkpoint<T>, FormatError> {
    check_magic(bytes, CHECKPOINT_MAGIC)?;
    need(bytes, 16)?;
    let len = u64_at(bytes, 8) as usize;
    need(bytes, 16 + len)?;
    let mut manifest: Value =
        serde_json::from_slice(&bytes[16..16 + len]).map_err(|e| FormatError::Malformed(e.to_string()))?;
    if manifest["kind"] != kind {
        return Err(FormatError::Malformed(format!("checkpoint holds {}, expected {kind:?}", manifest["kind"])));
    }
    let tensors = manifest["tensors"].as_array().cloned().unwrap_or_default();
    let floats: usize = tensors.iter().map(|t| t["len"].as_u64().unwrap_or(0) as usize).sum();
    let start = 16 + len;
    need(bytes, start + floats * 8)?;
    if bytes.len() != start + floats * 8 {
        return Err(FormatError::Malformed("trailing bytes after payload".into()));
    }
    let payload: Vec<f64> =
        bytes[start..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut object = manifest["object"].take();
    restore(&mut object, &tensors, &payload)?;
    let object = serde_json::from_value(object).map_err(|e| FormatError::Malformed(e.to_string()))?;
    let entries = tensors
        .iter()
        .map(|t| (t["path"].as_str().unwrap_or_default().to_string(), t["len"].as_u64().unwrap_or(0) as usize))
        .collect();
    Ok(Checkpoint { meta: manifest["meta"].take(), object, manifest: entries })
}

pub fn save_checkpoint<T: Serialize>(path: &Path, kind: &str, meta: &Value, object: &T) -> Result<(), FormatError> {
    let bytes = encode_checkpoint(kind, meta, object)?;
    // write-then-rename so an interrupted run never leaves half a checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<Checkpoint<T>, FormatError> {
    decode_checkpoint(&fs::read(path).map_err(io_err(path))?, kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;
    use serde::Deserialize;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::random_normal(rows, cols, 1.0, &mut RngStream::new(seed))
    }

    fn bits(m: &Matrix) -> Vec<u64> {
        m.as_slice().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn embeddings_round_trip_bitwise() {
        let m = random(7, 5, 1);
        let labels: Vec<i32> = (0..7).map(|i| i - 3).collect();
        let (back, l) = decode_embeddings(&encode_embeddings(&m, Some(&labels)).unwrap()).unwrap();
        assert_eq!(bits(&back), bits(&m));
        assert_eq!(back.shape(), (7, 5));
        assert_eq!(l.unwrap(), labels);
        let (back, l) = decode_embeddings(&encode_embeddings(&m, None).unwrap()).unwrap();
        assert_eq!(bits(&back), bits(&m));
        assert!(l.is_none());
    }

    #[test]
    fn header_layout() {
        let bytes = encode_embeddings(&random(2, 3, 0), None).unwrap();
        assert_eq!(&bytes[..4], b"MRFE");
        assert_eq!(u64_at(&bytes, 32), 40);
        assert_eq!(bytes.len(), 40 + 48);
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = encode_embeddings(&random(7, 5, 2), Some(&[0; 7])).unwrap();
        let err = decode_embeddings(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, FormatError::Truncated { .. }), "{err}");
        assert!(matches!(decode_embeddings(&bytes[..20]).unwrap_err(), FormatError::Truncated { .. }));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_embeddings(&random(2, 2, 3), None).unwrap();
        let mut wrong = bytes.clone();
        wrong[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_embeddings(&wrong).unwrap_err(), FormatError::BadMagic { .. }));
        bytes[4] = 2;
        assert!(matches!(decode_embeddings(&bytes).unwrap_err(), FormatError::VersionUnsupported(2)));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.mrfe");
        let m = random(4, 3, 4);
        export_embeddings(&path, &m, Some(&[1, 2, 3, 4])).unwrap();
        let (back, labels) = import_embeddings(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(labels.unwrap(), vec![1, 2, 3, 4]);
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Thing {
        name: String,
        ids: Vec<usize>,
        weights: Matrix,
        nested: Vec<Vec<f64>>,
        empty: Vec<f64>,
        labels: Vec<Option<u32>>,
    }

    #[test]
    fn checkpoint_round_trip_keeps_integers_and_floats_apart() {
        let thing = Thing {
            name: "a/b~c".into(),
            ids: vec![5, 6, 7],
            weights: random(3, 2, 5),
            nested: vec![vec![0.0, -1.5], vec![1e-300]],
            empty: vec![],
            labels: vec![Some(1), None],
        };
        let bytes = encode_checkpoint("thing", &json!({"seed": 3}), &thing).unwrap();
        let back: Checkpoint<Thing> = decode_checkpoint(&bytes, "thing").unwrap();
        assert_eq!(back.object, thing);
        assert_eq!(back.meta["seed"], 3);
        let paths: Vec<&str> = back.manifest.iter().map(|(p, _)| p.as_str()).collect();
        assert!(paths.contains(&"/weights/data"), "{paths:?}");
        assert!(paths.contains(&"/nested/1"), "{paths:?}");
        assert!(!paths.iter().any(|p| p.starts_with("/ids")));
        assert!(matches!(decode_checkpoint::<Thing>(&bytes, "other"), Err(FormatError::Malformed(_))));
        assert!(matches!(decode_checkpoint::<Thing>(&bytes[..bytes.len() - 3], "thing"), Err(FormatError::Truncated { .. })));
    }

    proptest! {
        #[test]
        fn arbitrary_floats_round_trip(values in prop::collection::vec(any::<f64>(), 1..40), cols in 1usize..5) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let m = Matrix::from_vec(rows, cols, values[..rows * cols].to_vec()).unwrap();
            let (back, _) = decode_embeddings(&encode_embeddings(&m, None).unwrap()).unwrap();
            prop_assert_eq!(bits(&back), bits(&m));
        }
    }
}
