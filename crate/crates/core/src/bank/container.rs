//! Single-file tensor container.
//!
//! Layout: an unsigned 64-bit little-endian header length `N`, then `N` bytes
//! of compact UTF-8 JSON, then the raw little-endian data buffer. The header
//! maps every tensor name to `{dtype, shape, data_offsets}` (offsets relative
//! to the buffer start) and carries string metadata under `__metadata__`.
//! Keys are sorted and tensors are laid out in key order, so encoding is
//! byte-deterministic.

use std::collections::BTreeMap;

use serde_json::Value;

use super::AdapterError;

pub const METADATA_KEY: &str = "__metadata__";
const DTYPE_F32: &str = "F32";
/// Refuse absurd header lengths before allocating.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Bitwise comparison (distinguishes -0.0 from 0.0, compares NaN payloads).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(serde::Serialize)]
#[serde(untagged)]
enum HeaderEntry<'a> {
    Metadata(&'a BTreeMap<String, String>),
    // Field order is alphabetical so the JSON keys come out sorted.
    Tensor {
        data_offsets: [usize; 2],
        dtype: &'static str,
        shape: &'a [usize],
    },
}

pub fn encode(c: &Container) -> Result<Vec<u8>, AdapterError> {
    let mut header: BTreeMap<&str, HeaderEntry<'_>> = BTreeMap::new();
    if !c.metadata.is_empty() {
        header.insert(METADATA_KEY, HeaderEntry::Metadata(&c.metadata));
    }
    let mut offset = 0usize;
    for (name, t) in &c.tensors {
        if name == METADATA_KEY {
            return Err(AdapterError::InvariantViolation(format!(
                "tensor name {METADATA_KEY} is reserved"
            )));
        }
        if t.numel() != t.data.len() {
            return Err(AdapterError::InvariantViolation(format!(
                "tensor {name}: shape {:?} needs {} values, has {}",
                t.shape,
                t.numel(),
                t.data.len()
            )));
        }
        let end = offset + 4 * t.data.len();
        header.insert(
            name,
            HeaderEntry::Tensor {
                data_offsets: [offset, end],
                dtype: DTYPE_F32,
                shape: &t.shape,
            },
        );
        offset = end;
    }
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| AdapterError::InvariantViolation(e.to_string()))?;
    // Buffer order must follow the same sorted key order as the header.
    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in c.tensors.values() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> AdapterError {
    AdapterError::CorruptHeader(msg.into())
}

fn as_usize_vec(v: &Value, what: &str, name: &str) -> Result<Vec<usize>, AdapterError> {
    v.as_array()
        .ok_or_else(|| corrupt(format!("{name}: `{what}` is not an array")))?
        .iter()
        .map(|x| {
            x.as_u64()
                .map(|n| n as usize)
                .ok_or_else(|| corrupt(format!("{name}: `{what}` entries must be non-negative integers")))
        })
        .collect()
}

pub fn decode(bytes: &[u8]) -> Result<Container, AdapterError> {
    if bytes.len() < 8 {
        return Err(corrupt("file shorter than the 8-byte header length"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    if n > MAX_HEADER_LEN || 8 + n > bytes.len() as u64 {
        return Err(corrupt(format!(
            "header length {n} exceeds file size {}",
            bytes.len()
        )));
    }
    let n = n as usize;
    let header_text =
        std::str::from_utf8(&bytes[8..8 + n]).map_err(|e| corrupt(format!("header is not UTF-8: {e}")))?;
    let header: Value =
        serde_json::from_str(header_text).map_err(|e| corrupt(format!("header is not JSON: {e}")))?;
    let header = header
        .as_object()
        .ok_or_else(|| corrupt("header is not a JSON object"))?;
    let buffer = &bytes[8 + n..];

    let mut metadata = BTreeMap::new();
    let mut spans: Vec<(usize, usize, String, Vec<usize>)> = Vec::new();
    for (name, entry) in header {
        if name == METADATA_KEY {
            let meta = entry
                .as_object()
                .ok_or_else(|| corrupt("__metadata__ is not an object"))?;
            for (k, v) in meta {
                let s = v
                    .as_str()
                    .ok_or_else(|| corrupt(format!("metadata `{k}` is not a string")))?;
                metadata.insert(k.clone(), s.to_string());
            }
            continue;
        }
        let obj = entry
            .as_object()
            .ok_or_else(|| corrupt(format!("{name}: entry is not an object")))?;
        if let Some(k) = obj
            .keys()
            .find(|k| !matches!(k.as_str(), "dtype" | "shape" | "data_offsets"))
        {
            return Err(corrupt(format!("{name}: unexpected key `{k}`")));
        }
        let dtype = obj
            .get("dtype")
            .and_then(Value::as_str)
            .ok_or_else(|| corrupt(format!("{name}: missing dtype")))?;
        if dtype != DTYPE_F32 {
            return Err(AdapterError::UnsupportedDtype(format!("{name}: {dtype}")));
        }
        let shape = as_usize_vec(
            obj.get("shape").ok_or_else(|| corrupt(format!("{name}: missing shape")))?,
            "shape",
            name,
        )?;
        let offsets = as_usize_vec(
            obj.get("data_offsets")
                .ok_or_else(|| corrupt(format!("{name}: missing data_offsets")))?,
            "data_offsets",
            name,
        )?;
        let [begin, end] = offsets[..] else {
            return Err(corrupt(format!("{name}: data_offsets must have two entries")));
        };
        if begin > end || end > buffer.len() {
            return Err(AdapterError::OffsetOutOfBounds(format!(
                "{name}: [{begin}, {end}) outside buffer of {} bytes",
                buffer.len()
            )));
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| corrupt(format!("{name}: shape overflows")))?;
        if numel.checked_mul(4) != Some(end - begin) {
            return Err(corrupt(format!(
                "{name}: shape {shape:?} needs {} bytes, offsets span {}",
                numel.saturating_mul(4),
                end - begin
            )));
        }
        spans.push((begin, end, name.clone(), shape));
    }

    spans.sort();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(AdapterError::OffsetOutOfBounds(format!(
                "{} overlaps {}",
                pair[0].2, pair[1].2
            )));
        }
    }

    let tensors = spans
        .into_iter()
        .map(|(begin, end, name, shape)| {
            let data = buffer[begin..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            (name, Tensor { shape, data })
        })
        .collect();
    Ok(Container { metadata, tensors })
}
