//! Safetensors checkpoint reading and writing.
//!
//! Layout: an 8-byte little-endian header length `N`, `N` bytes of JSON
//! mapping tensor names to `{"dtype", "shape", "data_offsets"}` (plus an
//! optional `"__metadata__"` string map), then the raw little-endian buffer.
//! Offsets are relative to the buffer start and must tile it exactly.
//!
//! F16 and BF16 payloads are widened to fp32 on load; everything is written
//! back as F32.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{numel, NamedTensorMap, Tensor};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    fn parse(name: &str, s: &str) -> Result<Self> {
        match s {
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            "BF16" => Ok(Dtype::BF16),
            other => Err(Error::UnsupportedDtype {
                name: name.to_string(),
                dtype: other.to_string(),
            }),
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f32> {
        match self {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F16 => bytes
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            Dtype::BF16 => bytes
                .chunks_exact(2)
                .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct TensorInfo {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

#[derive(Serialize)]
struct TensorInfoOut<'a> {
    dtype: &'static str,
    shape: &'a [usize],
    data_offsets: [usize; 2],
}

/// Loads every tensor as fp32. With `permissive = false` any NaN or
/// infinity is an error.
pub fn load_checkpoint(path: impl AsRef<Path>, permissive: bool) -> Result<NamedTensorMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, permissive)
}

/// Parses an in-memory safetensors image.
pub fn decode_checkpoint(bytes: &[u8], permissive: bool) -> Result<NamedTensorMap> {
    if bytes.len() < 8 {
        return Err(Error::MalformedHeader(format!(
            "file is {} bytes, shorter than the length prefix",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let available = (bytes.len() - 8) as u64;
    if header_len > available {
        return Err(Error::MalformedHeader(format!(
            "header length {header_len} exceeds remaining {available} bytes"
        )));
    }
    let header_end = 8 + header_len as usize;
    let header = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let header: serde_json::Map<String, Value> = serde_json::from_str(header)
        .map_err(|e| Error::MalformedHeader(format!("header is not a JSON object: {e}")))?;
    let buffer = &bytes[header_end..];

    let mut metadata = BTreeMap::new();
    let mut infos = Vec::with_capacity(header.len());
    for (name, value) in header {
        if name == METADATA_KEY {
            metadata = serde_json::from_value(value).map_err(|e| {
                Error::MalformedHeader(format!("metadata is not a string map: {e}"))
            })?;
            continue;
        }
        let info: TensorInfo = serde_json::from_value(value)
            .map_err(|e| Error::MalformedHeader(format!("entry {name:?}: {e}")))?;
        let dtype = Dtype::parse(&name, &info.dtype)?;
        infos.push((name, dtype, info));
    }

    // Offsets must tile the buffer: sorted by start, each begins where the
    // previous ended, and the last ends at the buffer end.
    let mut order: Vec<usize> = (0..infos.len()).collect();
    order.sort_by_key(|&i| (infos[i].2.data_offsets[0], infos[i].2.data_offsets[1]));
    let mut cursor = 0usize;
    for &i in &order {
        let (name, dtype, info) = &infos[i];
        let [begin, end] = info.data_offsets;
        if begin != cursor {
            return Err(Error::MalformedHeader(format!(
                "tensor {name:?} starts at {begin}, expected {cursor} (gap or overlap)"
            )));
        }
        if end < begin || end > buffer.len() {
            return Err(Error::MalformedHeader(format!(
                "tensor {name:?} offsets [{begin}, {end}] exceed buffer of {} bytes",
                buffer.len()
            )));
        }
        let expected = numel(&info.shape)
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::MalformedHeader(format!("tensor {name:?} is too large")))?;
        if end - begin != expected {
            return Err(Error::MalformedHeader(format!(
                "tensor {name:?} spans {} bytes, shape {:?} needs {expected}",
                end - begin,
                info.shape
            )));
        }
        cursor = end;
    }
    if cursor != buffer.len() {
        return Err(Error::MalformedHeader(format!(
            "{} trailing bytes after the last tensor",
            buffer.len() - cursor
        )));
    }

    let mut map = NamedTensorMap::new();
    for (name, dtype, info) in infos {
        let [begin, end] = info.data_offsets;
        let values = dtype.decode(&buffer[begin..end]);
        if !permissive {
            if let Some(index) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue { name, index });
            }
        }
        let tensor = Tensor::new(info.shape, values)?;
        if map.insert(name.clone(), tensor).is_some() {
            return Err(Error::DuplicateName(name));
        }
    }
    *map.metadata_mut() = metadata;
    Ok(map)
}

/// Writes all tensors as F32 in lexicographic name order.
pub fn save_checkpoint(map: &NamedTensorMap, path: impl AsRef<Path>) -> Result<()> {
    let entries: Vec<(&str, &Tensor)> = map.iter().collect();
    save_entries(&entries, map.metadata(), path)
}

/// Writes an explicit entry list. Names are validated for uniqueness before
/// anything touches the filesystem.
pub fn save_entries(
    entries: &[(&str, &Tensor)],
    metadata: &BTreeMap<String, String>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = encode_entries(entries, metadata)?;
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Serializes a map to an in-memory safetensors image.
pub fn encode_checkpoint(map: &NamedTensorMap) -> Result<Vec<u8>> {
    let entries: Vec<(&str, &Tensor)> = map.iter().collect();
    encode_entries(&entries, map.metadata())
}

fn encode_entries(
    entries: &[(&str, &Tensor)],
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let mut sorted: Vec<(&str, &Tensor)> = entries.to_vec();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::DuplicateName(w[0].0.to_string()));
    }
    if let Some((name, _)) = sorted.iter().find(|(n, _)| *n == METADATA_KEY) {
        return Err(Error::DuplicateName(name.to_string()));
    }

    let mut header = serde_json::Map::new();
    if !metadata.is_empty() {
        header.insert(METADATA_KEY.to_string(), serde_json::to_value(metadata)?);
    }
    let mut offset = 0usize;
    for (name, tensor) in &sorted {
        let len = tensor.numel() * 4;
        let info = TensorInfoOut {
            dtype: "F32",
            shape: tensor.shape(),
            data_offsets: [offset, offset + len],
        };
        header.insert(name.to_string(), serde_json::to_value(info)?);
        offset += len;
    }
    let mut header = serde_json::to_vec(&Value::Object(header))?;
    // Pad with spaces so the buffer starts 8-byte aligned.
    while header.len() % 8 != 0 {
        header.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, tensor) in &sorted {
        for v in tensor.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}
