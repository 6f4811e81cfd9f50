// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reader and writer for the single-file tensor container:
//! an 8-byte little-endian header length, a UTF-8 JSON header mapping
//! tensor names to `{dtype, shape, data_offsets}`, then the raw blob.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use memmap2::Mmap;
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{ChannelError, Result};

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DType {
    F64,
    F32,
    F16,
    BF16,
    I64,
    I32,
    U8,
    BOOL,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F64 | DType::I64 => 8,
            DType::F32 | DType::I32 => 4,
            DType::F16 | DType::BF16 => 2,
            DType::U8 | DType::BOOL => 1,
        }
    }
}

/// One tensor's location inside the blob.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Byte range relative to the start of the blob.
    pub span: (usize, usize),
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Deserialize)]
struct RawEntry {
    dtype: DType,
    shape: Vec<usize>,
    data_offsets: (usize, usize),
}

enum Backing {
    Mapped(Mmap),
    Owned(Vec<u8>),
}

impl Backing {
    fn bytes(&self) -> &[u8] {
        match self {
            Backing::Mapped(m) => m,
            Backing::Owned(v) => v,
        }
    }
}

/// Parsed tensor container. Tensor data stays in the mapped file; typed
/// accessors convert to `f32` on demand.
#[derive(Clone)]
pub struct TensorStore {
    entries: BTreeMap<String, TensorEntry>,
    metadata: BTreeMap<String, String>,
    backing: Arc<Backing>,
    blob_offset: usize,
}

impl std::fmt::Debug for TensorStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TensorStore")
            .field("tensors", &self.entries.len())
            .field("blob_bytes", &self.blob_len())
            .finish()
    }
}

/// Memory-map a container file and validate its header.
pub fn load_tensors(path: impl AsRef<Path>) -> Result<TensorStore> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| ChannelError::io(path, e))?;
    // SAFETY: the mapping is read-only and the cache never rewrites a
    // published artifact in place (fetches go through a temp file + rename).
    let map = unsafe { Mmap::map(&file) }.map_err(|e| ChannelError::io(path, e))?;
    TensorStore::from_backing(Backing::Mapped(map))
}

impl TensorStore {
    /// Parse a container held in memory.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        Self::from_backing(Backing::Owned(bytes))
    }

    fn from_backing(backing: Backing) -> Result<Self> {
        let bytes = backing.bytes();
        if bytes.len() < 8 {
            return Err(ChannelError::Truncated(format!(
                "file holds {} bytes, header length needs 8",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let blob_offset = 8usize
            .checked_add(header_len)
            .ok_or_else(|| ChannelError::MalformedHeader("header length overflows".into()))?;
        if blob_offset > bytes.len() {
            return Err(ChannelError::Truncated(format!(
                "header declares {header_len} bytes but only {} follow",
                bytes.len() - 8
            )));
        }
        let header: BTreeMap<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..blob_offset])
                .map_err(|e| ChannelError::MalformedHeader(e.to_string()))?;
        let blob_len = bytes.len() - blob_offset;

        let mut entries = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        for (name, value) in header {
            if name == "__metadata__" {
                metadata = serde_json::from_value(value)
                    .map_err(|e| ChannelError::MalformedHeader(format!("metadata: {e}")))?;
                continue;
            }
            let raw: RawEntry = serde_json::from_value(value)
                .map_err(|e| ChannelError::MalformedHeader(format!("{name}: {e}")))?;
            let (start, end) = raw.data_offsets;
            if end < start {
                return Err(ChannelError::MalformedHeader(format!(
                    "{name}: span end {end} precedes start {start}"
                )));
            }
            let expected = raw.shape.iter().product::<usize>() * raw.dtype.width();
            if end - start != expected {
                return Err(ChannelError::MalformedHeader(format!(
                    "{name}: span holds {} bytes, shape {:?} of {:?} needs {expected}",
                    end - start,
                    raw.shape,
                    raw.dtype
                )));
            }
            if end > blob_len {
                return Err(ChannelError::Truncated(format!(
                    "{name}: span ends at {end} but blob holds {blob_len} bytes"
                )));
            }
            entries.insert(
                name,
                TensorEntry {
                    dtype: raw.dtype,
                    shape: raw.shape,
                    span: (start, end),
                },
            );
        }

        let mut spans: Vec<(&String, (usize, usize))> =
            entries.iter().map(|(n, e)| (n, e.span)).collect();
        spans.sort_by_key(|(_, s)| *s);
        for pair in spans.windows(2) {
            let (a, sa) = pair[0];
            let (b, sb) = pair[1];
            // zero-length tensors may share an offset
            if sb.0 < sa.1 && sa.0 != sa.1 && sb.0 != sb.1 {
                return Err(ChannelError::OverlappingSpans {
                    first: a.clone(),
                    second: b.clone(),
                });
            }
        }

        Ok(Self {
            entries,
            metadata,
            backing: Arc::new(backing),
            blob_offset,
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| ChannelError::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    fn blob_len(&self) -> usize {
        self.backing.bytes().len() - self.blob_offset
    }

    /// Raw bytes of a tensor, borrowed from the backing blob.
    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        let entry = self.entry(name)?;
        let base = self.blob_offset;
        Ok(&self.backing.bytes()[base + entry.span.0..base + entry.span.1])
    }

    /// Tensor contents promoted to `f32`.
    pub fn to_f32(&self, name: &str) -> Result<ArrayD<f32>> {
        let entry = self.entry(name)?;
        let bytes = self.bytes(name)?;
        let data: Vec<f32> = match entry.dtype {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            DType::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
                .collect(),
            DType::F16 => bytes
                .chunks_exact(2)
                .map(|c| f16_to_f32(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
            DType::BF16 => bytes
                .chunks_exact(2)
                .map(|c| f32::from_bits((u16::from_le_bytes([c[0], c[1]]) as u32) << 16))
                .collect(),
            other => {
                return Err(ChannelError::Shape(format!(
                    "{name}: dtype {other:?} is not a floating-point tensor"
                )))
            }
        };
        ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| ChannelError::Shape(format!("{name}: {e}")))
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f32>> {
        self.to_f32(name)?
            .into_dimensionality()
            .map_err(|_| ChannelError::Shape(format!("{name}: expected a 2-D tensor")))
    }

    pub fn vector(&self, name: &str) -> Result<Array1<f32>> {
        self.to_f32(name)?
            .into_dimensionality()
            .map_err(|_| ChannelError::Shape(format!("{name}: expected a 1-D tensor")))
    }
}

fn f16_to_f32(h: u16) -> f32 {
    let sign = ((h >> 15) as u32) << 31;
    let exp = ((h >> 10) & 0x1f) as u32;
    let frac = (h & 0x3ff) as u32;
    let bits = match (exp, frac) {
        (0, 0) => sign,
        (0, _) => {
            // subnormal: renormalize
            let mut e = 127 - 15 + 1;
            let mut f = frac;
            while f & 0x400 == 0 {
                f <<= 1;
                e -= 1;
            }
            sign | ((e as u32) << 23) | ((f & 0x3ff) << 13)
        }
        (0x1f, _) => sign | 0x7f80_0000 | (frac << 13),
        _ => sign | ((exp + 127 - 15) << 23) | (frac << 13),
    };
    f32::from_bits(bits)
}

/// A tensor to be written by [`write_tensors`].
pub struct TensorView<'a> {
    pub name: &'a str,
    pub shape: Vec<usize>,
    pub data: &'a [f32],
}

/// Serialize `f32` tensors into the container layout. Tensors are laid out
/// in name order, matching the header's key order.
pub fn encode_tensors(
    tensors: &[TensorView<'_>],
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let mut ordered: Vec<&TensorView<'_>> = tensors.iter().collect();
    ordered.sort_by(|a, b| a.name.cmp(b.name));

    let mut header = serde_json::Map::new();
    if !metadata.is_empty() {
        header.insert("__metadata__".into(), serde_json::to_value(metadata)?);
    }
    let mut offset = 0usize;
    for t in &ordered {
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(ChannelError::Shape(format!(
                "{}: shape {:?} does not match {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        let end = offset + t.data.len() * 4;
        header.insert(
            t.name.to_string(),
            serde_json::json!({ "dtype": "F32", "shape": t.shape, "data_offsets": [offset, end] }),
        );
        offset = end;
    }
    let mut header_bytes = serde_json::to_vec(&header)?;
    // pad so the blob starts 8-byte aligned
    while header_bytes.len() % 8 != 0 {
        header_bytes.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in &ordered {
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_tensors(
    path: impl AsRef<Path>,
    tensors: &[TensorView<'_>],
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensors(tensors, metadata)?;
    let mut file = File::create(path).map_err(|e| ChannelError::io(path, e))?;
    file.write_all(&bytes).map_err(|e| ChannelError::io(path, e))
}
