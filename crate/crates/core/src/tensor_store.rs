//! In-memory weight representation and the TVKP checkpoint file format.
//!
//! Layout of a TVKP file (little-endian throughout):
//!
//! | bytes          | content                                   |
//! |----------------|-------------------------------------------|
//! | `0..4`         | magic `TVKP`                              |
//! | `4..8`         | format version, `u32` (currently 1)       |
//! | `8..16`        | header length `H`, `u64`                  |
//! | `16..16+H`     | UTF-8 JSON header                         |
//! | `16+H..`       | raw `f32` payload                         |
//!
//! The header carries `meta`, an optional `provenance` object, and a
//! `tensors` table mapping each name to `{dtype, shape, offset, nbytes}`.
//! Offsets are relative to the payload start; tensors are laid out
//! contiguously in lexicographic name order with no gaps.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TVKP";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE_LEN: usize = 16;

/// A dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} has a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same shape, values produced by `f`.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Named tensors, iterated in lexicographic name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorMap {
    entries: BTreeMap<String, Tensor>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidTensor("empty tensor name".into()));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
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

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// All values concatenated in canonical (lexicographic) tensor order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.entries.values() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Applies `f` tensor by tensor, keeping names and shapes.
    pub fn map_tensors(&self, f: impl Fn(&str, &Tensor) -> Tensor) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), f(k, v)))
                .collect(),
        }
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter().find(|(_, t)| !t.is_finite()).map(|(n, _)| n)
    }
}

impl FromIterator<(String, Tensor)> for TensorMap {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

/// SHA-256 digest, displayed and serialized as 64 lowercase hex digits.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest([u8; 32]);

impl Digest {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// First eight bytes as a little-endian integer; used for seeding streams.
    pub fn prefix_u64(&self) -> u64 {
        let mut b = [0u8; 8];
        b.copy_from_slice(&self.0[..8]);
        u64::from_le_bytes(b)
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({self})")
    }
}

impl FromStr for Digest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)
            .map_err(|e| Error::MalformedHeader(format!("bad digest {s:?}: {e}")))?;
        Ok(Self(out))
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model_id: String,
    pub arch_digest: Digest,
    pub seed: u64,
    pub step: u64,
    pub parent_hash: Option<Digest>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: TensorMap,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn content_hash(&self) -> Digest {
        content_hash(&self.weights)
    }
}

/// Digest over the canonical serialization: for every tensor in name order,
/// the name length and bytes, the rank and dims (all `u64` LE), then the raw
/// little-endian `f32` data.
pub fn content_hash(tm: &TensorMap) -> Digest {
    let mut h = Sha256::new();
    for (name, t) in tm.iter() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape.len() as u64).to_le_bytes());
        for &d in &t.shape {
            h.update((d as u64).to_le_bytes());
        }
        for v in &t.data {
            h.update(v.to_le_bytes());
        }
    }
    Digest(h.finalize().into())
}

/// Succeeds iff both maps hold the same names with the same shapes.
pub fn validate_compat(a: &TensorMap, b: &TensorMap) -> Result<()> {
    for (name, ta) in a.iter() {
        let tb = b
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if ta.shape != tb.shape {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
    }
    if let Some(extra) = b.names().find(|n| a.get(n).is_none()) {
        return Err(Error::MissingTensor(extra.to_string()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: CheckpointMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
    tensors: BTreeMap<String, TensorEntry>,
}

/// Contents of a TVKP file: weights, metadata and an optional provenance
/// record (present for task vectors).
#[derive(Debug, Clone, PartialEq)]
pub struct TvkpFile {
    pub weights: TensorMap,
    pub meta: CheckpointMeta,
    pub provenance: Option<serde_json::Value>,
}

pub fn encode_tvkp(file: &TvkpFile) -> Result<Vec<u8>> {
    if let Some(name) = file.weights.first_non_finite() {
        return Err(Error::NonFinite(name.to_string()));
    }
    let mut tensors = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in file.weights.iter() {
        let nbytes = (t.numel() * 4) as u64;
        tensors.insert(
            name.to_string(),
            TensorEntry {
                dtype: "f32".into(),
                shape: t.shape.clone(),
                offset,
                nbytes,
            },
        );
        offset += nbytes;
    }
    let header = Header {
        meta: file.meta.clone(),
        provenance: file.provenance.clone(),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(PREAMBLE_LEN + header_bytes.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, t) in file.weights.iter() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tvkp(bytes: &[u8]) -> Result<TvkpFile> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < PREAMBLE_LEN {
        return Err(Error::MalformedHeader("file shorter than preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = (PREAMBLE_LEN as u64)
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| Error::MalformedHeader("header length exceeds file size".into()))?
        as usize;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE_LEN..header_end])
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let payload = &bytes[header_end..];

    for (name, e) in &header.tensors {
        if name.is_empty() {
            return Err(Error::MalformedHeader("empty tensor name".into()));
        }
        if e.dtype != "f32" {
            return Err(Error::MalformedHeader(format!(
                "tensor {name}: unsupported dtype {}",
                e.dtype
            )));
        }
        if e.shape.iter().any(|&d| d == 0) {
            return Err(Error::MalformedHeader(format!(
                "tensor {name}: zero dimension in {:?}",
                e.shape
            )));
        }
        let numel = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        if numel.and_then(|n| n.checked_mul(4)) != Some(e.nbytes) {
            return Err(Error::MalformedHeader(format!(
                "tensor {name}: nbytes {} does not match shape {:?}",
                e.nbytes, e.shape
            )));
        }
    }

    let mut by_offset: Vec<(&String, &TensorEntry)> = header.tensors.iter().collect();
    by_offset.sort_by_key(|(name, e)| (e.offset, *name));
    for pair in by_offset.windows(2) {
        let (a, ea) = pair[0];
        let (b, eb) = pair[1];
        if ea.offset.saturating_add(ea.nbytes) > eb.offset {
            return Err(Error::OverlappingOffsets {
                first: a.clone(),
                second: b.clone(),
            });
        }
    }
    let available = payload.len() as u64;
    for (name, e) in &by_offset {
        let needed = e.offset.saturating_add(e.nbytes);
        if needed > available {
            return Err(Error::TruncatedPayload {
                name: (*name).clone(),
                needed,
                available,
            });
        }
    }
    let mut cursor = 0u64;
    for ((name, e), canonical) in by_offset.iter().zip(header.tensors.keys()) {
        if *name != canonical {
            return Err(Error::NonContiguous(format!(
                "tensor {name} out of lexicographic order"
            )));
        }
        if e.offset != cursor {
            return Err(Error::NonContiguous(format!(
                "gap before tensor {name} at offset {}",
                e.offset
            )));
        }
        cursor += e.nbytes;
    }
    if cursor != available {
        return Err(Error::NonContiguous(format!(
            "{} trailing payload bytes",
            available - cursor
        )));
    }

    let mut weights = TensorMap::new();
    for (name, e) in header.tensors {
        let start = e.offset as usize;
        let raw = &payload[start..start + e.nbytes as usize];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(e.shape, data)?;
        if !t.is_finite() {
            return Err(Error::NonFinite(name));
        }
        weights.insert(name, t)?;
    }
    Ok(TvkpFile {
        weights,
        meta: header.meta,
        provenance: header.provenance,
    })
}

pub fn save_tvkp(file: &TvkpFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tvkp(file)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_tvkp(path: impl AsRef<Path>) -> Result<TvkpFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tvkp(&bytes)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    save_tvkp(
        &TvkpFile {
            weights: ckpt.weights.clone(),
            meta: ckpt.meta.clone(),
            provenance: None,
        },
        path,
    )
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let f = load_tvkp(path)?;
    Ok(Checkpoint {
        weights: f.weights,
        meta: f.meta,
    })
}
