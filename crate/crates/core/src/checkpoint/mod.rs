//! Checkpoint container: an 8-byte little-endian header length, a canonical
//! JSON header mapping tensor names to `{data_offsets, dtype, shape}`, then the
//! raw little-endian tensor bytes.
//!
//! The layout follows the common open tensor-container convention, with two
//! tightening rules on write: keys are sorted and the header carries no padding
//! or insignificant whitespace, so a checkpoint always serializes to the same
//! bytes.

mod dtype;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dtype::{decode_element, encode_element, round_to_dtype, DType};

pub const METADATA_KEY: &str = "__metadata__";

/// Decoder layers live under this prefix as `decoder.layers.<i>.<suffix>`.
pub const DECODER_LAYER_PREFIX: &str = "decoder.layers";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unknown dtype {dtype:?} for tensor {name}")]
    UnknownDtype { name: String, dtype: String },
    #[error("overlapping byte ranges: {first} and {second}")]
    OverlappingRanges { first: String, second: String },
    #[error("gap in byte ranges before tensor {name} (expected offset {expected}, found {found})")]
    GappedRanges { name: String, expected: usize, found: usize },
    #[error("truncated data region: header needs {needed} bytes, file has {available}")]
    Truncated { needed: usize, available: usize },
    #[error("data region has {extra} trailing bytes not covered by any tensor")]
    TrailingData { extra: usize },
    #[error("tensor {name}: byte length {actual} does not match shape {shape:?} x {dtype}")]
    SizeMismatch {
        name: String,
        shape: Vec<usize>,
        dtype: DType,
        actual: usize,
    },
    #[error("tensor name {0:?} is reserved or empty")]
    InvalidName(String),
    #[error("non-integer layer index in tensor {0}")]
    NonIntegerLayerIndex(String),
    #[error("tensor {0} sits directly on a layer index with no suffix")]
    MissingSuffix(String),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let expected = shape.iter().product::<usize>() * dtype.byte_width();
        if expected != data.len() {
            return Err(CheckpointError::SizeMismatch {
                name: String::new(),
                shape,
                dtype,
                actual: data.len(),
            });
        }
        Ok(Self { dtype, shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(DType::F32, shape, data)
    }

    /// Builds a float tensor by rounding each `f64` value once to `dtype`.
    pub fn from_f64_rounded(dtype: DType, shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        let mut data = Vec::with_capacity(values.len() * dtype.byte_width());
        for &v in values {
            encode_element(dtype, v, &mut data);
        }
        Self::new(dtype, shape, data)
    }

    pub fn from_i32(shape: Vec<usize>, values: &[i32]) -> Result<Self> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(DType::I32, shape, data)
    }

    pub fn from_u8(shape: Vec<usize>, values: Vec<u8>) -> Result<Self> {
        Self::new(DType::U8, shape, values)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Decodes every element to `f64`. Exact for all supported dtypes.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        let w = self.dtype.byte_width();
        self.data
            .chunks_exact(w)
            .map(|c| decode_element(self.dtype, c))
            .collect()
    }

    pub fn to_i32_vec(&self) -> Option<Vec<i32>> {
        (self.dtype == DType::I32).then(|| {
            self.data
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        })
    }
}

/// Location of one tensor inside the data region, as listed in the header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub byte_range: (usize, usize),
}

/// An ordered map from tensor name to tensor, plus string metadata.
///
/// Iteration order is lexicographic by name. Checkpoints are plain values and
/// can be shared freely across threads.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name == METADATA_KEY {
            return Err(CheckpointError::InvalidName(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Header entries in serialization order with their data offsets.
    pub fn metas(&self) -> Vec<TensorMeta> {
        let mut offset = 0;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let start = offset;
                offset += t.data.len();
                TensorMeta {
                    name: name.clone(),
                    dtype: t.dtype,
                    shape: t.shape.clone(),
                    byte_range: (start, offset),
                }
            })
            .collect()
    }

    pub fn data_len(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    /// Serializes to the container byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header_json();
        let mut out = Vec::with_capacity(8 + header.len() + self.data_len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    fn header_json(&self) -> Vec<u8> {
        #[derive(Serialize)]
        #[serde(untagged)]
        enum Entry<'a> {
            Tensor {
                data_offsets: (usize, usize),
                dtype: DType,
                shape: &'a [usize],
            },
            Metadata(&'a BTreeMap<String, String>),
        }

        // A BTreeMap keeps the keys sorted no matter which serde_json
        // features other crates turn on.
        let mut header: BTreeMap<&str, Entry<'_>> = BTreeMap::new();
        let mut offset = 0;
        for (name, t) in &self.tensors {
            let start = offset;
            offset += t.data.len();
            header.insert(
                name,
                Entry::Tensor {
                    data_offsets: (start, offset),
                    dtype: t.dtype,
                    shape: &t.shape,
                },
            );
        }
        if !self.metadata.is_empty() {
            header.insert(METADATA_KEY, Entry::Metadata(&self.metadata));
        }
        serde_json::to_vec(&header).expect("header serialization cannot fail")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(CheckpointError::MalformedHeader(
                "file shorter than the 8-byte header length".into(),
            ));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let header_len = usize::try_from(header_len)
            .ok()
            .filter(|&n| n <= bytes.len() - 8)
            .ok_or_else(|| {
                CheckpointError::MalformedHeader(format!(
                    "header length {header_len} exceeds file size {}",
                    bytes.len()
                ))
            })?;
        let header_bytes = &bytes[8..8 + header_len];
        let data = &bytes[8 + header_len..];

        let raw: BTreeMap<String, serde_json::Value> = serde_json::from_slice(header_bytes)
            .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;

        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct RawEntry {
            dtype: String,
            shape: Vec<usize>,
            data_offsets: (usize, usize),
        }

        let mut metadata = BTreeMap::new();
        let mut metas = Vec::with_capacity(raw.len());
        for (name, value) in raw {
            if name == METADATA_KEY {
                metadata = serde_json::from_value(value).map_err(|e| {
                    CheckpointError::MalformedHeader(format!("metadata must map strings to strings: {e}"))
                })?;
                continue;
            }
            let entry: RawEntry = serde_json::from_value(value)
                .map_err(|e| CheckpointError::MalformedHeader(format!("tensor {name}: {e}")))?;
            let dtype = DType::parse(&entry.dtype).ok_or_else(|| CheckpointError::UnknownDtype {
                name: name.clone(),
                dtype: entry.dtype.clone(),
            })?;
            let (start, end) = entry.data_offsets;
            let expected = entry.shape.iter().product::<usize>() * dtype.byte_width();
            if end < start || end - start != expected {
                return Err(CheckpointError::SizeMismatch {
                    name,
                    shape: entry.shape,
                    dtype,
                    actual: end.saturating_sub(start),
                });
            }
            metas.push(TensorMeta {
                name,
                dtype,
                shape: entry.shape,
                byte_range: (start, end),
            });
        }

        validate_ranges(&metas, data.len())?;

        let tensors = metas
            .into_iter()
            .map(|m| {
                let (s, e) = m.byte_range;
                let t = Tensor {
                    dtype: m.dtype,
                    shape: m.shape,
                    data: data[s..e].to_vec(),
                };
                (m.name, t)
            })
            .collect();
        Ok(Self { tensors, metadata })
    }
}

/// Byte ranges must tile `[0, data_len)` exactly: sorted by start they are
/// contiguous, non-overlapping and end at the data region's end.
fn validate_ranges(metas: &[TensorMeta], data_len: usize) -> Result<()> {
    let mut order: Vec<&TensorMeta> = metas.iter().collect();
    order.sort_by_key(|m| (m.byte_range.0, m.byte_range.1));
    let mut cursor = 0usize;
    let mut prev: Option<&TensorMeta> = None;
    for m in order {
        let (start, end) = m.byte_range;
        if start < cursor {
            return Err(CheckpointError::OverlappingRanges {
                first: prev.map(|p| p.name.clone()).unwrap_or_default(),
                second: m.name.clone(),
            });
        }
        if start > cursor {
            return Err(CheckpointError::GappedRanges {
                name: m.name.clone(),
                expected: cursor,
                found: start,
            });
        }
        cursor = end;
        prev = Some(m);
    }
    if cursor > data_len {
        return Err(CheckpointError::Truncated {
            needed: cursor,
            available: data_len,
        });
    }
    if cursor < data_len {
        return Err(CheckpointError::TrailingData {
            extra: data_len - cursor,
        });
    }
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    Checkpoint::from_bytes(&bytes)
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = ckpt.to_bytes();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Splits every tensor under `prefix.<i>.` into `(i, suffix)`, sorted by layer
/// index then suffix. Tensors outside the namespace are skipped.
pub fn tensor_names_by_pattern(ckpt: &Checkpoint, prefix: &str) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for name in ckpt.names() {
        let Some(rest) = name
            .strip_prefix(prefix)
            .and_then(|r| r.strip_prefix('.'))
        else {
            continue;
        };
        let (index, suffix) = match rest.split_once('.') {
            Some((i, s)) => (i, s),
            None => (rest, ""),
        };
        let index: usize = index
            .parse()
            .map_err(|_| CheckpointError::NonIntegerLayerIndex(name.to_string()))?;
        if suffix.is_empty() {
            return Err(CheckpointError::MissingSuffix(name.to_string()));
        }
        out.push((index, suffix.to_string()));
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_built(offsets: &[(usize, usize)], data_len: usize) -> Vec<u8> {
        let mut header = String::from("{");
        for (i, (s, e)) in offsets.iter().enumerate() {
            if i > 0 {
                header.push(',');
            }
            header.push_str(&format!(
                "\"t{i}\":{{\"dtype\":\"F32\",\"shape\":[{}],\"data_offsets\":[{s},{e}]}}",
                (e - s) / 4
            ));
        }
        header.push('}');
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend((0..data_len).map(|i| i as u8));
        bytes
    }

    #[test]
    fn parses_hand_built_three_tensor_fixture() {
        let bytes = hand_built(&[(0, 8), (8, 16), (16, 24)], 24);
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        let metas = ckpt.metas();
        assert_eq!(metas.len(), 3);
        for (i, m) in metas.iter().enumerate() {
            assert_eq!(m.name, format!("t{i}"));
            assert_eq!(m.dtype, DType::F32);
            assert_eq!(m.shape, vec![2]);
            assert_eq!(m.byte_range, (8 * i, 8 * i + 8));
            let t = ckpt.get(&m.name).unwrap();
            let expected: Vec<u8> = (8 * i..8 * i + 8).map(|b| b as u8).collect();
            assert_eq!(t.data(), &expected[..]);
        }
    }

    #[test]
    fn rejects_overlapping_ranges() {
        let bytes = hand_built(&[(0, 8), (4, 12)], 12);
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, CheckpointError::OverlappingRanges { .. }), "{err}");
        assert!(err.to_string().contains("overlapping byte ranges"));
    }

    #[test]
    fn rejects_gaps_truncation_and_trailing_bytes() {
        let gap = hand_built(&[(0, 8), (12, 20)], 20);
        assert!(matches!(
            Checkpoint::from_bytes(&gap).unwrap_err(),
            CheckpointError::GappedRanges { .. }
        ));
        let truncated = hand_built(&[(0, 8), (8, 16)], 12);
        assert!(matches!(
            Checkpoint::from_bytes(&truncated).unwrap_err(),
            CheckpointError::Truncated { .. }
        ));
        let trailing = hand_built(&[(0, 8)], 10);
        assert!(matches!(
            Checkpoint::from_bytes(&trailing).unwrap_err(),
            CheckpointError::TrailingData { extra: 2 }
        ));
    }

    #[test]
    fn rejects_unknown_dtype_and_garbage_header() {
        let header = r#"{"w":{"dtype":"Q4","shape":[1],"data_offsets":[0,1]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header.as_bytes());
        bytes.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes).unwrap_err(),
            CheckpointError::UnknownDtype { .. }
        ));

        let mut bytes = 4u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"nope");
        assert!(matches!(
            Checkpoint::from_bytes(&bytes).unwrap_err(),
            CheckpointError::MalformedHeader(_)
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&[1, 2, 3]).unwrap_err(),
            CheckpointError::MalformedHeader(_)
        ));
        let huge = u64::MAX.to_le_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&huge).unwrap_err(),
            CheckpointError::MalformedHeader(_)
        ));
    }

    #[test]
    fn empty_checkpoint_is_valid() {
        let bytes = Checkpoint::new().to_bytes();
        assert_eq!(&bytes[8..], b"{}");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), Checkpoint::new());
    }

    #[test]
    fn bf16_two_by_three_has_twelve_data_bytes() {
        let mut c = Checkpoint::new();
        c.insert("w", Tensor::from_f64_rounded(DType::BF16, vec![2, 3], &[1.0; 6]).unwrap())
            .unwrap();
        assert_eq!(c.data_len(), 12);
        let bytes = c.to_bytes();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - 8 - header_len, 12);
    }

    #[test]
    fn header_is_canonical() {
        let mut c = Checkpoint::new();
        c.insert("b", Tensor::from_f32(vec![1], &[1.0]).unwrap()).unwrap();
        c.insert("a", Tensor::from_f32(vec![], &[2.0]).unwrap()).unwrap();
        c.set_metadata("stage", "cpt1");
        let bytes = c.to_bytes();
        let header = std::str::from_utf8(&bytes[8..bytes.len() - 8]).unwrap();
        assert_eq!(
            header,
            r#"{"__metadata__":{"stage":"cpt1"},"a":{"data_offsets":[0,4],"dtype":"F32","shape":[]},"b":{"data_offsets":[4,8],"dtype":"F32","shape":[1]}}"#
        );
    }

    #[test]
    fn accepts_space_padded_header() {
        let mut c = Checkpoint::new();
        c.insert("x", Tensor::from_f32(vec![1], &[5.0]).unwrap()).unwrap();
        let bytes = c.to_bytes();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let mut padded = ((header_len + 3) as u64).to_le_bytes().to_vec();
        padded.extend_from_slice(&bytes[8..8 + header_len]);
        padded.extend_from_slice(b"   ");
        padded.extend_from_slice(&bytes[8 + header_len..]);
        assert_eq!(Checkpoint::from_bytes(&padded).unwrap(), c);
    }

    #[test]
    fn layer_pattern_parsing() {
        let mut c = Checkpoint::new();
        for name in ["decoder.layers.0.attn.w", "decoder.layers.11.mlp.w", "embed.w"] {
            c.insert(name, Tensor::from_f32(vec![], &[0.0]).unwrap()).unwrap();
        }
        assert_eq!(
            tensor_names_by_pattern(&c, DECODER_LAYER_PREFIX).unwrap(),
            vec![(0, "attn.w".to_string()), (11, "mlp.w".to_string())]
        );
        assert!(tensor_names_by_pattern(&Checkpoint::new(), DECODER_LAYER_PREFIX)
            .unwrap()
            .is_empty());

        c.insert("decoder.layers.x.attn.w", Tensor::from_f32(vec![], &[0.0]).unwrap())
            .unwrap();
        let err = tensor_names_by_pattern(&c, DECODER_LAYER_PREFIX).unwrap_err();
        assert!(err.to_string().contains("non-integer layer index"));
    }

    #[test]
    fn layer_pattern_ignores_lookalike_prefixes() {
        let mut c = Checkpoint::new();
        c.insert("decoder.layers_norm.w", Tensor::from_f32(vec![], &[0.0]).unwrap())
            .unwrap();
        assert!(tensor_names_by_pattern(&c, DECODER_LAYER_PREFIX).unwrap().is_empty());
    }

    #[test]
    fn reserved_name_rejected() {
        let mut c = Checkpoint::new();
        assert!(c
            .insert(METADATA_KEY, Tensor::from_f32(vec![], &[0.0]).unwrap())
            .is_err());
    }
}
