//! Checkpoint serialization.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header
//! mapping tensor names to `{dtype, shape, data_offsets}` plus an
//! optional `__metadata__` string map, then one contiguous little-endian
//! payload. Offsets are relative to the payload start and must tile it
//! exactly. The layout matches safetensors, so files produced by other
//! tooling load here as long as they stick to F32/F64 tensors.
//!
//! Writes are canonical: names in lexicographic order, offsets assigned
//! in that order, header padded with spaces to a multiple of 8. Equal
//! `ParamSet`s therefore serialize to identical bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::paramset::ParamSet;
use crate::tensor::{Dtype, Tensor};

/// Metadata key under which artifact kinds ("delta", "mask", "fisher",
/// "calib") are recorded.
pub const KIND_KEY: &str = "kind";

const METADATA_KEY: &str = "__metadata__";

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

struct Header {
    metadata: BTreeMap<String, String>,
    tensors: BTreeMap<String, HeaderEntry>,
}

// Hand-written visitor so duplicate tensor names are an error instead of
// a silent last-wins overwrite.
impl<'de> Deserialize<'de> for Header {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Header, D::Error> {
        struct HeaderVisitor;

        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = Header;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of tensor names to tensor descriptors")
            }

            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<Header, A::Error> {
                let mut metadata = None;
                let mut tensors = BTreeMap::new();
                while let Some(key) = map.next_key::<String>()? {
                    if key == METADATA_KEY {
                        if metadata.is_some() {
                            return Err(serde::de::Error::custom("duplicate __metadata__"));
                        }
                        metadata = Some(map.next_value::<BTreeMap<String, String>>()?);
                    } else {
                        let entry = map.next_value::<HeaderEntry>()?;
                        if tensors.insert(key.clone(), entry).is_some() {
                            return Err(serde::de::Error::custom(format!(
                                "duplicate tensor name {key:?}"
                            )));
                        }
                    }
                }
                Ok(Header {
                    metadata: metadata.unwrap_or_default(),
                    tensors,
                })
            }
        }

        de.deserialize_map(HeaderVisitor)
    }
}

/// Serializes a `ParamSet` to checkpoint bytes. Deterministic: equal
/// inputs give identical output bytes.
pub fn checkpoint_bytes(ps: &ParamSet) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    if !ps.metadata().is_empty() {
        header.insert(
            METADATA_KEY.to_string(),
            serde_json::to_value(ps.metadata()).expect("string map serializes"),
        );
    }

    let mut offset = 0u64;
    let mut payload = Vec::new();
    for (name, tensor) in ps.iter() {
        let bytes = tensor.to_le_bytes();
        let end = offset + bytes.len() as u64;
        header.insert(
            name.to_string(),
            serde_json::to_value(HeaderEntry {
                dtype: tensor.dtype().tag().to_string(),
                shape: tensor.shape().to_vec(),
                data_offsets: [offset, end],
            })
            .expect("header entry serializes"),
        );
        payload.extend_from_slice(&bytes);
        offset = end;
    }

    // serde_json maps iterate sorted by key, so the header text is canonical.
    let mut header_text = serde_json::Value::Object(header).to_string().into_bytes();
    while header_text.len() % 8 != 0 {
        header_text.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + header_text.len() + payload.len());
    out.extend_from_slice(&(header_text.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_text);
    out.extend_from_slice(&payload);
    out
}

/// Parses checkpoint bytes produced by [`checkpoint_bytes`] or by any
/// safetensors-compatible writer restricted to F32/F64.
pub fn parse_checkpoint_bytes(bytes: &[u8]) -> Result<ParamSet> {
    if bytes.len() < 8 {
        return Err(Error::MalformedHeader(format!(
            "file is {} bytes, need at least an 8-byte length prefix",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let rest = &bytes[8..];
    if header_len > rest.len() {
        return Err(Error::MalformedHeader(format!(
            "header length {} exceeds remaining {} bytes",
            header_len,
            rest.len()
        )));
    }
    let header_bytes = &rest[..header_len];
    let payload = &rest[header_len..];

    let header_text = std::str::from_utf8(header_bytes)
        .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let header: Header = serde_json::from_str(header_text).map_err(|e| {
        if e.to_string().contains("duplicate tensor name") {
            Error::DuplicateName(e.to_string())
        } else {
            Error::MalformedHeader(e.to_string())
        }
    })?;

    let declared: u64 = header
        .tensors
        .values()
        .map(|e| e.data_offsets[1])
        .max()
        .unwrap_or(0);
    if declared != payload.len() as u64 {
        return Err(Error::ByteLengthMismatch {
            declared,
            actual: payload.len() as u64,
        });
    }

    // Byte ranges must tile the payload: start at 0, no gaps, no overlap.
    let mut spans: Vec<(u64, u64, &str)> = header
        .tensors
        .iter()
        .map(|(n, e)| (e.data_offsets[0], e.data_offsets[1], n.as_str()))
        .collect();
    spans.sort_unstable();
    let mut cursor = 0u64;
    for (start, end, name) in &spans {
        if *start != cursor || end < start {
            return Err(Error::MalformedHeader(format!(
                "tensor {name:?} spans [{start}, {end}) but payload is tiled up to {cursor}"
            )));
        }
        cursor = *end;
    }

    let mut ps = ParamSet::new();
    for (name, entry) in &header.tensors {
        let dtype = Dtype::from_tag(&entry.dtype).ok_or_else(|| Error::UnsupportedDtype {
            name: name.clone(),
            dtype: entry.dtype.clone(),
        })?;
        let [start, end] = entry.data_offsets;
        let span = end - start;
        let expected = (entry.shape.iter().product::<usize>() * dtype.byte_size()) as u64;
        if span != expected {
            return Err(Error::ShapeByteMismatch {
                name: name.clone(),
                shape: entry.shape.clone(),
                expected,
                actual: span,
            });
        }
        let tensor = Tensor::from_le_bytes(
            entry.shape.clone(),
            dtype,
            &payload[start as usize..end as usize],
        )
        .map_err(|e| match e {
            Error::NonFinite { index, .. } => Error::NonFinite {
                name: name.clone(),
                index,
            },
            other => other,
        })?;
        ps.insert(name.clone(), tensor);
    }
    for (k, v) in &header.metadata {
        ps.set_metadata(k.clone(), v.clone());
    }
    Ok(ps)
}

pub fn save_checkpoint(ps: &ParamSet, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(ps)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint_bytes(&bytes)
}
