//! Raw tensor dumps: little-endian `f64` values in row-major order, with a
//! JSON sidecar of the same basename describing the shape.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub shape: Vec<usize>,
    pub order: String,
    pub dtype: String,
    /// Producer-specific metadata (e.g. the channel count of a projector).
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl TensorHeader {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            order: "row-major".to_string(),
            dtype: "f64le".to_string(),
            extra: Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.extra.insert(key.to_string(), value.into());
        self
    }

    fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

fn sibling(base: &Path, ext: &str) -> PathBuf {
    base.with_extension(ext)
}

/// Writes `<base>.bin` and `<base>.json`.
pub fn write_tensor(base: &Path, header: &TensorHeader, data: &[f64]) -> Result<()> {
    if header.element_count() != data.len() {
        return Err(Error::contract(
            "write_tensor",
            format!("shape {:?} vs {} values", header.shape, data.len()),
        ));
    }
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(sibling(base, "bin"), bytes)?;
    fs::write(
        sibling(base, "json"),
        serde_json::to_string_pretty(header)?,
    )?;
    Ok(())
}

/// Reads a dump written by [`write_tensor`].
pub fn read_tensor(base: &Path) -> Result<(TensorHeader, Vec<f64>)> {
    let header: TensorHeader = serde_json::from_slice(&fs::read(sibling(base, "json"))?)?;
    if header.order != "row-major" || header.dtype != "f64le" {
        return Err(Error::contract(
            "read_tensor",
            format!("unsupported layout {} / {}", header.order, header.dtype),
        ));
    }
    let bytes = fs::read(sibling(base, "bin"))?;
    if bytes.len() != header.element_count() * 8 {
        return Err(Error::contract(
            "read_tensor",
            format!("{} bytes for shape {:?}", bytes.len(), header.shape),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, data))
}
