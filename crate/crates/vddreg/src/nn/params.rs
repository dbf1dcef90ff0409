//! Named parameter tensors: ordered storage, checksums, and a
//! safetensors-layout container file (8-byte little-endian header length,
//! JSON header mapping tensor names to dtype/shape/offsets, raw data buffer).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, VddError};
use crate::nn::{Graph, NodeId};

/// Ordered collection of named tensors; the order is the binding order used
/// when attaching parameters to a graph and when checksumming.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, idx: usize) -> &ArrayD<f64> {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut ArrayD<f64> {
        &mut self.values[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.values[i])
    }

    /// SHA-256 over names and little-endian f64 bytes, in declaration order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &v in value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }

    /// Binds every tensor to a fresh graph leaf; `trainable` selects between
    /// parameter leaves (gradients tracked) and frozen constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        self.values
            .iter()
            .map(|v| {
                if trainable {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let pairs: Vec<(&str, &ArrayD<f64>)> = self
            .names
            .iter()
            .map(|n| n.as_str())
            .zip(self.values.iter())
            .collect();
        save_tensors(path, &pairs)
    }

    /// Loads tensors and reorders them to match `template`'s names/shapes.
    pub fn load_like(path: &Path, template: &ParamSet) -> Result<ParamSet> {
        let loaded = load_tensors(path)?;
        let map: BTreeMap<String, ArrayD<f64>> = loaded.into_iter().collect();
        let mut out = ParamSet::new();
        for (name, tv) in template.names.iter().zip(&template.values) {
            let v = map
                .get(name)
                .ok_or_else(|| VddError::Weights(format!("tensor '{name}' missing from {}", path.display())))?;
            if v.shape() != tv.shape() {
                return Err(VddError::Weights(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    v.shape(),
                    tv.shape()
                )));
            }
            out.push(name.clone(), v.clone());
        }
        Ok(out)
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Writes named f64 tensors in the safetensors container layout.
pub fn save_tensors(path: &Path, tensors: &[(&str, &ArrayD<f64>)]) -> Result<()> {
    let mut header = BTreeMap::<String, TensorHeader>::new();
    let mut offset = 0usize;
    for (name, t) in tensors {
        let bytes = t.len() * 8;
        header.insert(
            (*name).to_string(),
            TensorHeader {
                dtype: "F64".into(),
                shape: t.shape().to_vec(),
                data_offsets: [offset, offset + bytes],
            },
        );
        offset += bytes;
    }
    let header_json = serde_json::to_vec(&header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    for (_, t) in tensors {
        for &v in t.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Reads a safetensors-layout file; accepts F64 and F32 tensors (F32 is
/// upcast), which covers weights exported from common training frameworks.
pub fn load_tensors(path: &Path) -> Result<Vec<(String, ArrayD<f64>)>> {
    if !path.exists() {
        return Err(VddError::MissingFile(path.to_path_buf()));
    }
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 100_000_000 {
        return Err(VddError::Weights(format!(
            "implausible header length {header_len} in {}",
            path.display()
        )));
    }
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)?;
    let header: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&header_json)?;
    let mut data = Vec::new();
    f.read_to_end(&mut data)?;

    let mut out = Vec::new();
    for (name, spec) in header {
        if name == "__metadata__" {
            continue;
        }
        let spec: TensorHeader = serde_json::from_value(spec)
            .map_err(|e| VddError::Weights(format!("bad header entry '{name}': {e}")))?;
        let [start, end] = spec.data_offsets;
        if end > data.len() || start > end {
            return Err(VddError::Weights(format!(
                "tensor '{name}' offsets [{start}, {end}] exceed data buffer ({} bytes)",
                data.len()
            )));
        }
        let raw = &data[start..end];
        let n: usize = spec.shape.iter().product();
        let values: Vec<f64> = match spec.dtype.as_str() {
            "F64" => {
                if raw.len() != n * 8 {
                    return Err(VddError::Weights(format!("tensor '{name}' size mismatch")));
                }
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
            "F32" => {
                if raw.len() != n * 4 {
                    return Err(VddError::Weights(format!("tensor '{name}' size mismatch")));
                }
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            }
            other => {
                return Err(VddError::Weights(format!(
                    "tensor '{name}' has unsupported dtype {other}"
                )))
            }
        };
        let arr = ArrayD::from_shape_vec(IxDyn(&spec.shape), values)
            .map_err(|e| VddError::Weights(format!("tensor '{name}': {e}")))?;
        out.push((name, arr));
    }
    Ok(out)
}
