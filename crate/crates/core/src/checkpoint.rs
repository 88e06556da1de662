//! Checkpoint archive: a JSON manifest followed by named tensors stored
//! as raw little-endian 64-bit reals in row-major order, each prefixed
//! with its name length, name bytes and two u32 dims. Round-trips are
//! bit-exact.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseLayer;
use crate::recurrent::{GruParams, LstmParams, RecurrentParams};

const MAGIC: &[u8; 4] = b"PHCK";
const VERSION: u32 = 1;

/// Architecture and run metadata stored alongside the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub architecture: String,
    pub input_size: usize,
    pub hidden_sizes: Vec<usize>,
    pub head_size: usize,
    pub seed: u64,
    /// Echo of the resolved training configuration.
    pub training_config: serde_json::Value,
    /// Optimizer hyperparameters and step counter, when training state
    /// is included for resumption.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<serde_json::Value>,
}

/// One named tensor; biases use cols = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

pub fn write_archive(
    path: &Path,
    manifest: &CheckpointManifest,
    tensors: &[NamedTensor],
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    let manifest_bytes = serde_json::to_vec(manifest)?;
    w.write_all(&(manifest_bytes.len() as u32).to_le_bytes())
        .map_err(io)?;
    w.write_all(&manifest_bytes).map_err(io)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())
        .map_err(io)?;
    for t in tensors {
        if t.data.len() != t.rows * t.cols {
            return Err(Error::shape(
                "checkpoint tensor",
                t.rows * t.cols,
                t.data.len(),
            ));
        }
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(name).map_err(io)?;
        w.write_all(&(t.rows as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(t.cols as u32).to_le_bytes()).map_err(io)?;
        for &v in &t.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_archive(path: &Path) -> Result<(CheckpointManifest, Vec<NamedTensor>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let fmt = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| fmt("missing magic".into()))?;
    if &magic != MAGIC {
        return Err(fmt(format!("bad magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| fmt("truncated version".into()))?;
    if u32::from_le_bytes(u32buf) != VERSION {
        return Err(fmt("unsupported checkpoint version".into()));
    }
    r.read_exact(&mut u32buf)
        .map_err(|_| fmt("truncated manifest length".into()))?;
    let mut manifest_bytes = vec![0u8; u32::from_le_bytes(u32buf) as usize];
    r.read_exact(&mut manifest_bytes)
        .map_err(|_| fmt("truncated manifest".into()))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest_bytes)?;
    r.read_exact(&mut u32buf)
        .map_err(|_| fmt("truncated tensor count".into()))?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u32buf)
            .map_err(|_| fmt("truncated tensor name".into()))?;
        let mut name = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        r.read_exact(&mut name)
            .map_err(|_| fmt("truncated tensor name".into()))?;
        let name = String::from_utf8(name).map_err(|_| fmt("tensor name not UTF-8".into()))?;
        r.read_exact(&mut u32buf)
            .map_err(|_| fmt("truncated dims".into()))?;
        let rows = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)
            .map_err(|_| fmt("truncated dims".into()))?;
        let cols = u32::from_le_bytes(u32buf) as usize;
        let mut data = vec![0.0f64; rows * cols];
        let mut f64buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut f64buf)
                .map_err(|_| fmt(format!("truncated tensor '{name}'")))?;
            *v = f64::from_le_bytes(f64buf);
        }
        tensors.push(NamedTensor {
            name,
            rows,
            cols,
            data,
        });
    }
    Ok((manifest, tensors))
}

/// Saves a recurrent model; `extra` carries optimizer buffers.
pub fn save_recurrent(
    path: &Path,
    params: &RecurrentParams,
    manifest: &CheckpointManifest,
    extra: &[NamedTensor],
) -> Result<()> {
    let mut tensors = Vec::new();
    params.visit_tensors(|name, rows, cols, data| {
        tensors.push(NamedTensor {
            name,
            rows,
            cols,
            data: data.to_vec(),
        })
    });
    tensors.extend_from_slice(extra);
    write_archive(path, manifest, &tensors)
}

/// Loads a recurrent model, returning any extra (optimizer) tensors.
pub fn load_recurrent(
    path: &Path,
) -> Result<(RecurrentParams, CheckpointManifest, Vec<NamedTensor>)> {
    let (manifest, tensors) = read_archive(path)?;
    let mut params = match manifest.architecture.as_str() {
        "lstm" => {
            if manifest.hidden_sizes.len() != 1 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    message: "lstm checkpoint must declare one hidden size".into(),
                });
            }
            RecurrentParams::Lstm(LstmParams::init(
                manifest.input_size,
                manifest.hidden_sizes[0],
                manifest.head_size,
                0,
            ))
        }
        "gru" => RecurrentParams::Gru(GruParams::init(
            manifest.input_size,
            &manifest.hidden_sizes,
            manifest.head_size,
            0,
        )),
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("unknown architecture '{other}'"),
            })
        }
    };
    let map: std::collections::HashMap<&str, &NamedTensor> =
        tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut missing = Vec::new();
    let mut bad_shape = Vec::new();
    params.visit_tensors_mut(|name, rows, cols, data| match map.get(name.as_str()) {
        Some(t) if t.rows == rows && t.cols == cols => data.copy_from_slice(&t.data),
        Some(_) => bad_shape.push(name),
        None => missing.push(name),
    });
    if !missing.is_empty() || !bad_shape.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("missing tensors {missing:?}, mismatched shapes {bad_shape:?}"),
        });
    }
    let param_names: std::collections::HashSet<String> = {
        let mut s = std::collections::HashSet::new();
        params.visit_tensors(|name, _, _, _| {
            s.insert(name);
        });
        s
    };
    let extra = tensors
        .into_iter()
        .filter(|t| !param_names.contains(&t.name))
        .collect();
    Ok((params, manifest, extra))
}

/// Saves the dense tool head.
pub fn save_tool_head(
    path: &Path,
    head: &DenseLayer,
    manifest: &CheckpointManifest,
    extra: &[NamedTensor],
) -> Result<()> {
    let mut tensors = vec![
        NamedTensor {
            name: "head.weights".into(),
            rows: head.weights.rows,
            cols: head.weights.cols,
            data: head.weights.data.clone(),
        },
        NamedTensor {
            name: "head.bias".into(),
            rows: head.bias.len(),
            cols: 1,
            data: head.bias.clone(),
        },
    ];
    tensors.extend_from_slice(extra);
    write_archive(path, manifest, &tensors)
}

pub fn load_tool_head(path: &Path) -> Result<(DenseLayer, CheckpointManifest)> {
    let (manifest, tensors) = read_archive(path)?;
    if manifest.architecture != "tool_head" {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!(
                "expected a tool_head checkpoint, found '{}'",
                manifest.architecture
            ),
        });
    }
    let weights = tensors
        .iter()
        .find(|t| t.name == "head.weights")
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: "missing head.weights".into(),
        })?;
    let bias = tensors
        .iter()
        .find(|t| t.name == "head.bias")
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: "missing head.bias".into(),
        })?;
    Ok((
        DenseLayer {
            weights: crate::numerics::Matrix {
                rows: weights.rows,
                cols: weights.cols,
                data: weights.data.clone(),
            },
            bias: bias.data.clone(),
        },
        manifest,
    ))
}
