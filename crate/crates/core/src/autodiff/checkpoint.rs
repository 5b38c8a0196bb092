//! Weights as a flat file of little-endian `f64` plus a JSON sidecar listing
//! tensor names and shapes in storage order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::tensor::Matrix;

use super::ParamStore;

#[derive(Debug, Serialize, Deserialize)]
struct SidecarEntry {
    name: String,
    shape: Vec<usize>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Writes `path` and `path.json`.
pub fn save_checkpoint(graph: &ModelGraph, params: &ParamStore, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(params.numel() * 8);
    for m in &params.tensors {
        for v in &m.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let entries: Vec<SidecarEntry> = graph
        .tensors
        .iter()
        .map(|t| SidecarEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
        })
        .collect();
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&entries).expect("sidecar serializes");
    std::fs::write(&side, text).map_err(|e| Error::io(side, e))
}

pub fn load_checkpoint(graph: &ModelGraph, path: &Path) -> Result<ParamStore> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let entries: Vec<SidecarEntry> = serde_json::from_str(&text).map_err(|source| Error::Json {
        context: side.display().to_string(),
        source,
    })?;
    if entries.len() != graph.len()
        || entries
            .iter()
            .zip(&graph.tensors)
            .any(|(e, t)| e.name != t.name || e.shape != t.shape)
    {
        return Err(Error::Input(format!("{} does not match the model graph", side.display())));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut params = ParamStore::zeros_like(graph);
    if bytes.len() != params.numel() * 8 {
        return Err(Error::Input(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            params.numel() * 8,
            bytes.len()
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for m in &mut params.tensors {
        let Matrix { data, .. } = m;
        for v in data.iter_mut() {
            *v = values.next().expect("length checked");
        }
    }
    Ok(params)
}
