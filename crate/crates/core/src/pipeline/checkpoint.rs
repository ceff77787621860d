//! Adapters-only checkpoint in the safetensors layout: an 8-byte
//! little-endian header length, a JSON header, then raw little-endian `F64`
//! data. The header is written with sorted keys so identical adapters always
//! give identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use safetensors::{Dtype, SafeTensors};
use serde_json::{json, Value};

use super::Model;
use crate::adapters::{AdapterKind, AdapterSet, AdapterWeights};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub kind: AdapterKind,
    pub bottleneck_dim: usize,
    pub config_fingerprint: String,
    pub seed: u64,
    pub version: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub adapters: AdapterSet,
    pub meta: CheckpointMeta,
}

fn encode(adapters: &AdapterSet, meta: &CheckpointMeta) -> Vec<u8> {
    let mut arrays: BTreeMap<String, &Array2<f64>> = BTreeMap::new();
    for w in adapters.layers() {
        arrays.insert(format!("layer{}.W_down", w.layer_index), &w.w_down);
        arrays.insert(format!("layer{}.W_up", w.layer_index), &w.w_up);
    }
    let mut header = serde_json::Map::new();
    header.insert(
        "__metadata__".into(),
        json!({
            "bottleneck_dim": meta.bottleneck_dim.to_string(),
            "config_fingerprint": meta.config_fingerprint,
            "kind": meta.kind.as_str(),
            "seed": meta.seed.to_string(),
            "version": meta.version.to_string(),
        }),
    );
    let mut data = Vec::new();
    for (name, a) in &arrays {
        let start = data.len();
        for v in a.iter() {
            data.extend_from_slice(&v.to_le_bytes());
        }
        header.insert(
            name.clone(),
            json!({ "dtype": "F64", "shape": [a.nrows(), a.ncols()], "data_offsets": [start, data.len()] }),
        );
    }
    // Keys are inserted in a fixed order, so the header text is canonical
    // whether or not the JSON map preserves insertion order.
    let mut text = Value::Object(header).to_string().into_bytes();
    text.resize(text.len().next_multiple_of(8), b' ');
    let mut out = Vec::with_capacity(8 + text.len() + data.len());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&data);
    out
}

/// Writes the adapters with metadata tying them to `model`.
pub fn save_checkpoint(adapters: &AdapterSet, model: &Model, path: &Path) -> Result<()> {
    adapters.check_compatible(model.config())?;
    let meta = CheckpointMeta {
        kind: adapters.kind(),
        bottleneck_dim: adapters.bottleneck_dim(),
        config_fingerprint: model.fingerprint(),
        seed: model.seed(),
        version: CHECKPOINT_VERSION,
    };
    write_checkpoint(&Checkpoint { adapters: adapters.clone(), meta }, path)
}

pub fn write_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode(&checkpoint.adapters, &checkpoint.meta)).map_err(|e| Error::io(path, e))
}

fn parse_layer_key(key: &str) -> Option<(usize, bool)> {
    let rest = key.strip_prefix("layer")?;
    let (idx, which) = rest.split_once('.')?;
    let up = match which {
        "W_down" => false,
        "W_up" => true,
        _ => return None,
    };
    Some((idx.parse().ok()?, up))
}

/// Parses a checkpoint without checking it against a model.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::format(path, reason);
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let meta_map = header.metadata().clone().ok_or_else(|| bad("missing metadata".into()))?;
    let field = |k: &str| meta_map.get(k).cloned().ok_or_else(|| bad(format!("missing metadata key {k}")));
    let number = |k: &str| -> Result<u64> { field(k)?.parse().map_err(|_| bad(format!("bad metadata value for {k}"))) };
    let meta = CheckpointMeta {
        kind: field("kind")?.parse().map_err(|_| bad("unknown adapter kind".into()))?,
        bottleneck_dim: number("bottleneck_dim")? as usize,
        config_fingerprint: field("config_fingerprint")?,
        seed: number("seed")?,
        version: number("version")? as u32,
    };
    if meta.version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {}", meta.version)));
    }

    let mut parts: BTreeMap<usize, [Option<Array2<f64>>; 2]> = BTreeMap::new();
    for (name, view) in st.iter() {
        let (layer, up) = parse_layer_key(name).ok_or_else(|| bad(format!("unexpected array {name:?}")))?;
        if view.dtype() != Dtype::F64 || view.shape().len() != 2 {
            return Err(bad(format!("{name} must be a 2-D F64 array")));
        }
        let values: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let a = Array2::from_shape_vec((view.shape()[0], view.shape()[1]), values).map_err(|e| bad(e.to_string()))?;
        parts.entry(layer).or_default()[usize::from(up)] = Some(a);
    }
    let mut entries = Vec::with_capacity(parts.len());
    for (layer, [down, up]) in parts {
        let (Some(w_down), Some(w_up)) = (down, up) else {
            return Err(bad(format!("layer {layer} lacks one of its matrices")));
        };
        entries.push(AdapterWeights {
            w_down,
            w_up,
            kind: meta.kind,
            layer_index: layer,
        });
    }
    let embed_dim = entries.first().map_or(0, |w| w.w_down.nrows());
    let adapters = AdapterSet::from_entries(meta.kind, meta.bottleneck_dim, embed_dim, entries)
        .map_err(|e| bad(e.to_string()))?;
    Ok(Checkpoint { adapters, meta })
}

/// Reads a checkpoint and verifies it was trained against `model`.
pub fn load_checkpoint(path: &Path, model: &Model) -> Result<AdapterSet> {
    let ck = read_checkpoint(path)?;
    let expected = model.fingerprint();
    if ck.meta.config_fingerprint != expected {
        return Err(Error::Compatibility(format!(
            "checkpoint fingerprint {} does not match model {}",
            ck.meta.config_fingerprint, expected
        )));
    }
    ck.adapters
        .check_compatible(model.config())
        .map_err(|e| Error::Compatibility(e.to_string()))?;
    Ok(ck.adapters)
}
