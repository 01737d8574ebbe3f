//! Model directory format: `manifest.json` + `weights.bin`.
//!
//! The blob is the concatenation of every tensor as little-endian `f32`, in
//! node order then parameter-name order. The manifest records each tensor's
//! shape, byte offset and CRC32 of its bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Edge, LayerKind, LayerNode, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT: &str = "groupprune-model";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    name: String,
    input_shape: [usize; 3],
    num_classes: usize,
    weights: BlobRef,
    nodes: Vec<ManifestNode>,
    edges: Vec<Edge>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobRef {
    file: String,
    bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestNode {
    id: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    attrs: Value,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    params: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    offset: u64,
    crc32: u32,
}

fn to_le_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn save_model(m: &ModelGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    m.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut blob = Vec::new();
    let mut nodes = Vec::with_capacity(m.nodes.len());
    for node in m.nodes.values() {
        let mut params = BTreeMap::new();
        for (name, t) in &node.params {
            let bytes = to_le_bytes(t.data());
            params.insert(
                name.clone(),
                TensorEntry {
                    shape: t.shape().to_vec(),
                    offset: blob.len() as u64,
                    crc32: crc32fast::hash(&bytes),
                },
            );
            blob.extend_from_slice(&bytes);
        }
        let mut kind = serde_json::to_value(&node.kind)?;
        let attrs = kind.get_mut("attrs").map(Value::take).unwrap_or(Value::Null);
        nodes.push(ManifestNode {
            id: node.id.clone(),
            kind: node.kind.name().to_string(),
            attrs,
            params,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        name: m.name.clone(),
        input_shape: m.input_shape,
        num_classes: m.num_classes,
        weights: BlobRef {
            file: WEIGHTS_FILE.into(),
            bytes: blob.len() as u64,
        },
        nodes,
        edges: m.edges.clone(),
    };

    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, &blob).map_err(|e| Error::io(&wpath, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<ModelGraph> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", mpath.display())))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Manifest(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let wpath = dir.join(&manifest.weights.file);
    let blob = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    if blob.len() as u64 != manifest.weights.bytes {
        return Err(Error::Manifest(format!(
            "{} holds {} bytes, manifest declares {}",
            wpath.display(),
            blob.len(),
            manifest.weights.bytes
        )));
    }

    let mut nodes = IndexMap::with_capacity(manifest.nodes.len());
    for mn in manifest.nodes {
        let mut tagged = serde_json::Map::new();
        tagged.insert("kind".into(), Value::String(mn.kind.clone()));
        if !mn.attrs.is_null() {
            tagged.insert("attrs".into(), mn.attrs);
        }
        let kind: LayerKind = serde_json::from_value(Value::Object(tagged))
            .map_err(|e| Error::node(&mn.id, format!("unsupported kind `{}` or bad attrs: {e}", mn.kind)))?;
        let mut node = LayerNode::new(mn.id.clone(), kind);
        for (name, entry) in mn.params {
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + numel * 4;
            if entry.shape.contains(&0) || end > blob.len() {
                return Err(Error::shape(
                    &mn.id,
                    format!(
                        "`{name}` declares shape {:?} ({numel} floats at byte {start}) but the blob holds {} floats",
                        entry.shape,
                        blob.len() / 4
                    ),
                ));
            }
            let bytes = &blob[start..end];
            let actual = crc32fast::hash(bytes);
            if actual != entry.crc32 {
                return Err(Error::Checksum {
                    node: mn.id.clone(),
                    param: name,
                    expected: entry.crc32,
                    actual,
                });
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            node.params.insert(name, Tensor::new(entry.shape, data)?);
        }
        if nodes.insert(mn.id.clone(), node).is_some() {
            return Err(Error::node(&mn.id, "duplicate node id"));
        }
    }

    let m = ModelGraph {
        name: manifest.name,
        input_shape: manifest.input_shape,
        num_classes: manifest.num_classes,
        nodes,
        edges: manifest.edges,
    };
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvAttrs;
    use crate::zoo;

    fn minimal() -> ModelGraph {
        zoo::single_conv(0)
    }

    #[test]
    fn minimal_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let w: Vec<f32> = (0..18).map(|i| i as f32 * 0.1).collect();
        let bytes = to_le_bytes(&w);
        fs::write(dir.path().join(WEIGHTS_FILE), &bytes).unwrap();
        let manifest = serde_json::json!({
            "format": FORMAT, "version": 1, "name": "tiny",
            "input_shape": [1, 5, 5], "num_classes": 2,
            "weights": {"file": WEIGHTS_FILE, "bytes": 72},
            "nodes": [
                {"id": "input", "kind": "input"},
                {"id": "conv", "kind": "conv2d",
                 "attrs": {"in_channels": 1, "out_channels": 2, "kernel": 3, "stride": 1, "padding": 0},
                 "params": {"weight": {"shape": [2, 1, 3, 3], "offset": 0, "crc32": crc32fast::hash(&bytes)}}},
                {"id": "output", "kind": "output"}
            ],
            "edges": [{"src": "input", "dst": "conv", "slot": 0}, {"src": "conv", "dst": "output"}]
        });
        fs::write(dir.path().join(MANIFEST_FILE), manifest.to_string()).unwrap();
        let m = load_model(dir.path()).unwrap();
        assert_eq!(m.nodes.len(), 3);
        assert_eq!(m.param_count(), 18);
        assert_eq!(
            m.node("conv").unwrap().kind,
            LayerKind::Conv2d(ConvAttrs {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 0
            })
        );
    }

    #[test]
    fn short_blob_names_the_node() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&minimal(), dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let mut v: Value = serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
        // 17 floats instead of the 18 the conv weight needs.
        let blob = vec![0u8; 17 * 4];
        fs::write(dir.path().join(WEIGHTS_FILE), &blob).unwrap();
        v["weights"]["bytes"] = Value::from(blob.len());
        fs::write(&mpath, v.to_string()).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        assert!(matches!(&err, Error::Shape { node, .. } if node == "conv"), "{err}");
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for m in zoo::corpus(3) {
            let a = tempfile::tempdir().unwrap();
            let b = tempfile::tempdir().unwrap();
            save_model(&m, a.path()).unwrap();
            let loaded = load_model(a.path()).unwrap();
            assert_eq!(loaded, m, "{}", m.name);
            save_model(&loaded, b.path()).unwrap();
            let wa = fs::read(a.path().join(WEIGHTS_FILE)).unwrap();
            let wb = fs::read(b.path().join(WEIGHTS_FILE)).unwrap();
            assert_eq!(wa, wb);
        }
    }

    #[test]
    fn flipped_float_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&zoo::chain_cnn(1), dir.path()).unwrap();
        let wpath = dir.path().join(WEIGHTS_FILE);
        let mut blob = fs::read(&wpath).unwrap();
        blob[40] ^= 0x01;
        fs::write(&wpath, blob).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Checksum { .. })));
    }

    #[test]
    fn unknown_kind_is_an_error_naming_the_node() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&minimal(), dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).unwrap().replace("\"conv2d\"", "\"attention\"");
        fs::write(&mpath, text).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        assert!(matches!(&err, Error::Node { node, .. } if node == "conv"), "{err}");
    }

    #[test]
    fn save_into_unwritable_location_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("not_a_dir");
        fs::write(&file, b"x").unwrap();
        let err = save_model(&minimal(), file.join("model")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
