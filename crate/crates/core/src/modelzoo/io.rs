//! Model persistence: `model.json` manifest plus `weights.bin` blob.
//!
//! The manifest lists layers in order with their hyperparameters and, per
//! parameter tensor, `{name, shape, offset, count}`; offsets and counts are
//! in elements. The blob is the little-endian f64 concatenation of all
//! parameter tensors in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{Layer, Network};

pub const MANIFEST_FILE: &str = "model.json";
pub const BLOB_FILE: &str = "weights.bin";
const FORMAT: &str = "dsg-model";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    input_shape: [usize; 3],
    classes: usize,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pad: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size: Option<usize>,
    #[serde(default)]
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

/// Writes `model.json` and `weights.bin` into `dir` (created if needed).
pub fn save_model<S: Scalar>(net: &Network<S>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut layers = Vec::with_capacity(net.layers().len());
    for layer in net.layers() {
        let (stride, pad, size) = match layer {
            Layer::Conv { stride, pad, .. } => (Some(*stride), Some(*pad), None),
            Layer::MaxPool { size, stride } => (Some(*stride), None, Some(*size)),
            _ => (None, None, None),
        };
        let params = layer
            .params()
            .into_iter()
            .map(|(name, t)| {
                for v in t.data() {
                    blob.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
                }
                let entry = ParamEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                    count: t.len(),
                };
                offset += t.len();
                entry
            })
            .collect();
        layers.push(LayerEntry {
            kind: layer.kind().to_string(),
            stride,
            pad,
            size,
            params,
        });
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: 1,
        input_shape: net.input_shape(),
        classes: net.classes(),
        layers,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(BLOB_FILE);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
}

/// Loads a model directory written by [`save_model`].
pub fn load_model<S: Scalar>(dir: &Path) -> Result<Network<S>> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: {e}", mpath.display())))?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(Error::format(format!(
            "{}: unsupported format {:?} v{}",
            mpath.display(),
            manifest.format,
            manifest.version
        )));
    }
    let bpath = dir.join(BLOB_FILE);
    let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format(format!(
            "{}: length {} is not a multiple of 8",
            bpath.display(),
            bytes.len()
        )));
    }
    let blob: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let expected: usize = manifest
        .layers
        .iter()
        .flat_map(|l| &l.params)
        .map(|p| p.count)
        .sum();
    if expected != blob.len() {
        return Err(Error::format(format!(
            "manifest describes {expected} elements, blob holds {}",
            blob.len()
        )));
    }
    let layers = manifest
        .layers
        .iter()
        .enumerate()
        .map(|(i, entry)| build_layer(i, entry, &blob))
        .collect::<Result<Vec<_>>>()?;
    Network::new(layers, manifest.input_shape, manifest.classes)
        .map_err(|e| Error::format(format!("{}: {e}", mpath.display())))
}

fn build_layer<S: Scalar>(i: usize, e: &LayerEntry, blob: &[f64]) -> Result<Layer<S>> {
    let param = |name: &str| -> Result<Tensor<S>> {
        let p = e
            .params
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::format(format!("layer {i} ({}): missing tensor {name:?}", e.kind)))?;
        if p.shape.iter().product::<usize>() != p.count {
            return Err(Error::format(format!(
                "layer {i}: tensor {name:?} shape {:?} disagrees with count {}",
                p.shape, p.count
            )));
        }
        let end = p.offset.checked_add(p.count).filter(|&end| end <= blob.len());
        let Some(end) = end else {
            return Err(Error::format(format!(
                "layer {i}: tensor {name:?} range {}+{} exceeds blob of {}",
                p.offset,
                p.count,
                blob.len()
            )));
        };
        Tensor::new(p.shape.clone(), blob[p.offset..end].iter().map(|&v| S::of(v)).collect())
            .map_err(|err| Error::format(format!("layer {i}: tensor {name:?}: {err}")))
    };
    let hyper = |v: Option<usize>, what: &str| {
        v.ok_or_else(|| Error::format(format!("layer {i} ({}): missing {what}", e.kind)))
    };
    let layer = match e.kind.as_str() {
        "conv" => Layer::Conv {
            weight: param("weight")?,
            bias: param("bias")?,
            stride: hyper(e.stride, "stride")?,
            pad: hyper(e.pad, "pad")?,
        },
        "batchnorm" => Layer::BatchNorm {
            gamma: param("gamma")?,
            beta: param("beta")?,
            running_mean: param("running_mean")?,
            running_var: param("running_var")?,
        },
        "relu" => Layer::Relu,
        "maxpool" => Layer::MaxPool {
            size: hyper(e.size, "size")?,
            stride: hyper(e.stride, "stride")?,
        },
        "global_avgpool" => Layer::GlobalAvgPool,
        "dense" => Layer::Dense {
            weight: param("weight")?,
            bias: param("bias")?,
        },
        "residual_begin" => Layer::ResidualBegin,
        "residual_add" => Layer::ResidualAdd,
        other => return Err(Error::format(format!("layer {i}: unknown kind {other:?}"))),
    };
    Ok(layer)
}
