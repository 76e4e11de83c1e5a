//! Model checkpoints as safetensors files.
//!
//! Tensors are stored under their parameter names in the model's dtype.
//! The header carries a single metadata entry, `sonartrack`, whose value is
//! a JSON [`Header`] with the format name, version and model config (one
//! entry keeps the header byte-stable across runs).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use safetensors::tensor::{Dtype as StDtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const FORMAT: &str = "sonartrack-checkpoint";
pub const VERSION: u32 = 1;
const META_KEY: &str = "sonartrack";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub step: u64,
}

fn st_dtype(dtype: DType) -> Result<StDtype> {
    match dtype {
        DType::F32 => Ok(StDtype::F32),
        DType::F64 => Ok(StDtype::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

pub fn save(model: &Model, path: &Path, step: u64) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        model: model.cfg.clone(),
        step,
    };
    let mut buffers = Vec::with_capacity(model.store.len());
    for (name, var) in model.store.iter() {
        let t = var.as_tensor();
        buffers.push((name.to_string(), st_dtype(t.dtype())?, t.dims().to_vec(), tensor_bytes(t)?));
    }
    let views = buffers
        .iter()
        .map(|(n, d, s, b)| {
            TensorView::new(*d, s.clone(), b)
                .map(|v| (n.as_str(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&header)?)]);
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(views, Some(meta), &tmp).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<Header> {
    let buf = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    header_of(&buf)
}

fn header_of(buf: &[u8]) -> Result<Header> {
    let (_, meta) = SafeTensors::read_metadata(buf).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let text = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("missing {META_KEY} header; not a {FORMAT} file")))?;
    let header: Header = serde_json::from_str(text)?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{} (expected {FORMAT} v{VERSION})",
            header.format, header.version
        )));
    }
    Ok(header)
}

/// Lists the dotted config keys whose values differ.
pub fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    fn walk(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        match (a, b) {
            (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) => {
                for (k, va) in ma {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    match mb.get(k) {
                        Some(vb) => walk(&key, va, vb, out),
                        None => out.push(key),
                    }
                }
            }
            _ if a != b => out.push(format!("{prefix} ({a} vs {b})")),
            _ => {}
        }
    }
    let mut out = Vec::new();
    let va = serde_json::to_value(a).expect("config serializes");
    let vb = serde_json::to_value(b).expect("config serializes");
    walk("model", &va, &vb, &mut out);
    out
}

/// Builds a model from the checkpoint's own config and loads every tensor.
pub fn load(path: &Path, dtype: DType, device: &candle_core::Device) -> Result<(Model, Header)> {
    let header = read_header(path)?;
    let model = Model::new(&header.model, 0, dtype, device)?;
    load_into(&model, path, None)?;
    Ok((model, header))
}

/// Copies tensors into `model`. With `namespaces`, only parameters whose
/// names start with one of the prefixes are read; everything else keeps its
/// current value. Shapes must match exactly.
pub fn load_into(model: &Model, path: &Path, namespaces: Option<&[&str]>) -> Result<Header> {
    let buf = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let header = header_of(&buf)?;
    if namespaces.is_none() {
        let diff = config_diff(&model.cfg, &header.model);
        if !diff.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint config differs from model config: {}",
                diff.join(", ")
            )));
        }
    }
    let st = SafeTensors::deserialize(&buf).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let wanted = |name: &str| namespaces.is_none_or(|ns| ns.iter().any(|p| name.starts_with(p)));
    let mut loaded = 0;
    for (name, var) in model.store.iter().filter(|(n, _)| wanted(n)) {
        let view = st
            .tensor(name)
            .map_err(|_| Error::Checkpoint(format!("parameter {name} missing from checkpoint")))?;
        if view.shape() != var.as_tensor().dims() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                view.shape(),
                var.as_tensor().dims()
            )));
        }
        let t = view_to_tensor(&view, model.device())?.to_dtype(model.dtype())?;
        model.store.assign(name, &t)?;
        loaded += 1;
    }
    if loaded == 0 {
        return Err(Error::Checkpoint("no parameters matched the requested namespaces".into()));
    }
    Ok(header)
}

fn view_to_tensor(view: &TensorView, device: &candle_core::Device) -> Result<Tensor> {
    let data = view.data();
    let shape = view.shape().to_vec();
    Ok(match view.dtype() {
        StDtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, device)?
        }
        StDtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, device)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported stored dtype {other:?}"))),
    })
}
