//! File access for tensors, weights and datasets.
//!
//! A dataset is a stem `name` with two files: `name.csib` (the normalized
//! `(n, 2, N_c', N_t)` tensor) and `name.meta` (key=value sidecar).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use csinet_core::channel::{Dataset, DatasetMeta};
use csinet_core::codec::{decode_tensor, encode_tensor, StoredTensor};
use csinet_core::models::{decode_weights, decode_weights_spec, encode_weights, ModelGraph, ModelSpec};
use csinet_core::{Scalar, Tensor4};

pub fn read_tensor(path: &Path) -> Result<StoredTensor> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_tensor(&bytes).with_context(|| format!("decoding {}", path.display()))
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor4<T>) -> Result<()> {
    create_parent(path)?;
    fs::write(path, encode_tensor(t)).with_context(|| format!("writing {}", path.display()))
}

/// Reads a weights file and checks it against `expected` when given;
/// otherwise the spec stored in the file is used.
pub fn read_weights(path: &Path, expected: Option<&ModelSpec>) -> Result<ModelGraph<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let spec = match expected {
        Some(s) => s.clone(),
        None => decode_weights_spec(&bytes).with_context(|| format!("decoding {}", path.display()))?,
    };
    decode_weights(&bytes, &spec).with_context(|| format!("decoding {}", path.display()))
}

pub fn write_weights<T: Scalar>(path: &Path, model: &ModelGraph<T>) -> Result<()> {
    create_parent(path)?;
    fs::write(path, encode_weights(model)).with_context(|| format!("writing {}", path.display()))
}

/// `(tensor, sidecar)` paths of a dataset stem. A trailing `.csib` or
/// `.meta` on the stem is dropped.
pub fn dataset_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let base = match stem.extension().and_then(|e| e.to_str()) {
        Some("csib") | Some("meta") => stem.with_extension(""),
        _ => stem.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = base.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".csib"), with(".meta"))
}

pub fn write_dataset(stem: &Path, data: &Dataset) -> Result<()> {
    data.meta.check_tensor(&data.x)?;
    let (tensor, meta) = dataset_paths(stem);
    write_tensor(&tensor, &data.x)?;
    fs::write(&meta, data.meta.to_text()).with_context(|| format!("writing {}", meta.display()))
}

/// Reads a dataset; the sidecar must exist and agree with the tensor.
pub fn read_dataset(stem: &Path) -> Result<Dataset> {
    let (tensor, meta) = dataset_paths(stem);
    if !meta.is_file() {
        bail!(csinet_core::Error::Format(format!("missing metadata sidecar {}", meta.display())));
    }
    let text = fs::read_to_string(&meta).with_context(|| format!("reading {}", meta.display()))?;
    let meta_parsed = DatasetMeta::parse(&text).with_context(|| format!("parsing {}", meta.display()))?;
    let x = match read_tensor(&tensor)? {
        StoredTensor::F32(t) => t,
        StoredTensor::F64(t) => t.cast(),
    };
    meta_parsed.check_tensor(&x).with_context(|| format!("{} disagrees with {}", tensor.display(), meta.display()))?;
    Ok(Dataset { x, meta: meta_parsed })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}
