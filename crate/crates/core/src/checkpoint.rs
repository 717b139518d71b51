//! Parameter checkpoints: a JSON manifest listing each tensor plus one
//! little-endian `f32` file per tensor.

use std::path::Path;

use gradcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::nn::ParamSet;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub tensor_name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

/// Writes every tensor of `params` into `dir` and returns the manifest
/// entries. Values are stored as `f32`.
pub fn write_tensors(dir: &Path, params: &ParamSet) -> Result<Vec<TensorEntry>> {
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let file = format!("{name}.bin");
        fsutil::write_atomic(&dir.join(&file), &fsutil::f64_as_f32_bytes(t.data()))?;
        entries.push(TensorEntry {
            tensor_name: name.clone(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    Ok(entries)
}

/// Fills `params` (built with the expected architecture) from `entries`.
pub fn read_tensors(dir: &Path, entries: &[TensorEntry], params: &mut ParamSet) -> Result<()> {
    if entries.len() != params.len() {
        return Err(Error::format(
            "tensors",
            format!("expected {} tensors, manifest lists {}", params.len(), entries.len()),
        ));
    }
    for e in entries {
        let expected = params
            .get(&e.tensor_name)
            .ok_or_else(|| Error::format(&e.tensor_name, "unexpected tensor name"))?;
        if expected.shape() != e.shape.as_slice() {
            return Err(Error::format(
                &e.tensor_name,
                format!("shape {:?} does not match architecture {:?}", e.shape, expected.shape()),
            ));
        }
        let path = dir.join(&e.file);
        if !path.exists() {
            return Err(Error::format(&e.tensor_name, format!("missing tensor file {}", e.file)));
        }
        let numel = e.shape.iter().product();
        let values = fsutil::bytes_to_f32(&fsutil::read(&path)?, numel, &e.file)?;
        let t = Tensor::new(e.shape.clone(), values.into_iter().map(f64::from).collect())?;
        params.set(&e.tensor_name, t)?;
    }
    Ok(())
}

pub fn check_version(v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::format(
            "format_version",
            format!("unsupported version {v} (expected {FORMAT_VERSION})"),
        ));
    }
    Ok(())
}
