use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifierConfig, ClassifierModel, Dims};
use crate::checkpoint::{check_version, read_tensors, write_tensors, TensorEntry, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    format_version: u32,
    frozen: bool,
    dims: Dims,
    config: ClassifierConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_model(model: &ClassifierModel, dir: &Path) -> Result<()> {
    fsutil::write_dir_atomic(dir, |tmp| {
        let tensors = write_tensors(tmp, model.params())?;
        let manifest = ModelManifest {
            format_version: FORMAT_VERSION,
            frozen: model.is_frozen(),
            dims: model.dims(),
            config: model.config().clone(),
            tensors,
        };
        fsutil::write_atomic(&tmp.join("model.json"), &serde_json::to_vec_pretty(&manifest)?)
    })
}

pub fn load_model(dir: &Path) -> Result<ClassifierModel> {
    let raw = fsutil::read(&dir.join("model.json"))?;
    let m: ModelManifest = serde_json::from_slice(&raw).map_err(|e| Error::format("model.json", e.to_string()))?;
    check_version(m.format_version)?;
    let mut model = ClassifierModel::new(m.config, m.dims)?;
    read_tensors(dir, &m.tensors, model.params_mut())?;
    model.set_frozen(m.frozen);
    Ok(model)
}
