use std::path::Path;

use gradcore::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BaselineDistribution, Explainer, ExplainerConfig};
use crate::checkpoint::{check_version, read_tensors, write_tensors, TensorEntry, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Serialize, Deserialize)]
struct ExplainerManifest {
    format_version: u32,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "D")]
    d: usize,
    config: ExplainerConfig,
    tensors: Vec<TensorEntry>,
    baseline_mu: String,
    baseline_sigma: String,
}

pub fn save_explainer(expl: &Explainer, dir: &Path) -> Result<()> {
    fsutil::write_dir_atomic(dir, |tmp| {
        let tensors = write_tensors(tmp, expl.params())?;
        let b = expl.baseline();
        fsutil::write_atomic(&tmp.join("mu.bin"), &fsutil::f64_as_f32_bytes(&b.mu))?;
        fsutil::write_atomic(&tmp.join("sigma.bin"), &fsutil::f64_as_f32_bytes(&b.sigma))?;
        let (t, d) = expl.dims();
        let manifest = ExplainerManifest {
            format_version: FORMAT_VERSION,
            t,
            d,
            config: expl.config().clone(),
            tensors,
            baseline_mu: "mu.bin".into(),
            baseline_sigma: "sigma.bin".into(),
        };
        fsutil::write_atomic(&tmp.join("explainer.json"), &serde_json::to_vec_pretty(&manifest)?)
    })
}

pub fn load_explainer(dir: &Path) -> Result<Explainer> {
    let raw = fsutil::read(&dir.join("explainer.json"))?;
    let m: ExplainerManifest =
        serde_json::from_slice(&raw).map_err(|e| Error::format("explainer.json", e.to_string()))?;
    check_version(m.format_version)?;
    let cells = m.t * m.d;
    let read = |name: &str| -> Result<Vec<f64>> {
        let v = fsutil::bytes_to_f32(&fsutil::read(&dir.join(name))?, cells, name)?;
        Ok(v.into_iter().map(f64::from).collect())
    };
    let baseline = BaselineDistribution {
        t: m.t,
        d: m.d,
        mu: read(&m.baseline_mu)?,
        sigma: read(&m.baseline_sigma)?,
    };
    if baseline.sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::format(&m.baseline_sigma, "standard deviations must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(m.config.seed);
    let mut expl = Explainer::new(m.config, baseline, &mut rng)?;
    read_tensors(dir, &m.tensors, expl.params_mut())?;
    Ok(expl)
}

#[derive(Serialize, Deserialize)]
struct ExplanationsManifest {
    format_version: u32,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "D")]
    d: usize,
    dtype: String,
    byte_order: String,
    /// Dataset instance behind each row.
    indices: Vec<usize>,
}

/// Writes `pi` (shape `(N, T, D)`) as `explanations.bin` with a manifest.
pub fn save_explanations(pi: &Tensor, indices: &[usize], dir: &Path) -> Result<()> {
    let s = pi.shape();
    if s.len() != 3 || s[0] != indices.len() {
        return Err(Error::format(
            "explanations",
            "pi must be (N, T, D) with one index per row",
        ));
    }
    let manifest = ExplanationsManifest {
        format_version: FORMAT_VERSION,
        n: s[0],
        t: s[1],
        d: s[2],
        dtype: "f32".into(),
        byte_order: "little".into(),
        indices: indices.to_vec(),
    };
    fsutil::write_dir_atomic(dir, |tmp| {
        fsutil::write_atomic(&tmp.join("explanations.bin"), &fsutil::f64_as_f32_bytes(pi.data()))?;
        fsutil::write_atomic(&tmp.join("explanations.json"), &serde_json::to_vec_pretty(&manifest)?)
    })
}

pub fn load_explanations(dir: &Path) -> Result<(Tensor, Vec<usize>)> {
    let raw = fsutil::read(&dir.join("explanations.json"))?;
    let m: ExplanationsManifest =
        serde_json::from_slice(&raw).map_err(|e| Error::format("explanations.json", e.to_string()))?;
    check_version(m.format_version)?;
    if m.indices.len() != m.n {
        return Err(Error::format("indices", "length differs from N"));
    }
    let v = fsutil::bytes_to_f32(
        &fsutil::read(&dir.join("explanations.bin"))?,
        m.n * m.t * m.d,
        "explanations.bin",
    )?;
    let t = Tensor::new(
        vec![m.n.max(1), m.t, m.d],
        if m.n == 0 {
            vec![0.0; m.t * m.d]
        } else {
            v.into_iter().map(f64::from).collect()
        },
    )?;
    Ok((t, m.indices))
}
