use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::fsutil;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub name: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub has_truth: bool,
    pub byte_order: String,
    pub dtype: BTreeMap<String, String>,
    pub splits: Splits,
}

fn dtypes() -> BTreeMap<String, String> {
    [("X", "f32"), ("Y", "i32"), ("Q", "u8")]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Writes `manifest.json`, `X.bin`, `Y.bin` and (with ground truth) `Q.bin`.
/// Labels are written one-based.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        name: ds.name.clone(),
        n: ds.n,
        t: ds.t,
        d: ds.d,
        c: ds.c,
        has_truth: ds.q.is_some(),
        byte_order: "little".into(),
        dtype: dtypes(),
        splits: ds.splits.clone(),
    };
    fsutil::write_dir_atomic(dir, |tmp| {
        fsutil::write_atomic(&tmp.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
        fsutil::write_atomic(&tmp.join("X.bin"), &fsutil::f32_to_bytes(&ds.x))?;
        let y: Vec<u8> = ds.y.iter().flat_map(|&l| (l as i32 + 1).to_le_bytes()).collect();
        fsutil::write_atomic(&tmp.join("Y.bin"), &y)?;
        if let Some(q) = &ds.q {
            fsutil::write_atomic(&tmp.join("Q.bin"), q)?;
        }
        Ok(())
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let raw = fsutil::read(&dir.join("manifest.json"))?;
    let m: Manifest = serde_json::from_slice(&raw).map_err(|e| Error::format("manifest.json", e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::format(
            "format_version",
            format!("unsupported version {} (expected {FORMAT_VERSION})", m.format_version),
        ));
    }
    if m.byte_order != "little" {
        return Err(Error::format("byte_order", format!("unsupported '{}'", m.byte_order)));
    }
    for (k, v) in dtypes() {
        if m.dtype.get(&k) != Some(&v) {
            return Err(Error::format(format!("dtype.{k}"), format!("expected {v}")));
        }
    }
    let cells = m.n * m.t * m.d;
    let x = fsutil::bytes_to_f32(&fsutil::read(&dir.join("X.bin"))?, cells, "X.bin")?;
    let y_raw = fsutil::bytes_to_i32(&fsutil::read(&dir.join("Y.bin"))?, m.n, "Y.bin")?;
    let mut y = Vec::with_capacity(m.n);
    for v in y_raw {
        if v < 1 || v as usize > m.c {
            return Err(Error::format("Y.bin", format!("label {v} outside 1..={}", m.c)));
        }
        y.push(v as usize - 1);
    }
    let q = if m.has_truth {
        let bytes = fsutil::read(&dir.join("Q.bin"))?;
        fsutil::check_len(&bytes, cells, "Q.bin")?;
        Some(bytes)
    } else {
        None
    };
    let ds = Dataset {
        name: m.name,
        n: m.n,
        t: m.t,
        d: m.d,
        c: m.c,
        x,
        y,
        q,
        splits: m.splits,
    };
    ds.validate()?;
    Ok(ds)
}
