//! Config-driven experiment runner behind the `ibts` binary.
//!
//! Every fold seed gets its own directory under the configured output:
//!
//! ```text
//! out/
//!   seed-<s>/data/ classifier/ explainer/ explanations/
//!   seed-<s>/classifier_history.csv explainer_history.csv ...
//!   evaluation.json saliency.csv occlusion.csv substitution.csv
//!   diagnose.json diagnose.csv
//! ```

mod commands;
mod report;

pub use commands::{
    cmd_diagnose, cmd_evaluate, cmd_gen_data, cmd_train_classifier, cmd_train_explainer, gen_data_single, DataSummary,
    ExplainerRunReport,
};
pub use report::{
    aggregate, Aggregate, DiagnoseReport, EvaluationReport, FamilyShift, OcclusionRow, SeedDiagnosis, SeedEvaluation,
    SubstitutionRow,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::classifier::ClassifierConfig;
use crate::datagen::{gen_signaling, generate, load_dataset, Dataset, GeneratorConfig, Kind};
use crate::error::{Error, Result};
use crate::explainer::ExplainerConfig;
use crate::metrics::{Substitution, DEFAULT_THRESHOLDS};

pub const SEED_ENV: &str = "IBTS_SEED";

/// Where the data of each fold comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Generator settings; omitted fields take the defaults of `kind`, and
    /// the seed always follows the fold seed.
    Generate(Map<String, Value>),
    Signaling(SignalingConfig),
    /// A dataset directory shared by every fold.
    Dir(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalingConfig {
    pub n_index: usize,
    pub t: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for SignalingConfig {
    fn default() -> Self {
        SignalingConfig {
            n_index: 7,
            t: 20,
            n_train: 500,
            n_val: 100,
            n_test: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassifierSource {
    Train(ClassifierConfig),
    /// A frozen checkpoint shared by every fold.
    Checkpoint(PathBuf),
}

impl Default for ClassifierSource {
    fn default() -> Self {
        ClassifierSource::Train(ClassifierConfig::default())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMetric {
    Saliency,
    Occlusion,
    Substitution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metrics: Vec<EvalMetric>,
    /// Occlusion percentiles; `k = 0` is always evaluated as the reference.
    pub k_list: Vec<f64>,
    pub substitution: Vec<Substitution>,
    pub substitution_frac: f64,
    pub n_thresholds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metrics: vec![EvalMetric::Saliency, EvalMetric::Occlusion, EvalMetric::Substitution],
            k_list: vec![25.0, 50.0, 75.0, 90.0],
            substitution: vec![Substitution::Mean, Substitution::Zero],
            substitution_frac: 0.1,
            n_thresholds: DEFAULT_THRESHOLDS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub classifier: ClassifierSource,
    #[serde(default)]
    pub explainer: ExplainerConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        ExperimentConfig::from_json(&text)
    }

    /// Applies overrides in increasing precedence: `IBTS_SEED` (its raw
    /// value, if set), then `--seed`, then `--out`.
    pub fn with_overrides(mut self, env_seed: Option<&str>, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        if let Some(raw) = env_seed {
            let s = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}='{raw}' is not an unsigned integer")))?;
            self.seeds = vec![s];
        }
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        if let Some(o) = out {
            self.out = o;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        match &self.dataset {
            DatasetSource::Generate(_) => {
                self.generator_config(0)?;
            }
            DatasetSource::Signaling(s) => {
                if s.n_index == 0 || s.n_index > s.t {
                    return Err(Error::Config(format!("signal index {} outside 1..={}", s.n_index, s.t)));
                }
            }
            DatasetSource::Dir(p) => require_path(p, "dataset.dir")?,
        }
        if let ClassifierSource::Checkpoint(p) = &self.classifier {
            require_path(p, "classifier.checkpoint")?;
        }
        self.explainer.validate()?;
        let ev = &self.eval;
        if let Some(k) = ev.k_list.iter().find(|k| !(0.0..100.0).contains(*k)) {
            return Err(Error::Config(format!("occlusion percentile {k} outside [0, 100)")));
        }
        if !(ev.substitution_frac > 0.0 && ev.substitution_frac < 1.0) {
            return Err(Error::Config(format!(
                "substitution_frac {} outside (0, 1)",
                ev.substitution_frac
            )));
        }
        if ev.n_thresholds == 0 {
            return Err(Error::Config("n_thresholds must be positive".into()));
        }
        Ok(())
    }

    /// Generator settings for one fold.
    pub fn generator_config(&self, seed: u64) -> Result<GeneratorConfig> {
        let DatasetSource::Generate(block) = &self.dataset else {
            return Err(Error::Config("dataset is not generated".into()));
        };
        let kind = block
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Config("dataset.generate needs a \"kind\"".into()))?;
        let kind = Kind::parse(kind)?;
        let mut merged = match serde_json::to_value(GeneratorConfig::new(kind, seed))? {
            Value::Object(m) => m,
            _ => unreachable!("generator config serialises to an object"),
        };
        for (k, v) in block {
            if k != "kind" && k != "seed" {
                merged.insert(k.clone(), v.clone());
            }
        }
        serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(format!("dataset.generate: {e}")))
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out.join(format!("seed-{seed}"))
    }

    /// Builds the dataset of one fold in memory.
    pub fn build_dataset(&self, seed: u64) -> Result<Dataset> {
        match &self.dataset {
            DatasetSource::Generate(_) => generate(&self.generator_config(seed)?),
            DatasetSource::Signaling(s) => gen_signaling(s.n_index, s.t, s.n_train, s.n_val, s.n_test, seed),
            DatasetSource::Dir(p) => load_dataset(p),
        }
    }
}

fn require_path(p: &Path, field: &str) -> Result<()> {
    if !p.exists() {
        return Err(Error::Config(format!("{field}: {} does not exist", p.display())));
    }
    Ok(())
}
