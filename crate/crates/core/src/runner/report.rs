//! Report types written by `evaluate` and `diagnose`, and their aggregation
//! over seeds.

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::classifier::TestScores;
use crate::metrics::{DistShiftReport, PerturbedScore, SaliencyReport, Substitution};

/// Mean and population standard deviation over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    if values.is_empty() {
        return Aggregate {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Aggregate { mean, std: var.sqrt() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionRow {
    pub k: f64,
    pub explainer: PerturbedScore,
    pub random: PerturbedScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionRow {
    pub mode: Substitution,
    pub frac: f64,
    pub explainer: PerturbedScore,
    pub random: PerturbedScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedEvaluation {
    pub dataset: String,
    pub seed: u64,
    /// The classifier on the untouched test split.
    pub clean: TestScores,
    pub saliency: Option<SaliencyReport>,
    pub occlusion: Vec<OcclusionRow>,
    pub substitution: Vec<SubstitutionRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyAggregate {
    pub auprc: Aggregate,
    pub aup: Aggregate,
    pub aur: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionAggregate {
    pub k: f64,
    pub explainer_auroc: Aggregate,
    pub random_auroc: Aggregate,
    pub explainer_accuracy: Aggregate,
    pub random_accuracy: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionAggregate {
    pub mode: Substitution,
    pub explainer_accuracy: Aggregate,
    pub random_accuracy: Aggregate,
    pub explainer_auroc: Aggregate,
    pub random_auroc: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedEvaluation>,
    pub saliency: Option<SaliencyAggregate>,
    pub occlusion: Vec<OcclusionAggregate>,
    pub substitution: Vec<SubstitutionAggregate>,
}

impl EvaluationReport {
    pub fn build(config: ExperimentConfig, per_seed: Vec<SeedEvaluation>) -> Self {
        let col = |f: &dyn Fn(&SeedEvaluation) -> Option<f64>| -> Vec<f64> { per_seed.iter().filter_map(f).collect() };
        let saliency = per_seed
            .iter()
            .all(|s| s.saliency.is_some())
            .then(|| SaliencyAggregate {
                auprc: aggregate(&col(&|s| s.saliency.map(|r| r.auprc))),
                aup: aggregate(&col(&|s| s.saliency.map(|r| r.aup))),
                aur: aggregate(&col(&|s| s.saliency.map(|r| r.aur))),
            });
        let first = per_seed.first();
        let occlusion = first
            .map(|s| s.occlusion.iter().map(|r| r.k).collect::<Vec<_>>())
            .unwrap_or_default()
            .into_iter()
            .enumerate()
            .map(|(i, k)| {
                let pick = |g: &dyn Fn(&OcclusionRow) -> f64| col(&|s| s.occlusion.get(i).map(g));
                OcclusionAggregate {
                    k,
                    explainer_auroc: aggregate(&pick(&|r| r.explainer.auroc)),
                    random_auroc: aggregate(&pick(&|r| r.random.auroc)),
                    explainer_accuracy: aggregate(&pick(&|r| r.explainer.accuracy)),
                    random_accuracy: aggregate(&pick(&|r| r.random.accuracy)),
                }
            })
            .collect();
        let substitution = first
            .map(|s| s.substitution.iter().map(|r| r.mode).collect::<Vec<_>>())
            .unwrap_or_default()
            .into_iter()
            .enumerate()
            .map(|(i, mode)| {
                let pick = |g: &dyn Fn(&SubstitutionRow) -> f64| col(&|s| s.substitution.get(i).map(g));
                SubstitutionAggregate {
                    mode,
                    explainer_accuracy: aggregate(&pick(&|r| r.explainer.accuracy)),
                    random_accuracy: aggregate(&pick(&|r| r.random.accuracy)),
                    explainer_auroc: aggregate(&pick(&|r| r.explainer.auroc)),
                    random_auroc: aggregate(&pick(&|r| r.random.auroc)),
                }
            })
            .collect();
        EvaluationReport {
            seeds: per_seed.iter().map(|s| s.seed).collect(),
            config,
            per_seed,
            saliency,
            occlusion,
            substitution,
        }
    }
}

/// One instance family scored against the original test instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyShift {
    pub family: String,
    #[serde(flatten)]
    pub shift: DistShiftReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedDiagnosis {
    pub dataset: String,
    pub seed: u64,
    pub families: Vec<FamilyShift>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyAggregate {
    pub family: String,
    pub kde_loglik: Aggregate,
    pub kl_div: Aggregate,
    pub mmd: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedDiagnosis>,
    pub families: Vec<FamilyAggregate>,
}

impl DiagnoseReport {
    pub fn build(config: ExperimentConfig, per_seed: Vec<SeedDiagnosis>) -> Self {
        let names: Vec<String> = per_seed
            .first()
            .map(|s| s.families.iter().map(|f| f.family.clone()).collect())
            .unwrap_or_default();
        let families = names
            .into_iter()
            .enumerate()
            .map(|(i, family)| {
                let pick = |g: fn(&DistShiftReport) -> f64| -> Vec<f64> {
                    per_seed.iter().map(|s| g(&s.families[i].shift)).collect()
                };
                FamilyAggregate {
                    family,
                    kde_loglik: aggregate(&pick(|r| r.kde_loglik)),
                    kl_div: aggregate(&pick(|r| r.kl_div)),
                    mmd: aggregate(&pick(|r| r.mmd)),
                }
            })
            .collect();
        DiagnoseReport {
            seeds: per_seed.iter().map(|s| s.seed).collect(),
            config,
            per_seed,
            families,
        }
    }

    pub fn family(&self, name: &str) -> Option<&FamilyAggregate> {
        self.families.iter().find(|f| f.family == name)
    }
}

#[cfg(test)]
mod tests {
    use super::aggregate;

    #[test]
    fn population_std() {
        let a = aggregate(&[0.8, 0.9]);
        assert!((a.mean - 0.85).abs() < 1e-12);
        assert!((a.std - 0.05).abs() < 1e-12);
        assert_eq!(aggregate(&[0.3]).std, 0.0);
    }
}
