use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::{
    DiagnoseReport, EvaluationReport, FamilyShift, OcclusionRow, SeedDiagnosis, SeedEvaluation, SubstitutionRow,
};
use super::{ClassifierSource, DatasetSource, EvalMetric, ExperimentConfig};
use crate::classifier::{evaluate, load_model, save_model, train_classifier, ClassifierModel, TrainReport};
use crate::datagen::{gen_signaling, generate, load_dataset, save_dataset, Dataset, GeneratorConfig, Kind};
use crate::error::{Error, Result};
use crate::explainer::{
    load_explainer, make_reference, save_explainer, save_explanations, train_explainer, Explainer, LossBreakdown,
};
use crate::fsutil::write_atomic;
use crate::metrics::{
    kl_divergence_estimate, mmd_rbf, occlusion_curve, random_scores, saliency_report, top_substitution,
    DistShiftReport, Kde, KDE_COMPONENTS,
};

// Stream offsets so that evaluation draws never coincide with training draws.
const OCCLUSION_STREAM: u64 = 0x0cc1_u64 << 32;
const RANDOM_SCORE_STREAM: u64 = 0x7a4d_u64 << 32;
const DIAGNOSE_STREAM: u64 = 0xd1a6_u64 << 32;

/// What `gen-data` prints for each dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub name: String,
    pub seed: u64,
    pub path: PathBuf,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub salient_fraction: Option<f64>,
}

impl DataSummary {
    fn new(ds: &Dataset, seed: u64, path: &Path) -> Self {
        DataSummary {
            name: ds.name.clone(),
            seed,
            path: path.to_path_buf(),
            n: ds.n,
            t: ds.t,
            d: ds.d,
            c: ds.c,
            salient_fraction: ds.salient_fraction(),
        }
    }
}

impl fmt::Display for DataSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} seed {}: N={} T={} D={} C={}",
            self.name, self.seed, self.n, self.t, self.d, self.c
        )?;
        match self.salient_fraction {
            Some(s) => write!(f, " salient fraction {s:.4}")?,
            None => write!(f, " (no ground truth)")?,
        }
        write!(f, " -> {}", self.path.display())
    }
}

/// Generates one benchmark with default settings into `out`. `kind` is a
/// generator kind or `signaling`.
pub fn gen_data_single(kind: &str, seed: u64, out: &Path) -> Result<DataSummary> {
    let ds = if kind.eq_ignore_ascii_case("signaling") {
        let s = super::SignalingConfig::default();
        gen_signaling(s.n_index, s.t, s.n_train, s.n_val, s.n_test, seed)?
    } else {
        generate(&GeneratorConfig::new(Kind::parse(kind)?, seed))?
    };
    save_dataset(&ds, out)?;
    Ok(DataSummary::new(&ds, seed, out))
}

fn data_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    match &cfg.dataset {
        DatasetSource::Dir(p) => p.clone(),
        _ => cfg.seed_dir(seed).join("data"),
    }
}

pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<Vec<DataSummary>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let dir = data_dir(cfg, seed);
        let ds = cfg.build_dataset(seed)?;
        if !matches!(cfg.dataset, DatasetSource::Dir(_)) {
            save_dataset(&ds, &dir)?;
        }
        out.push(DataSummary::new(&ds, seed, &dir));
    }
    Ok(out)
}

/// The fold's dataset, generated and stored on first use.
fn fold_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    let dir = data_dir(cfg, seed);
    if dir.join("manifest.json").exists() {
        return load_dataset(&dir);
    }
    let ds = cfg.build_dataset(seed)?;
    save_dataset(&ds, &dir)?;
    Ok(ds)
}

fn classifier_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    match &cfg.classifier {
        ClassifierSource::Checkpoint(p) => p.clone(),
        ClassifierSource::Train(_) => cfg.seed_dir(seed).join("classifier"),
    }
}

fn fold_classifier(cfg: &ExperimentConfig, seed: u64) -> Result<ClassifierModel> {
    let dir = classifier_dir(cfg, seed);
    if !dir.join("model.json").exists() {
        return Err(Error::Missing(format!(
            "no classifier checkpoint at {}; run train-classifier first",
            dir.display()
        )));
    }
    load_model(&dir)
}

fn fold_explainer(cfg: &ExperimentConfig, seed: u64) -> Result<Explainer> {
    let dir = cfg.seed_dir(seed).join("explainer");
    if !dir.join("explainer.json").exists() {
        return Err(Error::Missing(format!(
            "no explainer at {}; run train-explainer first",
            dir.display()
        )));
    }
    load_explainer(&dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    write_atomic(path, &bytes)
}

#[derive(Serialize)]
struct ClassifierHistoryRow {
    epoch: usize,
    loss: f64,
    val_f1: f64,
}

#[derive(Serialize)]
struct ClassifierRunReport<'a> {
    seed: u64,
    #[serde(flatten)]
    report: &'a TrainReport,
}

pub fn cmd_train_classifier(cfg: &ExperimentConfig) -> Result<Vec<(u64, TrainReport)>> {
    cfg.validate()?;
    let ClassifierSource::Train(ccfg) = &cfg.classifier else {
        return Err(Error::Config(
            "classifier is loaded from a checkpoint; nothing to train".into(),
        ));
    };
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let ds = fold_dataset(cfg, seed)?;
        let ccfg = crate::classifier::ClassifierConfig { seed, ..ccfg.clone() };
        ccfg.validate(ds.c)?;
        let (model, report) = train_classifier(&ccfg, &ds)?;
        let dir = cfg.seed_dir(seed);
        save_model(&model, &dir.join("classifier"))?;
        let rows: Vec<ClassifierHistoryRow> = report
            .history
            .iter()
            .map(|h| ClassifierHistoryRow {
                epoch: h.epoch,
                loss: h.loss,
                val_f1: h.val_f1,
            })
            .collect();
        write_csv(&dir.join("classifier_history.csv"), &rows)?;
        write_json(
            &dir.join("classifier_report.json"),
            &ClassifierRunReport { seed, report: &report },
        )?;
        out.push((seed, report));
    }
    Ok(out)
}

#[derive(Serialize)]
struct ExplainerHistoryRow {
    epoch: usize,
    #[serde(rename = "L_LC")]
    l_lc: f64,
    #[serde(rename = "L_M")]
    l_m: f64,
    #[serde(rename = "L_con")]
    l_con: f64,
    #[serde(rename = "L_KL")]
    l_kl: f64,
    #[serde(rename = "L_dr")]
    l_dr: f64,
    total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainerRunReport {
    pub seed: u64,
    pub history: Vec<LossBreakdown>,
    /// Classifier parameters were byte-identical before and after training,
    /// both in memory and on disk.
    pub classifier_unchanged: bool,
}

pub fn cmd_train_explainer(cfg: &ExperimentConfig) -> Result<Vec<ExplainerRunReport>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let ds = fold_dataset(cfg, seed)?;
        let f = fold_classifier(cfg, seed)?;
        if !f.is_frozen() {
            return Err(Error::NotFrozen);
        }
        let before = f.params().to_bytes();
        let ecfg = crate::explainer::ExplainerConfig {
            seed,
            ..cfg.explainer.clone()
        };
        let (expl, history) = train_explainer(&f, &ds, &ecfg)?;
        let on_disk = load_model(&classifier_dir(cfg, seed))?.params().to_bytes();
        let unchanged = f.params().to_bytes() == before && on_disk == before;
        if !unchanged {
            return Err(Error::Training(
                "classifier parameters changed during explainer training".into(),
            ));
        }
        let dir = cfg.seed_dir(seed);
        save_explainer(&expl, &dir.join("explainer"))?;
        let test = &ds.splits.test;
        if !test.is_empty() {
            let pi = expl.extract_probs(&ds.batch(test))?;
            save_explanations(&pi, test, &dir.join("explanations"))?;
        }
        let rows: Vec<ExplainerHistoryRow> = history
            .iter()
            .enumerate()
            .map(|(i, h)| ExplainerHistoryRow {
                epoch: i + 1,
                l_lc: h.l_lc,
                l_m: h.l_m,
                l_con: h.l_con,
                l_kl: h.l_kl,
                l_dr: h.l_dr,
                total: h.total,
            })
            .collect();
        write_csv(&dir.join("explainer_history.csv"), &rows)?;
        let report = ExplainerRunReport {
            seed,
            history,
            classifier_unchanged: unchanged,
        };
        write_json(&dir.join("explainer_report.json"), &report)?;
        out.push(report);
    }
    Ok(out)
}

fn require_test(ds: &Dataset) -> Result<&[usize]> {
    if ds.splits.test.is_empty() {
        return Err(Error::Dataset(format!("dataset '{}' has an empty test split", ds.name)));
    }
    Ok(&ds.splits.test)
}

fn evaluate_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedEvaluation> {
    let ds = fold_dataset(cfg, seed)?;
    let f = fold_classifier(cfg, seed)?;
    let expl = fold_explainer(cfg, seed)?;
    let test = require_test(&ds)?;
    let x = ds.batch(test);
    let labels = ds.labels(test);
    let scores = expl.extract_probs(&x)?;
    let ev = &cfg.eval;

    let saliency = if ev.metrics.contains(&EvalMetric::Saliency) {
        if ds.q.is_none() {
            return Err(Error::Metric(format!(
                "dataset '{}' has no ground-truth saliency; drop \"saliency\" from eval.metrics and use \
                 the occlusion or substitution metrics instead",
                ds.name
            )));
        }
        let truth: Vec<u8> = test
            .iter()
            .flat_map(|&i| ds.truth(i).unwrap_or_default().to_vec())
            .collect();
        Some(saliency_report(scores.data(), &truth, ev.n_thresholds)?)
    } else {
        None
    };

    let random = random_scores(x.shape(), &mut ChaCha8Rng::seed_from_u64(seed ^ RANDOM_SCORE_STREAM));
    let baseline = expl.baseline();
    let mut occlusion = Vec::new();
    if ev.metrics.contains(&EvalMetric::Occlusion) {
        let mut ks = vec![0.0];
        ks.extend(ev.k_list.iter().copied().filter(|&k| k != 0.0));
        // both score sets see the same baseline draws
        let occ_rng = ChaCha8Rng::seed_from_u64(seed ^ OCCLUSION_STREAM);
        let a = occlusion_curve(&f, &x, &labels, &scores, &ks, baseline, &mut occ_rng.clone())?;
        let b = occlusion_curve(&f, &x, &labels, &random, &ks, baseline, &mut occ_rng.clone())?;
        occlusion = a
            .iter()
            .zip(&b)
            .map(|(e, r)| OcclusionRow {
                k: e.k,
                explainer: crate::metrics::PerturbedScore {
                    auroc: e.auroc,
                    accuracy: e.accuracy,
                },
                random: crate::metrics::PerturbedScore {
                    auroc: r.auroc,
                    accuracy: r.accuracy,
                },
            })
            .collect();
    }
    let mut substitution = Vec::new();
    if ev.metrics.contains(&EvalMetric::Substitution) {
        for &mode in &ev.substitution {
            let frac = ev.substitution_frac;
            substitution.push(SubstitutionRow {
                mode,
                frac,
                explainer: top_substitution(&f, &x, &labels, &scores, frac, mode, baseline)?,
                random: top_substitution(&f, &x, &labels, &random, frac, mode, baseline)?,
            });
        }
    }
    Ok(SeedEvaluation {
        dataset: ds.name.clone(),
        seed,
        clean: evaluate(&f, &ds, test)?,
        saliency,
        occlusion,
        substitution,
    })
}

#[derive(Serialize)]
struct SaliencyCsvRow<'a> {
    dataset: &'a str,
    seed: u64,
    auprc: f64,
    aup: f64,
    aur: f64,
}

#[derive(Serialize)]
struct OcclusionCsvRow<'a> {
    dataset: &'a str,
    seed: u64,
    k: f64,
    explainer_auroc: f64,
    explainer_accuracy: f64,
    random_auroc: f64,
    random_accuracy: f64,
}

#[derive(Serialize)]
struct SubstitutionCsvRow<'a> {
    dataset: &'a str,
    seed: u64,
    mode: crate::metrics::Substitution,
    frac: f64,
    clean_accuracy: f64,
    explainer_accuracy: f64,
    random_accuracy: f64,
    clean_auroc: f64,
    explainer_auroc: f64,
    random_auroc: f64,
}

pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<EvaluationReport> {
    cfg.validate()?;
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let e = evaluate_seed(cfg, seed)?;
        write_json(&cfg.seed_dir(seed).join("evaluation.json"), &e)?;
        per_seed.push(e);
    }
    let report = EvaluationReport::build(cfg.clone(), per_seed);
    write_json(&cfg.out.join("evaluation.json"), &report)?;

    let per = &report.per_seed;
    if report.saliency.is_some() {
        let rows: Vec<SaliencyCsvRow> = per
            .iter()
            .filter_map(|s| {
                s.saliency.map(|r| SaliencyCsvRow {
                    dataset: &s.dataset,
                    seed: s.seed,
                    auprc: r.auprc,
                    aup: r.aup,
                    aur: r.aur,
                })
            })
            .collect();
        write_csv(&cfg.out.join("saliency.csv"), &rows)?;
    }
    if !report.occlusion.is_empty() {
        let rows: Vec<OcclusionCsvRow> = per
            .iter()
            .flat_map(|s| {
                s.occlusion.iter().map(move |r| OcclusionCsvRow {
                    dataset: &s.dataset,
                    seed: s.seed,
                    k: r.k,
                    explainer_auroc: r.explainer.auroc,
                    explainer_accuracy: r.explainer.accuracy,
                    random_auroc: r.random.auroc,
                    random_accuracy: r.random.accuracy,
                })
            })
            .collect();
        write_csv(&cfg.out.join("occlusion.csv"), &rows)?;
    }
    if !report.substitution.is_empty() {
        let rows: Vec<SubstitutionCsvRow> = per
            .iter()
            .flat_map(|s| {
                s.substitution.iter().map(move |r| SubstitutionCsvRow {
                    dataset: &s.dataset,
                    seed: s.seed,
                    mode: r.mode,
                    frac: r.frac,
                    clean_accuracy: s.clean.accuracy,
                    explainer_accuracy: r.explainer.accuracy,
                    random_accuracy: r.random.accuracy,
                    clean_auroc: s.clean.auroc,
                    explainer_auroc: r.explainer.auroc,
                    random_auroc: r.random.auroc,
                })
            })
            .collect();
        write_csv(&cfg.out.join("substitution.csv"), &rows)?;
    }
    Ok(report)
}

fn rows_of(t: &gradcore::Tensor) -> Vec<Vec<f64>> {
    let b = t.shape()[0];
    let k = t.numel() / b.max(1);
    t.data().chunks(k.max(1)).map(<[f64]>::to_vec).collect()
}

/// Zero-padded, mean-padded, Gaussian-padded and conditioned test
/// instances, in that order.
pub(crate) fn instance_families(
    expl: &Explainer,
    x: &gradcore::Tensor,
    seed: u64,
) -> Result<Vec<(&'static str, gradcore::Tensor)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DIAGNOSE_STREAM);
    let e = expl.explain(x, &mut rng)?;
    let b = x.shape()[0];
    let zeros = gradcore::Tensor::zeros(x.shape());
    Ok(vec![
        ("zero", make_reference(x, &e.mask, &zeros)),
        ("mean", make_reference(x, &e.mask, &expl.baseline().mean_batch(b))),
        ("gaussian", e.reference),
        ("conditioned", e.conditioned),
    ])
}

fn diagnose_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedDiagnosis> {
    let ds = fold_dataset(cfg, seed)?;
    let expl = fold_explainer(cfg, seed)?;
    let test = require_test(&ds)?;
    let x = ds.batch(test);
    let original = rows_of(&x);
    let kde = Kde::fit(&rows_of(&ds.batch(&ds.splits.train)), KDE_COMPONENTS)?;
    let mut families = Vec::new();
    for (name, inst) in instance_families(&expl, &x, seed)? {
        let rows = rows_of(&inst);
        families.push(FamilyShift {
            family: name.to_string(),
            shift: DistShiftReport {
                kde_loglik: kde.mean_log_likelihood(&rows)?,
                kl_div: kl_divergence_estimate(&original, &rows)?,
                mmd: mmd_rbf(&original, &rows)?,
            },
        });
    }
    Ok(SeedDiagnosis {
        dataset: ds.name.clone(),
        seed,
        families,
    })
}

#[derive(Serialize)]
struct DiagnoseCsvRow<'a> {
    dataset: &'a str,
    seed: u64,
    family: &'a str,
    kde_loglik: f64,
    kl_div: f64,
    mmd: f64,
}

pub fn cmd_diagnose(cfg: &ExperimentConfig) -> Result<DiagnoseReport> {
    cfg.validate()?;
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let d = diagnose_seed(cfg, seed)?;
        write_json(&cfg.seed_dir(seed).join("diagnose.json"), &d)?;
        per_seed.push(d);
    }
    let report = DiagnoseReport::build(cfg.clone(), per_seed);
    write_json(&cfg.out.join("diagnose.json"), &report)?;
    let rows: Vec<DiagnoseCsvRow> = report
        .per_seed
        .iter()
        .flat_map(|s| {
            s.families.iter().map(move |f| DiagnoseCsvRow {
                dataset: &s.dataset,
                seed: s.seed,
                family: &f.family,
                kde_loglik: f.shift.kde_loglik,
                kl_div: f.shift.kl_div,
                mmd: f.shift.mmd,
            })
        })
        .collect();
    write_csv(&cfg.out.join("diagnose.csv"), &rows)?;
    Ok(report)
}
