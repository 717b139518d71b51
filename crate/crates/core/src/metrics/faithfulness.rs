//! Perturbation experiments against the frozen classifier: occlude the least
//! salient cells, or substitute the most salient ones.

use gradcore::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classification::{accuracy, argmax, auroc_ovr};
use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::explainer::BaselineDistribution;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbedScore {
    pub auroc: f64,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionPoint {
    pub k: f64,
    pub auroc: f64,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Substitution {
    Mean,
    Zero,
}

pub fn score_model(f: &ClassifierModel, x: &Tensor, labels: &[usize]) -> Result<PerturbedScore> {
    let probs = f.predict_rows(x)?;
    let preds: Vec<usize> = probs.iter().map(|r| argmax(r)).collect();
    Ok(PerturbedScore {
        auroc: auroc_ovr(labels, &probs)?,
        accuracy: accuracy(labels, &preds),
    })
}

fn check_shapes(x: &Tensor, scores: &Tensor, labels: &[usize]) -> Result<usize> {
    if x.shape() != scores.shape() || x.rank() != 3 {
        return Err(Error::Metric(format!(
            "scores {:?} must match inputs {:?} of shape (B, T, D)",
            scores.shape(),
            x.shape()
        )));
    }
    if labels.len() != x.shape()[0] {
        return Err(Error::Metric("one label per instance required".into()));
    }
    Ok(x.shape()[1] * x.shape()[2])
}

/// Cell indices of one instance, most salient first; ties keep index order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// For each percentile `k`, keeps the top `(100 - k)%` cells of every
/// instance and replaces the rest with baseline draws, then scores `f`.
pub fn occlusion_curve(
    f: &ClassifierModel,
    x: &Tensor,
    labels: &[usize],
    scores: &Tensor,
    k_list: &[f64],
    baseline: &BaselineDistribution,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<OcclusionPoint>> {
    let cells = check_shapes(x, scores, labels)?;
    if let Some(bad) = k_list.iter().find(|k| !(0.0..100.0).contains(*k)) {
        return Err(Error::Metric(format!("percentile {bad} outside [0, 100)")));
    }
    let ranks: Vec<Vec<usize>> = scores.data().chunks(cells).map(ranking).collect();
    let mut out = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let drop = (k / 100.0 * cells as f64).floor() as usize;
        let mut xp = x.clone();
        if drop > 0 {
            let b = baseline.draw(x.shape()[0], rng);
            for (i, rank) in ranks.iter().enumerate() {
                for &c in &rank[cells - drop..] {
                    xp.data_mut()[i * cells + c] = b.data()[i * cells + c];
                }
            }
        }
        let s = score_model(f, &xp, labels)?;
        out.push(OcclusionPoint {
            k,
            auroc: s.auroc,
            accuracy: s.accuracy,
        });
    }
    Ok(out)
}

/// Replaces the top `frac` of cells of every instance by the training mean
/// or by zero, then scores `f`. Lower scores mean the explanation found
/// cells the classifier relies on.
pub fn top_substitution(
    f: &ClassifierModel,
    x: &Tensor,
    labels: &[usize],
    scores: &Tensor,
    frac: f64,
    mode: Substitution,
    baseline: &BaselineDistribution,
) -> Result<PerturbedScore> {
    let cells = check_shapes(x, scores, labels)?;
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Metric(format!("substitution fraction {frac} outside (0, 1)")));
    }
    let n = (frac * cells as f64).floor() as usize;
    let mut xp = x.clone();
    for (i, s) in scores.data().chunks(cells).enumerate() {
        for &c in ranking(s).iter().take(n) {
            xp.data_mut()[i * cells + c] = match mode {
                Substitution::Mean => baseline.mu[c],
                Substitution::Zero => 0.0,
            };
        }
    }
    score_model(f, &xp, labels)
}

/// Uniform scores of the given shape, the reference explanation.
pub fn random_scores(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    gradcore::uniform_like(shape, rng)
}
