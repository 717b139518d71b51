//! Saliency quality against binary ground truth. All functions pool every
//! (score, truth) pair across instances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLDS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub auprc: f64,
    pub aup: f64,
    pub aur: f64,
    pub n_thresholds: usize,
}

fn check(scores: &[f64], truth: &[u8]) -> Result<usize> {
    if scores.len() != truth.len() {
        return Err(Error::Metric(format!(
            "scores ({}) and truth ({}) differ in length",
            scores.len(),
            truth.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("scores must be finite".into()));
    }
    let pos = truth.iter().filter(|&&t| t != 0).count();
    if pos == 0 {
        return Err(Error::Metric("undefined recall: truth has no salient cells".into()));
    }
    Ok(pos)
}

/// Areas under precision and recall as functions of the detection
/// threshold, by the midpoint rule on `n_thresholds` levels in (0, 1).
/// A cell is detected when its score is at least the threshold; a level
/// with no detections counts precision 1.
pub fn aup_aur(scores: &[f64], truth: &[u8], n_thresholds: usize) -> Result<(f64, f64)> {
    let pos = check(scores, truth)?;
    if n_thresholds == 0 {
        return Err(Error::Metric("n_thresholds must be positive".into()));
    }
    // scores in descending order, with running true-positive counts
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let sorted: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    let mut tp_prefix = Vec::with_capacity(order.len() + 1);
    tp_prefix.push(0usize);
    for &i in &order {
        tp_prefix.push(tp_prefix.last().unwrap() + usize::from(truth[i] != 0));
    }
    let (mut p_sum, mut r_sum) = (0.0, 0.0);
    for k in 0..n_thresholds {
        let tau = (k as f64 + 0.5) / n_thresholds as f64;
        let selected = sorted.partition_point(|&s| s >= tau);
        let tp = tp_prefix[selected];
        p_sum += if selected == 0 {
            1.0
        } else {
            tp as f64 / selected as f64
        };
        r_sum += tp as f64 / pos as f64;
    }
    Ok((p_sum / n_thresholds as f64, r_sum / n_thresholds as f64))
}

/// Trapezoidal area under the precision-recall curve traced at every
/// distinct score, starting from (recall 0, precision 1).
pub fn auprc(scores: &[f64], truth: &[u8]) -> Result<f64> {
    let pos = check(scores, truth)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut prev_r, mut prev_p) = (0.0, 1.0);
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let level = scores[order[i]];
        while i < order.len() && scores[order[i]] == level {
            tp += usize::from(truth[order[i]] != 0);
            seen += 1;
            i += 1;
        }
        let r = tp as f64 / pos as f64;
        let p = tp as f64 / seen as f64;
        area += (r - prev_r) * (p + prev_p) / 2.0;
        prev_r = r;
        prev_p = p;
    }
    Ok(area)
}

pub(crate) fn auprc_flags(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let truth: Vec<u8> = labels.iter().map(|&b| u8::from(b)).collect();
    auprc(scores, &truth)
}

pub fn saliency_report(scores: &[f64], truth: &[u8], n_thresholds: usize) -> Result<SaliencyReport> {
    let (aup, aur) = aup_aur(scores, truth, n_thresholds)?;
    Ok(SaliencyReport {
        auprc: auprc(scores, truth)?,
        aup,
        aur,
        n_thresholds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_scores() {
        let truth = [1, 0, 1, 0, 0];
        let scores: Vec<f64> = truth.iter().map(|&t| t as f64).collect();
        assert_eq!(aup_aur(&scores, &truth, 200).unwrap(), (1.0, 1.0));
        assert_eq!(auprc(&scores, &truth).unwrap(), 1.0);
    }

    #[test]
    fn all_zero_truth() {
        let err = aup_aur(&[0.2, 0.3], &[0, 0], 10).unwrap_err();
        assert!(err.to_string().contains("undefined recall"));
        assert!(auprc(&[0.2], &[0]).is_err());
    }

    #[test]
    fn inverted_four_cells() {
        let v = auprc(&[0.9, 0.6, 0.4, 0.1], &[0, 0, 1, 1]).unwrap();
        assert!((v - 7.0 / 24.0).abs() < 1e-12);
    }
}
