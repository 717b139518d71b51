use crate::error::{Error, Result};

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

pub fn accuracy(labels: &[usize], preds: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels.iter().zip(preds).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// Unweighted mean of per-class F1; a class with no support and no
/// predictions scores 0.
pub fn macro_f1(labels: &[usize], preds: &[usize], classes: usize) -> f64 {
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fneg = vec![0usize; classes];
    for (&l, &p) in labels.iter().zip(preds) {
        if l == p {
            tp[l] += 1;
        } else {
            fp[p] += 1;
            fneg[l] += 1;
        }
    }
    let total: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    total / classes as f64
}

/// Area under the ROC curve via the Mann-Whitney statistic, ties counted
/// as half.
pub fn auroc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Metric("labels and scores differ in length".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("auroc needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Macro one-vs-rest AUROC over the columns of `probs` (rows are instances).
/// Classes absent from `labels` are skipped.
pub fn auroc_ovr(labels: &[usize], probs: &[Vec<f64>]) -> Result<f64> {
    ovr(labels, probs, auroc)
}

/// Macro one-vs-rest area under the precision-recall curve.
pub fn auprc_ovr(labels: &[usize], probs: &[Vec<f64>]) -> Result<f64> {
    ovr(labels, probs, super::saliency::auprc_flags)
}

fn ovr(labels: &[usize], probs: &[Vec<f64>], f: impl Fn(&[bool], &[f64]) -> Result<f64>) -> Result<f64> {
    let classes = probs.first().map_or(0, |r| r.len());
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..classes {
        let flags: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if flags.iter().all(|&b| b) || !flags.iter().any(|&b| b) {
            continue;
        }
        let scores: Vec<f64> = probs.iter().map(|r| r[c]).collect();
        total += f(&flags, &scores)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Metric("no class has both positives and negatives".into()));
    }
    Ok(total / used as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_count_case() {
        let v = auroc(&[true, false, true, false], &[0.9, 0.8, 0.7, 0.1]).unwrap();
        assert!((v - 0.75).abs() < 1e-12);
    }

    #[test]
    fn ties_and_degenerate() {
        assert_eq!(auroc(&[true, false, true], &[0.5; 3]).unwrap(), 0.5);
        assert_eq!(auroc(&[true, false], &[1.0, 0.0]).unwrap(), 1.0);
        assert!(auroc(&[true, true], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn f1_values() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3), 1.0);
        // class 0: tp1 fp1 fn0 -> 2/3 ; class 1: tp0 fp0 fn1 -> 0
        let f = macro_f1(&[0, 1], &[0, 0], 2);
        assert!((f - (2.0 / 3.0) / 2.0).abs() < 1e-12);
    }
}
