//! Distribution-shift diagnostics between sets of flattened instances.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VAR_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistShiftReport {
    pub kde_loglik: f64,
    pub kl_div: f64,
    pub mmd: f64,
}

fn check_rows(rows: &[Vec<f64>], min: usize, what: &str) -> Result<usize> {
    if rows.len() < min {
        return Err(Error::Metric(format!(
            "{what} needs at least {min} samples, got {}",
            rows.len()
        )));
    }
    let dim = rows[0].len();
    if dim == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Metric(format!(
            "{what}: samples must share a positive dimension"
        )));
    }
    Ok(dim)
}

/// Per-coordinate mean and population variance (floored).
pub fn moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let dim = rows[0].len();
    let mut mean = vec![0.0; dim];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        var.iter_mut()
            .zip(r)
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m).powi(2));
    }
    var.iter_mut().for_each(|s| *s = (*s / n).max(VAR_FLOOR));
    (mean, var)
}

/// `KL(N(mp, vp) || N(mq, vq))` for scalar Gaussians given variances.
pub fn gaussian_kl(mp: f64, vp: f64, mq: f64, vq: f64) -> f64 {
    0.5 * (vq.ln() - vp.ln()) + (vp + (mp - mq).powi(2)) / (2.0 * vq) - 0.5
}

/// Mean over coordinates of the KL between moment-matched Gaussians fitted
/// to `p` and to `q`.
pub fn kl_divergence_estimate(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<f64> {
    let dp = check_rows(p, 2, "kl")?;
    let dq = check_rows(q, 2, "kl")?;
    if dp != dq {
        return Err(Error::Metric(format!("kl: dimensions differ ({dp} vs {dq})")));
    }
    let (mp, vp) = moments(p);
    let (mq, vq) = moments(q);
    let total: f64 = (0..dp).map(|j| gaussian_kl(mp[j], vp[j], mq[j], vq[j])).sum();
    Ok(total / dp as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Unbiased squared MMD with a Gaussian kernel whose bandwidth is the
/// median pairwise distance of the pooled sample.
pub fn mmd_rbf(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<f64> {
    let dp = check_rows(p, 2, "mmd")?;
    let dq = check_rows(q, 2, "mmd")?;
    if dp != dq {
        return Err(Error::Metric(format!("mmd: dimensions differ ({dp} vs {dq})")));
    }
    let pooled: Vec<&Vec<f64>> = p.iter().chain(q).collect();
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    let mid = dists.len() / 2;
    let (_, median_sq, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let median_sq = *median_sq;
    if median_sq <= 0.0 {
        return Err(Error::Metric(
            "mmd: median pairwise distance is zero (degenerate data)".into(),
        ));
    }
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * median_sq)).exp();
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                acc += k(&s[i], &s[j]);
            }
        }
        2.0 * acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in p {
        for b in q {
            cross += k(a, b);
        }
    }
    cross /= (p.len() * q.len()) as f64;
    Ok(within(p) + within(q) - 2.0 * cross)
}

/// Gaussian KDE on a `q`-dimensional principal-component projection of the
/// training instances, with per-axis Scott bandwidths.
#[derive(Clone, Debug)]
pub struct Kde {
    mean: Vec<f64>,
    /// `q` rows of length `dim`
    components: Vec<Vec<f64>>,
    points: Vec<Vec<f64>>,
    bandwidth: Vec<f64>,
}

pub const KDE_COMPONENTS: usize = 4;

impl Kde {
    pub fn fit(train: &[Vec<f64>], q: usize) -> Result<Self> {
        let dim = check_rows(train, 10, "kde")?;
        if q == 0 || q > dim {
            return Err(Error::Metric(format!("kde: q={q} must lie in 1..={dim}")));
        }
        let n = train.len();
        let (mean, _) = moments(train);
        let centered = DMatrix::from_fn(n, dim, |i, j| train[i][j] - mean[j]);
        let components = top_components(&centered, q)?;
        let points: Vec<Vec<f64>> = train.iter().map(|r| project(r, &mean, &components)).collect();
        let (_, var) = moments(&points);
        let scale = (n as f64).powf(-1.0 / (q as f64 + 4.0));
        let bandwidth = var.iter().map(|v| scale * v.sqrt()).collect();
        Ok(Kde {
            mean,
            components,
            points,
            bandwidth,
        })
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let z = project(x, &self.mean, &self.components);
        let terms: Vec<f64> = self
            .points
            .iter()
            .map(|p| {
                -0.5 * z
                    .iter()
                    .zip(p)
                    .zip(&self.bandwidth)
                    .map(|((a, b), h)| ((a - b) / h).powi(2))
                    .sum::<f64>()
            })
            .collect();
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
        let norm: f64 = self
            .bandwidth
            .iter()
            .map(|h| (h * (2.0 * std::f64::consts::PI).sqrt()).ln())
            .sum();
        lse - (self.points.len() as f64).ln() - norm
    }

    pub fn mean_log_likelihood(&self, rows: &[Vec<f64>]) -> Result<f64> {
        if rows.is_empty() {
            return Err(Error::Metric("kde: nothing to score".into()));
        }
        if rows.iter().any(|r| r.len() != self.mean.len()) {
            return Err(Error::Metric("kde: dimension differs from training data".into()));
        }
        Ok(rows.iter().map(|r| self.log_density(r)).sum::<f64>() / rows.len() as f64)
    }
}

fn project(x: &[f64], mean: &[f64], components: &[Vec<f64>]) -> Vec<f64> {
    components
        .iter()
        .map(|c| c.iter().zip(x).zip(mean).map(|((w, v), m)| w * (v - m)).sum())
        .collect()
}

// Leading eigenvectors of the covariance, via the Gram matrix when there are
// fewer samples than dimensions.
fn top_components(centered: &DMatrix<f64>, q: usize) -> Result<Vec<Vec<f64>>> {
    let (n, dim) = centered.shape();
    let small_gram = n < dim;
    let sym = if small_gram {
        centered * centered.transpose()
    } else {
        centered.transpose() * centered
    };
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let trace: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut out = Vec::with_capacity(q);
    for &k in order.iter().take(q) {
        let lambda = eig.eigenvalues[k];
        if !(lambda > 1e-10 * trace.max(f64::MIN_POSITIVE)) {
            return Err(Error::Metric(format!(
                "kde: degenerate covariance (component {} has no variance); try a smaller q",
                out.len() + 1
            )));
        }
        let v = eig.eigenvectors.column(k);
        let comp: Vec<f64> = if small_gram {
            let u = centered.transpose() * v;
            let norm = u.norm();
            u.iter().map(|x| x / norm).collect()
        } else {
            v.iter().copied().collect()
        };
        out.push(comp);
    }
    Ok(out)
}
