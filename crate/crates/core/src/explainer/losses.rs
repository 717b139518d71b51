//! Loss terms of the explainer objective, built on a gradient tape.

use gradcore::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::shift::VAR_FLOOR;

pub const PI_CLAMP: f64 = 1e-7;
pub const SMOOTH_ABS_EPS: f64 = 1e-8;
const PROB_FLOOR: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-6;

/// Values of every term for one step or averaged over an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_LC")]
    pub l_lc: f64,
    /// Includes the connectivity term.
    #[serde(rename = "L_M")]
    pub l_m: f64,
    #[serde(rename = "L_con")]
    pub l_con: f64,
    #[serde(rename = "L_KL")]
    pub l_kl: f64,
    #[serde(rename = "L_dr")]
    pub l_dr: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `L_LC + alpha * L_M + beta * (L_KL + L_dr)`, refusing non-finite parts.
    pub fn compose(l_lc: f64, l_m: f64, l_con: f64, l_kl: f64, l_dr: f64, alpha: f64, beta: f64) -> Result<Self> {
        for (name, v) in [
            ("L_LC", l_lc),
            ("L_M", l_m),
            ("L_con", l_con),
            ("L_KL", l_kl),
            ("L_dr", l_dr),
        ] {
            if !v.is_finite() {
                return Err(Error::Training(format!("loss term {name} is not finite ({v})")));
            }
        }
        Ok(LossBreakdown {
            l_lc,
            l_m,
            l_con,
            l_kl,
            l_dr,
            total: l_lc + alpha * l_m + beta * (l_kl + l_dr),
        })
    }

    pub(crate) fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.l_lc += weight * other.l_lc;
        self.l_m += weight * other.l_m;
        self.l_con += weight * other.l_con;
        self.l_kl += weight * other.l_kl;
        self.l_dr += weight * other.l_dr;
        self.total += weight * other.total;
    }
}

/// Mask loss: mean Bernoulli KL to the prior `r` plus the connectivity
/// penalty. Returns `(L_M, L_con)` with `L_M` already containing `L_con`.
///
/// `pi` is `(B, T, D)`; both terms are normalised by `T * D` and averaged
/// over the batch.
pub fn loss_mask(tape: &mut Tape, pi: Var, r: f64, lambda_con: f64) -> Result<(Var, Var)> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Config(format!("prior r={r} must lie in (0, 1)")));
    }
    let shape = tape.shape(pi).to_vec();
    if shape.len() != 3 {
        return Err(Error::Metric(format!("mask loss expects (B, T, D), got {shape:?}")));
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);

    let pc = tape.clamp(pi, PI_CLAMP, 1.0 - PI_CLAMP)?;
    let log_pc = tape.log(pc)?;
    let log_ratio = tape.add_scalar(log_pc, -r.ln())?;
    let pos = tape.mul(pc, log_ratio)?;
    let neg_p = tape.neg(pc)?;
    let qc = tape.add_scalar(neg_p, 1.0)?;
    let log_qc = tape.log(qc)?;
    let log_qratio = tape.add_scalar(log_qc, -(1.0 - r).ln())?;
    let negpart = tape.mul(qc, log_qratio)?;
    let kl = tape.add(pos, negpart)?;
    let kl = tape.mean(kl)?;

    let con = if t < 2 {
        let z = tape.scale(kl, 0.0)?;
        tape.add_scalar(z, 0.0)?
    } else {
        let head = tape.slice(pi, 1, 0, t - 1)?;
        let tail = tape.slice(pi, 1, 1, t)?;
        let diff = tape.sub(tail, head)?;
        let sa = tape.smooth_abs(diff, SMOOTH_ABS_EPS)?;
        let s = tape.sum(sa)?;
        tape.scale(s, lambda_con / (b * t * d) as f64)?
    };
    let total = tape.add(kl, con)?;
    Ok((total, con))
}

/// Mean squared difference between the conditioned and reference instances.
pub fn loss_dr(tape: &mut Tape, conditioned: Var, reference: Var) -> Result<Var> {
    let diff = tape.sub(conditioned, reference)?;
    let sq = tape.square(diff)?;
    Ok(tape.mean(sq)?)
}

/// Per-cell Gaussian KL between moment-matched fits to the original batch
/// `x` and the conditioned batch `xt`, averaged over cells. Variances are
/// population variances over the batch axis, floored.
pub fn loss_kl_dist(tape: &mut Tape, x: Var, xt: Var) -> Result<Var> {
    let b = tape.shape(x)[0];
    if b < 2 || tape.shape(xt)[0] < 2 {
        return Err(Error::Metric(
            "distribution loss needs at least 2 instances per batch".into(),
        ));
    }
    if tape.shape(x) != tape.shape(xt) {
        return Err(Error::Metric(format!(
            "distribution loss shapes differ: {:?} vs {:?}",
            tape.shape(x),
            tape.shape(xt)
        )));
    }
    let (mp, vp) = batch_moments(tape, x)?;
    let (mq, vq) = batch_moments(tape, xt)?;
    let log_vq = tape.log(vq)?;
    let log_vp = tape.log(vp)?;
    let log_term = tape.sub(log_vq, log_vp)?;
    let log_term = tape.scale(log_term, 0.5)?;
    let dm = tape.sub(mp, mq)?;
    let dm2 = tape.square(dm)?;
    let num = tape.add(vp, dm2)?;
    let vq2 = tape.scale(vq, 2.0)?;
    let frac = tape.div(num, vq2)?;
    let kl = tape.add(log_term, frac)?;
    let kl = tape.add_scalar(kl, -0.5)?;
    Ok(tape.mean(kl)?)
}

fn batch_moments(tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
    let mu = tape.mean_axis(x, 0, true)?;
    let c = tape.sub(x, mu)?;
    let sq = tape.square(c)?;
    let var = tape.mean_axis(sq, 0, true)?;
    let var = tape.clamp(var, VAR_FLOOR, f64::INFINITY)?;
    Ok((mu, var))
}

/// Mean Jensen-Shannon divergence (natural log) between matching rows of
/// `p` and `q`, both `(B, C)` on the probability simplex.
pub fn loss_lc(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    if tape.shape(p) != tape.shape(q) || tape.shape(p).len() != 2 {
        return Err(Error::Metric(format!(
            "label consistency expects equal (B, C) shapes, got {:?} and {:?}",
            tape.shape(p),
            tape.shape(q)
        )));
    }
    for v in [p, q] {
        check_simplex(tape, v)?;
    }
    let b = tape.shape(p)[0];
    let sum = tape.add(p, q)?;
    let m = tape.scale(sum, 0.5)?;
    let m_c = tape.clamp(m, PROB_FLOOR, f64::INFINITY)?;
    let log_m = tape.log(m_c)?;
    let mut halves = Vec::with_capacity(2);
    for v in [p, q] {
        let vc = tape.clamp(v, PROB_FLOOR, f64::INFINITY)?;
        let lv = tape.log(vc)?;
        let ratio = tape.sub(lv, log_m)?;
        let term = tape.mul(v, ratio)?;
        halves.push(tape.sum(term)?);
    }
    let both = tape.add(halves[0], halves[1])?;
    Ok(tape.scale(both, 0.5 / b as f64)?)
}

fn check_simplex(tape: &Tape, v: Var) -> Result<()> {
    let c = tape.shape(v)[1];
    for row in tape.value(v).data().chunks(c) {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|&x| x < -SIMPLEX_TOL) {
            return Err(Error::Metric(format!("row {row:?} is not on the probability simplex")));
        }
    }
    Ok(())
}

/// Budget-derived Bernoulli prior: the `r` in (0, 0.5] with
/// `-log2 r - log2 (1 - r) = gamma * p / alpha`.
pub fn bernoulli_prior_from_budget(gamma: f64, p: f64, alpha: f64) -> Result<f64> {
    let budget = gamma * p / alpha;
    if !(budget >= 2.0) || !budget.is_finite() {
        return Err(Error::Config(format!(
            "prior undefined below budget 2 bits (gamma*p/alpha = {budget})"
        )));
    }
    Ok((1.0 - (1.0 - 2f64.powf(2.0 - budget)).sqrt()) / 2.0)
}
