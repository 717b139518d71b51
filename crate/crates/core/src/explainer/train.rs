use gradcore::{AdamConfig, AdamState, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::losses::{loss_dr, loss_kl_dist, loss_lc, loss_mask, LossBreakdown};
use super::{reference_on_tape, standard_normals, BaselineDistribution, Explainer, ExplainerConfig};
use crate::classifier::ClassifierModel;
use crate::datagen::Dataset;
use crate::error::{Error, Result};

/// Random draws consumed by one training step.
#[derive(Clone, Debug)]
pub struct StepNoise {
    /// Uniforms thresholded against `pi` to sample the mask.
    pub uniforms: Tensor,
    /// Standard normals turned into baseline draws.
    pub normals: Tensor,
    /// When set, the mask is `pi + residual` instead of a fresh sample.
    /// With `residual = hard_mask - pi` computed at fixed parameters this
    /// reproduces the sampled mask in the forward pass and the
    /// straight-through gradient in every nearby evaluation, which is what
    /// finite differences need.
    pub residual: Option<Tensor>,
}

impl StepNoise {
    pub fn draw(shape: &[usize], rng: &mut ChaCha8Rng) -> Self {
        StepNoise {
            uniforms: gradcore::uniform_like(shape, rng),
            normals: standard_normals(shape, rng),
            residual: None,
        }
    }

    /// Replaces sampling by the residual of the mask drawn at `pi`.
    pub fn frozen_at(&self, pi: &Tensor) -> Self {
        let mut residual = pi.clone();
        for (r, &u) in residual.data_mut().iter_mut().zip(self.uniforms.data()) {
            let hard = if u < *r { 1.0 } else { 0.0 };
            *r = hard - *r;
        }
        StepNoise {
            residual: Some(residual),
            ..self.clone()
        }
    }
}

/// Tape handles for every quantity of one step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub pi: Var,
    pub mask: Var,
    pub reference: Var,
    pub conditioned: Var,
    pub l_lc: Var,
    pub l_m: Var,
    pub l_con: Var,
    pub l_kl: Var,
    pub l_dr: Var,
    pub total: Var,
}

impl StepOutput {
    pub fn breakdown(&self, tape: &Tape, cfg: &ExplainerConfig) -> Result<LossBreakdown> {
        let v = |x: Var| tape.value(x).data()[0];
        LossBreakdown::compose(
            v(self.l_lc),
            v(self.l_m),
            v(self.l_con),
            v(self.l_kl),
            v(self.l_dr),
            cfg.alpha,
            cfg.beta,
        )
    }
}

/// Builds the full objective for batch `x` given the classifier's outputs
/// `orig_probs` on that batch. `p` are the explainer parameters bound on
/// `tape` in [`Explainer::params`] order.
pub fn step_losses(
    tape: &mut Tape,
    expl: &Explainer,
    p: &[Var],
    f: &ClassifierModel,
    x: &Tensor,
    orig_probs: &Tensor,
    noise: &StepNoise,
) -> Result<StepOutput> {
    let cfg = expl.config();
    let xv = tape.constant(x.clone());
    let pi = expl.extract_on_tape(tape, p, xv)?;
    let mask = match &noise.residual {
        None => tape.bernoulli_ste(pi, &noise.uniforms)?,
        Some(res) => {
            let r = tape.constant(res.clone());
            tape.add(pi, r)?
        }
    };
    let b = tape.constant(expl.baseline().draw_with(&noise.normals));
    let reference = reference_on_tape(tape, xv, mask, b)?;
    let conditioned = expl.condition_on_tape(tape, p, mask, xv)?;

    let (l_m, l_con) = loss_mask(tape, pi, cfg.r, cfg.lambda_con)?;
    let l_dr = loss_dr(tape, conditioned, reference)?;
    let l_kl = loss_kl_dist(tape, xv, conditioned)?;
    let po = tape.constant(orig_probs.clone());
    let pc = f.probs_on_tape(tape, conditioned)?;
    let l_lc = loss_lc(tape, po, pc)?;

    let wm = tape.scale(l_m, cfg.alpha)?;
    let dist = tape.add(l_kl, l_dr)?;
    let wd = tape.scale(dist, cfg.beta)?;
    let reg = tape.add(wm, wd)?;
    let total = tape.add(l_lc, reg)?;
    Ok(StepOutput {
        pi,
        mask,
        reference,
        conditioned,
        l_lc,
        l_m,
        l_con,
        l_kl,
        l_dr,
        total,
    })
}

/// Fits the explainer against a frozen classifier. Returns the explainer
/// (parameters rounded to `f32`) and the mean loss breakdown per epoch.
pub fn train_explainer(
    f: &ClassifierModel,
    ds: &Dataset,
    cfg: &ExplainerConfig,
) -> Result<(Explainer, Vec<LossBreakdown>)> {
    if !f.is_frozen() {
        return Err(Error::NotFrozen);
    }
    cfg.validate()?;
    let dims = f.dims();
    if (dims.t, dims.d, dims.c) != (ds.t, ds.d, ds.c) {
        return Err(Error::Dataset(format!(
            "classifier was built for (T={}, D={}, C={}), dataset is (T={}, D={}, C={})",
            dims.t, dims.d, dims.c, ds.t, ds.d, ds.c
        )));
    }
    if ds.splits.train.len() < 2 {
        return Err(Error::Dataset(
            "explainer training needs at least 2 training instances".into(),
        ));
    }
    let baseline = BaselineDistribution::fit(ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut expl = Explainer::new(cfg.clone(), baseline, &mut rng)?;
    let adam = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut opt = AdamState::new(adam, expl.params().tensors());
    let mut order = ds.splits.train.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut last = LossBreakdown::default();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = LossBreakdown::default();
        for batch in batches(&order, cfg.batch_size) {
            let x = ds.batch(batch);
            let orig = f.predict_proba(&x)?;
            let noise = StepNoise::draw(x.shape(), &mut rng);
            let mut tape = Tape::new();
            let p = expl.params().bind(&mut tape, true);
            let step = step_losses(&mut tape, &expl, &p, f, &x, &orig, &noise)
                .and_then(|out| {
                    let bd = out.breakdown(&tape, cfg)?;
                    let grads = tape.backward(out.total)?;
                    Ok((bd, grads))
                })
                .map_err(|e| {
                    Error::Training(format!(
                        "explainer epoch {epoch} (lr {}): {e}; last breakdown {last:?}",
                        cfg.lr
                    ))
                })?;
            let (bd, grads) = step;
            let g: Vec<Tensor> = p.iter().map(|&v| grads.wrt(v)).collect();
            opt.step(expl.params_mut().tensors_mut(), &g)?;
            epoch_sum.accumulate(&bd, batch.len() as f64 / order.len() as f64);
            last = bd;
        }
        history.push(epoch_sum);
    }
    expl.params_mut().round_to_f32();
    Ok((expl, history))
}

/// Mini-batches of `size`, folding a trailing singleton into the previous
/// batch since the distribution loss needs two instances.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}
