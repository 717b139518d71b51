//! Mask extractor, conditioner and baseline distribution, plus the training
//! loop that ties them to a frozen classifier.

mod io;
pub mod losses;
mod train;

pub use io::{load_explainer, load_explanations, save_explainer, save_explanations};
pub use losses::{bernoulli_prior_from_budget, LossBreakdown};
pub use train::{step_losses, train_explainer, StepNoise, StepOutput};

use gradcore::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::nn::{uniform, AttentionBlock, Dropout, Linear, ParamSet};

pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    Threshold,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainerConfig {
    pub alpha: f64,
    pub beta: f64,
    pub r: f64,
    pub lambda_con: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub inference: InferenceMode,
    pub extractor_width: usize,
    pub conditioner_width: usize,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        ExplainerConfig {
            alpha: 2.0,
            beta: 1.0,
            r: 0.5,
            lambda_con: 1.0,
            lr: 1e-3,
            weight_decay: 1e-3,
            epochs: 50,
            batch_size: 64,
            seed: 0,
            inference: InferenceMode::Threshold,
            extractor_width: 32,
            conditioner_width: 32,
        }
    }
}

impl ExplainerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_con", self.lambda_con),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(Error::Config(format!("prior r={} must lie in (0, 1)", self.r)));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "lr must be positive and weight_decay non-negative".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.extractor_width == 0 || self.conditioner_width == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        Ok(())
    }
}

/// Per-cell Gaussian fitted to the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineDistribution {
    pub t: usize,
    pub d: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl BaselineDistribution {
    /// Mean and population standard deviation per cell over the training
    /// split; values are rounded to `f32` so checkpoints reproduce them.
    pub fn fit(ds: &Dataset) -> Result<Self> {
        let train = &ds.splits.train;
        if train.is_empty() {
            return Err(Error::Dataset("cannot fit a baseline on an empty train split".into()));
        }
        let k = ds.cells();
        let n = train.len() as f64;
        let mut mu = vec![0.0; k];
        for &i in train {
            mu.iter_mut().zip(ds.instance(i)).for_each(|(m, &v)| *m += v as f64);
        }
        mu.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; k];
        for &i in train {
            var.iter_mut()
                .zip(ds.instance(i))
                .zip(&mu)
                .for_each(|((s, &v), m)| *s += (v as f64 - m).powi(2));
        }
        let sigma = var
            .iter()
            .map(|s| ((s / n).sqrt().max(SIGMA_FLOOR) as f32 as f64).max(SIGMA_FLOOR))
            .collect();
        let mu = mu.iter().map(|&m| m as f32 as f64).collect();
        Ok(BaselineDistribution {
            t: ds.t,
            d: ds.d,
            mu,
            sigma,
        })
    }

    pub fn cells(&self) -> usize {
        self.t * self.d
    }

    /// `b` draws for a batch: `mu + sigma * z` with `z` standard normal.
    pub fn draw_with(&self, normals: &Tensor) -> Tensor {
        let k = self.cells();
        let mut out = normals.clone();
        for (j, v) in out.data_mut().iter_mut().enumerate() {
            *v = self.mu[j % k] + self.sigma[j % k] * *v;
        }
        out
    }

    pub fn draw(&self, batch: usize, rng: &mut ChaCha8Rng) -> Tensor {
        self.draw_with(&standard_normals(&[batch, self.t, self.d], rng))
    }

    /// The per-cell means broadcast to a batch.
    pub fn mean_batch(&self, batch: usize) -> Tensor {
        let k = self.cells();
        Tensor::from_fn(&[batch, self.t, self.d], |j| self.mu[j % k])
    }
}

pub fn standard_normals(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// `M * x + (1 - M) * b`, with `M`, `x`, `b` of equal shape.
pub fn make_reference(x: &Tensor, mask: &Tensor, b: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(mask.data())
        .zip(b.data())
        .map(|((&xv, &m), &bv)| if m == 1.0 { xv } else { m * xv + (1.0 - m) * bv })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("reference shape")
}

pub(crate) fn reference_on_tape(tape: &mut Tape, x: Var, mask: Var, b: Var) -> Result<Var> {
    let kept = tape.mul(mask, x)?;
    let neg = tape.neg(mask)?;
    let inv = tape.add_scalar(neg, 1.0)?;
    let filled = tape.mul(inv, b)?;
    Ok(tape.add(kept, filled)?)
}

#[derive(Clone, Debug)]
struct Extractor {
    input: Linear,
    pos: usize,
    block: AttentionBlock,
    decoder: Linear,
}

#[derive(Clone, Debug)]
struct Conditioner {
    hidden: Linear,
    out: Linear,
}

/// Trained explainer: extractor and conditioner parameters, with the
/// baseline fitted on the training data.
#[derive(Clone, Debug)]
pub struct Explainer {
    config: ExplainerConfig,
    t: usize,
    d: usize,
    extractor: Extractor,
    conditioner: Conditioner,
    params: ParamSet,
    baseline: BaselineDistribution,
}

/// Everything produced for a batch of inputs: probabilities, binary masks,
/// reference instances and conditioned instances, each `(B, T, D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub pi: Tensor,
    pub mask: Tensor,
    pub reference: Tensor,
    pub conditioned: Tensor,
}

impl Explainer {
    pub fn new(config: ExplainerConfig, baseline: BaselineDistribution, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (t, d) = (baseline.t, baseline.d);
        let mut ps = ParamSet::new();
        let w = config.extractor_width;
        let extractor = Extractor {
            input: Linear::new(&mut ps, "extractor.input", d, w, rng),
            pos: ps.push("extractor.pos", uniform(rng, &[t, w], 0.1)),
            block: AttentionBlock::new(&mut ps, "extractor.block", w, w, rng),
            decoder: Linear::new(&mut ps, "extractor.decoder", w, d, rng),
        };
        let cw = config.conditioner_width;
        let conditioner = Conditioner {
            hidden: Linear::new(&mut ps, "conditioner.hidden", 2, cw, rng),
            out: Linear::new(&mut ps, "conditioner.out", cw, 1, rng),
        };
        Ok(Explainer {
            config,
            t,
            d,
            extractor,
            conditioner,
            params: ps,
            baseline,
        })
    }

    pub fn config(&self) -> &ExplainerConfig {
        &self.config
    }

    pub fn baseline(&self) -> &BaselineDistribution {
        &self.baseline
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Overwrites one parameter tensor, keeping its shape.
    pub fn set_param(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        self.params.set(name, tensor)
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.t, self.d)
    }

    /// Mask probabilities `pi` for `x` of shape `(B, T, D)`.
    pub fn extract_on_tape(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let e = &self.extractor;
        let mut h = e.input.forward(tape, p, x)?;
        h = tape.add(h, p[e.pos])?;
        h = e.block.forward(tape, p, h, &mut Dropout::Off)?;
        let logits = e.decoder.forward(tape, p, h)?;
        Ok(tape.sigmoid(logits)?)
    }

    /// Conditioned instance from `[M, X]`, one small network shared by every
    /// cell.
    pub fn condition_on_tape(&self, tape: &mut Tape, p: &[Var], mask: Var, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let cells = shape.iter().product::<usize>();
        let m = tape.reshape(mask, &[cells, 1])?;
        let xv = tape.reshape(x, &[cells, 1])?;
        let input = tape.concat(&[m, xv])?;
        let h = self.conditioner.hidden.forward(tape, p, input)?;
        let h = tape.elu(h)?;
        let out = self.conditioner.out.forward(tape, p, h)?;
        Ok(tape.reshape(out, &shape)?)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.t || s[2] != self.d {
            return Err(Error::Dataset(format!(
                "explainer expects input (batch, {}, {}), got {s:?}",
                self.t, self.d
            )));
        }
        if !x.is_finite() {
            return Err(Error::Dataset("explainer input must be finite".into()));
        }
        Ok(())
    }

    pub fn extract_probs(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let pi = self.extract_on_tape(&mut tape, &p, xv)?;
        Ok(tape.value(pi).clone())
    }

    pub fn condition(&self, mask: &Tensor, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        if mask.shape() != x.shape() {
            return Err(Error::Dataset("mask and input shapes differ".into()));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let mv = tape.constant(mask.clone());
        let out = self.condition_on_tape(&mut tape, &p, mv, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Explains a batch. Threshold mode uses `M = 1[pi >= 0.5]`; sample mode
    /// draws `M ~ Bernoulli(pi)`. Reference instances use fresh baseline
    /// draws from `rng`.
    pub fn explain(&self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Explanation> {
        let mut out: Option<Explanation> = None;
        let b = x.shape().first().copied().unwrap_or(0);
        let chunk = 256;
        let cells = self.t * self.d;
        for start in (0..b).step_by(chunk) {
            let end = (start + chunk).min(b);
            let part = Tensor::new(
                vec![end - start, self.t, self.d],
                x.data()[start * cells..end * cells].to_vec(),
            )?;
            let e = self.explain_chunk(&part, rng)?;
            out = Some(match out {
                None => e,
                Some(acc) => Explanation {
                    pi: stack(&acc.pi, &e.pi),
                    mask: stack(&acc.mask, &e.mask),
                    reference: stack(&acc.reference, &e.reference),
                    conditioned: stack(&acc.conditioned, &e.conditioned),
                },
            });
        }
        out.ok_or_else(|| Error::Dataset("nothing to explain".into()))
    }

    fn explain_chunk(&self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Explanation> {
        let pi = self.extract_probs(x)?;
        let mask = match self.config.inference {
            InferenceMode::Threshold => pi.map(|p| if p >= 0.5 { 1.0 } else { 0.0 }),
            InferenceMode::Sample => {
                let mut m = pi.clone();
                m.data_mut()
                    .iter_mut()
                    .for_each(|p| *p = if rng.random::<f64>() < *p { 1.0 } else { 0.0 });
                m
            }
        };
        let b = self.baseline.draw(x.shape()[0], rng);
        let reference = make_reference(x, &mask, &b);
        let conditioned = self.condition(&mask, x)?;
        Ok(Explanation {
            pi,
            mask,
            reference,
            conditioned,
        })
    }
}

/// The degenerate mask that encodes the label instead of explaining it:
/// one cell at the first arg-max of each instance when its label is 0, at
/// the first arg-min otherwise. `x` is `(B, T, D)`.
pub fn signaling_mask(x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || s[0] != labels.len() {
        return Err(Error::Dataset(
            "signaling mask needs (B, T, D) inputs and one label per row".into(),
        ));
    }
    let cells = s[1] * s[2];
    let mut out = Tensor::zeros(s);
    for (i, row) in x.data().chunks(cells).enumerate() {
        let pick = |better: fn(f64, f64) -> bool| {
            (1..cells).fold(0, |best, j| if better(row[j], row[best]) { j } else { best })
        };
        let j = if labels[i] == 0 {
            pick(|a, b| a > b)
        } else {
            pick(|a, b| a < b)
        };
        out.data_mut()[i * cells + j] = 1.0;
    }
    Ok(out)
}

fn stack(a: &Tensor, b: &Tensor) -> Tensor {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(shape, data).expect("stack shape")
}
