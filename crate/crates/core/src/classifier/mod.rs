//! Sequence classifier that plays the role of the model being explained.

mod checkpoint;
mod train;

pub use checkpoint::{load_model, save_model};
pub use train::{evaluate, train_classifier, EpochRecord, TestScores, TrainReport};

use gradcore::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{uniform, AttentionBlock, Dropout, GruLayer, LayerNorm, Linear, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Attention,
    Gru,
    TemporalMlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub encoder: EncoderKind,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Consecutive time steps merged into one attention token; 1 keeps one
    /// token per step. Must divide T.
    pub patch: usize,
    /// Width of a causal convolution applied before patching. With a kernel
    /// above 1 each step is embedded from its trailing window (through a
    /// GELU) and a token is the mean of its patch; 1 embeds raw patches.
    pub kernel: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            encoder: EncoderKind::Attention,
            hidden: 16,
            layers: 1,
            dropout: 0.1,
            lr: 1e-3,
            weight_decay: 0.1,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            patch: 1,
            kernel: 1,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.hidden < classes {
            return Err(Error::Config(format!(
                "hidden width {} must be at least the class count {classes}",
                self.hidden
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.layers == 0 || self.batch_size == 0 || self.patch == 0 || self.kernel == 0 {
            return Err(Error::Config(
                "layers, batch_size, patch and kernel must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "lr must be positive and weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Input geometry the model was built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "C")]
    pub c: usize,
}

#[derive(Clone, Debug)]
enum Arch {
    Attention {
        input: Linear,
        pos: usize,
        blocks: Vec<AttentionBlock>,
        norm: LayerNorm,
        head: Linear,
    },
    Gru {
        layers: Vec<GruLayer>,
        head: Linear,
    },
    Mlp {
        layers: Vec<Linear>,
        head: Linear,
    },
}

#[derive(Clone, Debug)]
pub struct ClassifierModel {
    config: ClassifierConfig,
    dims: Dims,
    arch: Arch,
    params: ParamSet,
    frozen: bool,
}

impl ClassifierModel {
    /// Freshly initialised, unfrozen model.
    pub fn new(config: ClassifierConfig, dims: Dims) -> Result<Self> {
        config.validate(dims.c)?;
        if !dims.t.is_multiple_of(config.patch) {
            return Err(Error::Config(format!(
                "patch {} does not divide T={}",
                config.patch, dims.t
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        let h = config.hidden;
        let arch = match config.encoder {
            EncoderKind::Attention => {
                let width = if config.kernel > 1 {
                    config.kernel * dims.d
                } else {
                    config.patch * dims.d
                };
                let input = Linear::new(&mut ps, "input", width, h, &mut rng);
                let pos = ps.push("pos", uniform(&mut rng, &[dims.t / config.patch, h], 0.1));
                let blocks = (0..config.layers)
                    .map(|i| AttentionBlock::new(&mut ps, &format!("block{i}"), h, 2 * h, &mut rng))
                    .collect();
                let norm = LayerNorm::new(&mut ps, "norm", h);
                let head = Linear::zeros(&mut ps, "head", h, dims.c);
                Arch::Attention {
                    input,
                    pos,
                    blocks,
                    norm,
                    head,
                }
            }
            EncoderKind::Gru => {
                let layers = (0..config.layers)
                    .map(|i| {
                        let w_in = if i == 0 { dims.d } else { h };
                        GruLayer::new(&mut ps, &format!("gru{i}"), w_in, h, &mut rng)
                    })
                    .collect();
                let head = Linear::zeros(&mut ps, "head", h, dims.c);
                Arch::Gru { layers, head }
            }
            EncoderKind::TemporalMlp => {
                let layers = (0..config.layers)
                    .map(|i| {
                        let w_in = if i == 0 { dims.t * dims.d } else { h };
                        Linear::new(&mut ps, &format!("mlp{i}"), w_in, h, &mut rng)
                    })
                    .collect();
                let head = Linear::zeros(&mut ps, "head", h, dims.c);
                Arch::Mlp { layers, head }
            }
        };
        Ok(ClassifierModel {
            config,
            dims,
            arch,
            params: ps,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Overwrites one parameter tensor; refused once the model is frozen.
    pub fn set_param(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.frozen {
            return Err(Error::Training(format!("cannot modify '{name}': classifier is frozen")));
        }
        self.params.set(name, tensor)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Rounds parameters to single precision and locks them.
    pub fn freeze(&mut self) {
        self.params.round_to_f32();
        self.frozen = true;
    }

    pub(crate) fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[1] != self.dims.t || shape[2] != self.dims.d {
            return Err(Error::Dataset(format!(
                "classifier expects input (batch, {}, {}), got {:?}",
                self.dims.t, self.dims.d, shape
            )));
        }
        Ok(())
    }

    /// Logits `(B, C)` for `x` of shape `(B, T, D)`, with parameters `p`
    /// already bound on `tape`.
    pub(crate) fn logits(&self, tape: &mut Tape, p: &[Var], x: Var, dropout: &mut Dropout) -> Result<Var> {
        let b = tape.shape(x)[0];
        match &self.arch {
            Arch::Attention {
                input,
                pos,
                blocks,
                norm,
                head,
            } => {
                let (t, d, k) = (self.dims.t, self.dims.d, self.config.patch);
                let mut h = if self.config.kernel > 1 {
                    let frames = causal_frames(tape, x, self.config.kernel)?;
                    let steps = input.forward(tape, p, frames)?;
                    let steps = tape.gelu(steps)?;
                    let width = self.config.hidden;
                    let grouped = tape.reshape(steps, &[b * t / k, k, width])?;
                    let pooled = tape.mean_axis(grouped, 1, false)?;
                    tape.reshape(pooled, &[b, t / k, width])?
                } else {
                    let tokens = tape.reshape(x, &[b, t / k, k * d])?;
                    input.forward(tape, p, tokens)?
                };
                h = tape.add(h, p[*pos])?;
                h = dropout.apply(tape, h)?;
                for blk in blocks {
                    h = blk.forward(tape, p, h, dropout)?;
                }
                h = norm.forward(tape, p, h)?;
                let pooled = tape.mean_axis(h, 1, false)?;
                head.forward(tape, p, pooled)
            }
            Arch::Gru { layers, head } => {
                let mut h = x;
                for l in layers {
                    h = l.forward(tape, p, h)?;
                    h = dropout.apply(tape, h)?;
                }
                let pooled = tape.mean_axis(h, 1, false)?;
                head.forward(tape, p, pooled)
            }
            Arch::Mlp { layers, head } => {
                let mut h = tape.reshape(x, &[b, self.dims.t * self.dims.d])?;
                for l in layers {
                    h = l.forward(tape, p, h)?;
                    h = tape.gelu(h)?;
                    h = dropout.apply(tape, h)?;
                }
                head.forward(tape, p, h)
            }
        }
    }

    /// Class probabilities on `tape` for an input already on the tape. The
    /// parameters enter as constants so nothing upstream can update them.
    pub fn probs_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if !self.frozen {
            return Err(Error::NotFrozen);
        }
        self.check_input(tape.shape(x))?;
        let p = self.params.bind(tape, false);
        let logits = self.logits(tape, &p, x, &mut Dropout::Off)?;
        Ok(tape.softmax(logits)?)
    }

    /// Softmax outputs in evaluation mode, one row per instance.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let b = x.shape()[0];
        let chunk = 128;
        let cells = self.dims.t * self.dims.d;
        let mut out = Vec::with_capacity(b * self.dims.c);
        for start in (0..b).step_by(chunk) {
            let end = (start + chunk).min(b);
            let part = Tensor::new(
                vec![end - start, self.dims.t, self.dims.d],
                x.data()[start * cells..end * cells].to_vec(),
            )?;
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, false);
            let xv = tape.constant(part);
            let logits = self.logits(&mut tape, &p, xv, &mut Dropout::Off)?;
            let probs = tape.softmax(logits)?;
            out.extend_from_slice(tape.value(probs).data());
        }
        Ok(Tensor::new(vec![b, self.dims.c], out)?)
    }

    /// Rows of [`Self::predict_proba`] as vectors.
    pub fn predict_rows(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let probs = self.predict_proba(x)?;
        Ok(probs.data().chunks(self.dims.c).map(|r| r.to_vec()).collect())
    }

    /// Gradient of `sum_i <upstream_i, f(x_i)>` with respect to `x`.
    pub fn input_vjp(&self, x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        if !self.frozen {
            return Err(Error::NotFrozen);
        }
        self.check_input(x.shape())?;
        let b = x.shape()[0];
        if upstream.shape() != [b, self.dims.c] {
            return Err(Error::Dataset(format!(
                "upstream must be ({b}, {}), got {:?}",
                self.dims.c,
                upstream.shape()
            )));
        }
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let probs = self.probs_on_tape(&mut tape, xv)?;
        let u = tape.constant(upstream.clone());
        let prod = tape.mul(probs, u)?;
        let s = tape.sum(prod)?;
        Ok(tape.backward(s)?.wrt(xv))
    }
}

/// `(B, T, D)` to `(B, T, K*D)`: step `s` holds steps `s-K+1..=s`, oldest
/// first, with zeros before the series starts.
fn causal_frames(tape: &mut Tape, x: Var, kernel: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    // pad along time by concatenating on the last axis of the transpose
    let xt = tape.transpose(x)?;
    let zeros = tape.constant(Tensor::zeros(&[b, d, kernel - 1]));
    let padded = tape.concat(&[zeros, xt])?;
    let padded = tape.transpose(padded)?;
    let shifted: Vec<Var> = (0..kernel)
        .map(|j| tape.slice(padded, 1, j, j + t))
        .collect::<std::result::Result<_, _>>()?;
    Ok(tape.concat(&shifted)?)
}
