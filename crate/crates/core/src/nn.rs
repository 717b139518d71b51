//! Named parameter storage and the layers shared by the classifier and the
//! explainer networks. Layers hold indices into a [`ParamSet`]; a forward pass
//! receives the parameters bound on a tape in the same order.

use gradcore::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Replaces the tensor called `name`, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::format(name, "unknown tensor name"))?;
        if self.tensors[i].shape() != tensor.shape() {
            return Err(Error::format(
                name,
                format!(
                    "shape mismatch: expected {:?}, found {:?}",
                    self.tensors[i].shape(),
                    tensor.shape()
                ),
            ));
        }
        self.tensors[i] = tensor;
        Ok(())
    }

    /// Puts every parameter on `tape`, as gradient leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect()
    }

    /// Rounds every value to the nearest `f32` so the parameters survive a
    /// single-precision checkpoint unchanged.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Raw little-endian bytes of all parameters, in order.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

/// Glorot-uniform initialisation for a `fan_in x fan_out` weight.
pub fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-limit..limit))
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-limit..limit))
}

/// Dropout policy for one forward pass.
pub enum Dropout<'a> {
    Off,
    On { rate: f64, rng: &'a mut ChaCha8Rng },
}

impl Dropout<'_> {
    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Dropout::Off => Ok(x),
            Dropout::On { rate, .. } if *rate <= 0.0 => Ok(x),
            Dropout::On { rate, rng } => {
                let keep = 1.0 - *rate;
                let mask = Tensor::from_fn(
                    tape.shape(x),
                    |_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    },
                );
                let m = tape.constant(mask);
                Ok(tape.mul(x, m)?)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = ps.push(format!("{name}.weight"), glorot(rng, fan_in, fan_out));
        let b = ps.push(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }

    /// Zero weights and bias: the layer starts out as a constant.
    pub fn zeros(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = ps.push(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]));
        let b = ps.push(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let h = tape.matmul(x, p[self.w])?;
        Ok(tape.add(h, p[self.b])?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: usize,
    beta: usize,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize) -> Self {
        let gamma = ps.push(format!("{name}.gamma"), Tensor::ones(&[width]));
        let beta = ps.push(format!("{name}.beta"), Tensor::zeros(&[width]));
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let axis = tape.shape(x).len() - 1;
        let mu = tape.mean_axis(x, axis, true)?;
        let centered = tape.sub(x, mu)?;
        let sq = tape.square(centered)?;
        let var = tape.mean_axis(sq, axis, true)?;
        let var = tape.add_scalar(var, LN_EPS)?;
        let sd = tape.sqrt(var)?;
        let xhat = tape.div(centered, sd)?;
        let y = tape.mul(xhat, p[self.gamma])?;
        Ok(tape.add(y, p[self.beta])?)
    }
}

/// Pre-norm transformer block with a single attention head:
/// `h = x + Attn(LN(x)); y = h + FFN(LN(h))`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    width: usize,
}

impl AttentionBlock {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionBlock {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), width),
            q: Linear::new(ps, &format!("{name}.q"), width, width, rng),
            k: Linear::new(ps, &format!("{name}.k"), width, width, rng),
            v: Linear::new(ps, &format!("{name}.v"), width, width, rng),
            o: Linear::new(ps, &format!("{name}.o"), width, width, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), width),
            ff1: Linear::new(ps, &format!("{name}.ff1"), width, ffn, rng),
            ff2: Linear::new(ps, &format!("{name}.ff2"), ffn, width, rng),
            width,
        }
    }

    /// `x` is `(batch, time, width)`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var, dropout: &mut Dropout) -> Result<Var> {
        let n = self.ln1.forward(tape, p, x)?;
        let q = self.q.forward(tape, p, n)?;
        let k = self.k.forward(tape, p, n)?;
        let v = self.v.forward(tape, p, n)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (self.width as f64).sqrt())?;
        let attn = tape.softmax(scores)?;
        let ctx = tape.matmul(attn, v)?;
        let out = self.o.forward(tape, p, ctx)?;
        let out = dropout.apply(tape, out)?;
        let h = tape.add(x, out)?;

        let n2 = self.ln2.forward(tape, p, h)?;
        let f = self.ff1.forward(tape, p, n2)?;
        let f = tape.gelu(f)?;
        let f = self.ff2.forward(tape, p, f)?;
        let f = dropout.apply(tape, f)?;
        Ok(tape.add(h, f)?)
    }
}

/// Gated recurrent unit layer over `(batch, time, width_in)` inputs.
#[derive(Clone, Debug)]
pub struct GruLayer {
    input: Linear,
    recurrent: usize,
    width: usize,
}

impl GruLayer {
    pub fn new(ps: &mut ParamSet, name: &str, width_in: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        // gates stacked as [update | reset | candidate]
        let input = Linear::new(ps, &format!("{name}.input"), width_in, 3 * width, rng);
        let recurrent = ps.push(format!("{name}.recurrent"), glorot(rng, width, 3 * width));
        GruLayer {
            input,
            recurrent,
            width,
        }
    }

    /// Returns the hidden state at every step, shaped `(batch, time, width)`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (batch, steps) = (shape[0], shape[1]);
        let w = self.width;
        let gates_in = self.input.forward(tape, p, x)?;
        let mut h = tape.constant(Tensor::zeros(&[batch, w]));
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let gi = tape.slice(gates_in, 1, t, t + 1)?;
            let gi = tape.reshape(gi, &[batch, 3 * w])?;
            let gh = tape.matmul(h, p[self.recurrent])?;
            let zi = tape.slice(gi, 1, 0, w)?;
            let zh = tape.slice(gh, 1, 0, w)?;
            let ri = tape.slice(gi, 1, w, 2 * w)?;
            let rh = tape.slice(gh, 1, w, 2 * w)?;
            let ni = tape.slice(gi, 1, 2 * w, 3 * w)?;
            let nh = tape.slice(gh, 1, 2 * w, 3 * w)?;
            let z = tape.add(zi, zh)?;
            let z = tape.sigmoid(z)?;
            let r = tape.add(ri, rh)?;
            let r = tape.sigmoid(r)?;
            let rn = tape.mul(r, nh)?;
            let n = tape.add(ni, rn)?;
            let n = tape.tanh(n)?;
            // h' = n + z * (h - n)
            let diff = tape.sub(h, n)?;
            let zd = tape.mul(z, diff)?;
            h = tape.add(n, zd)?;
            outputs.push(tape.reshape(h, &[batch, 1, w])?);
        }
        let seq = tape.concat(&outputs)?;
        // concat joins on the last axis: (batch, 1, steps * w) -> (batch, steps, w)
        Ok(tape.reshape(seq, &[batch, steps, w])?)
    }
}
