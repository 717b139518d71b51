//! Synthetic benchmarks with planted ground-truth saliency, plus the
//! binary dataset format.

mod io;
mod narma;

pub use io::{load_dataset, save_dataset, Manifest, FORMAT_VERSION};
pub use narma::{background, narma_noise, narma_with_inputs};

use gradcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Contiguous train, val, test ranges.
    pub fn contiguous(train: usize, val: usize, test: usize) -> Self {
        Splits {
            train: (0..train).collect(),
            val: (train..train + val).collect(),
            test: (train + val..train + val + test).collect(),
        }
    }
}

/// `N` series of shape `(T, D)`. Labels are held zero-based in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub n: usize,
    pub t: usize,
    pub d: usize,
    pub c: usize,
    pub x: Vec<f32>,
    pub y: Vec<usize>,
    pub q: Option<Vec<u8>>,
    pub splits: Splits,
}

impl Dataset {
    pub fn cells(&self) -> usize {
        self.t * self.d
    }

    pub fn instance(&self, i: usize) -> &[f32] {
        let k = self.cells();
        &self.x[i * k..(i + 1) * k]
    }

    pub fn truth(&self, i: usize) -> Option<&[u8]> {
        let k = self.cells();
        self.q.as_ref().map(|q| &q[i * k..(i + 1) * k])
    }

    /// Stacks the chosen instances into a `(B, T, D)` tensor.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let k = self.cells();
        let mut data = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            data.extend(self.instance(i).iter().map(|&v| v as f64));
        }
        Tensor::new(vec![idx.len().max(1), self.t, self.d], pad_empty(data, k)).expect("dataset batch shape")
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.y[i]).collect()
    }

    /// Fraction of ground-truth cells marked salient over the whole dataset.
    pub fn salient_fraction(&self) -> Option<f64> {
        let q = self.q.as_ref()?;
        if q.is_empty() {
            return Some(0.0);
        }
        Some(q.iter().filter(|&&v| v == 1).count() as f64 / q.len() as f64)
    }

    /// Structural checks shared by generation and loading.
    pub fn validate(&self) -> Result<()> {
        let k = self.cells();
        if self.t == 0 || self.d == 0 {
            return Err(Error::format("T/D", "dimensions must be positive"));
        }
        if self.c < 2 {
            return Err(Error::format("C", "need at least two classes"));
        }
        if self.x.len() != self.n * k {
            return Err(Error::format("X", "length does not match N*T*D"));
        }
        if self.y.len() != self.n {
            return Err(Error::format("Y", "length does not match N"));
        }
        if let Some(bad) = self.y.iter().find(|&&l| l >= self.c) {
            return Err(Error::format("Y", format!("label {} outside 1..={}", bad + 1, self.c)));
        }
        if let Some(q) = &self.q {
            if q.len() != self.n * k {
                return Err(Error::format("Q", "length does not match N*T*D"));
            }
            if q.iter().any(|&v| v > 1) {
                return Err(Error::format("Q", "ground truth must be binary"));
            }
        }
        let mut seen = vec![false; self.n];
        for (name, part) in [
            ("splits.train", &self.splits.train),
            ("splits.val", &self.splits.val),
            ("splits.test", &self.splits.test),
        ] {
            for &i in part {
                if i >= self.n {
                    return Err(Error::format(name, format!("index {i} out of range for N={}", self.n)));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::format(name, format!("index {i} appears in more than one split")));
                }
            }
        }
        Ok(())
    }

    /// Every class must occur in the training split.
    pub fn check_train_classes(&self) -> Result<()> {
        let mut present = vec![false; self.c];
        for &i in &self.splits.train {
            present[self.y[i]] = true;
        }
        match present.iter().position(|p| !p) {
            Some(c) => Err(Error::Dataset(format!("class {} missing from train split", c + 1))),
            None => Ok(()),
        }
    }
}

fn pad_empty(data: Vec<f64>, k: usize) -> Vec<f64> {
    if data.is_empty() {
        vec![0.0; k]
    } else {
        data
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kind {
    #[serde(rename = "freqshapes")]
    FreqShapes,
    #[serde(rename = "seqcomb-uv")]
    SeqCombUv,
    #[serde(rename = "seqcomb-mv")]
    SeqCombMv,
    #[serde(rename = "lowvar")]
    LowVar,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::FreqShapes => "freqshapes",
            Kind::SeqCombUv => "seqcomb-uv",
            Kind::SeqCombMv => "seqcomb-mv",
            Kind::LowVar => "lowvar",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "freqshapes" | "freq-shapes" => Ok(Kind::FreqShapes),
            "seqcomb-uv" | "seq-comb-uv" => Ok(Kind::SeqCombUv),
            "seqcomb-mv" | "seq-comb-mv" => Ok(Kind::SeqCombMv),
            "lowvar" | "low-var" => Ok(Kind::LowVar),
            other => Err(Error::Config(format!("unknown dataset kind '{other}'"))),
        }
    }

    /// `(T, D)` used by the benchmark.
    pub fn dims(self) -> (usize, usize) {
        match self {
            Kind::FreqShapes => (50, 1),
            Kind::SeqCombUv => (200, 1),
            Kind::SeqCombMv => (200, 4),
            Kind::LowVar => (200, 2),
        }
    }

    pub fn default_amplitude(self) -> f64 {
        match self {
            Kind::FreqShapes => 4.0,
            Kind::SeqCombUv | Kind::SeqCombMv => 2.0,
            Kind::LowVar => 1.5,
        }
    }

    /// Spike period pair, ramp window or segment length.
    pub fn default_motif_len(self) -> usize {
        match self {
            Kind::FreqShapes => 10,
            Kind::SeqCombUv | Kind::SeqCombMv => 20,
            Kind::LowVar => 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub kind: Kind,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub t: usize,
    pub d: usize,
    pub seed: u64,
    pub amplitude: f64,
    pub narma_order: usize,
    /// Short spike period (FreqShapes), ramp length (SeqComb) or segment
    /// length (LowVar).
    pub motif_len: usize,
}

impl GeneratorConfig {
    pub fn new(kind: Kind, seed: u64) -> Self {
        let (t, d) = kind.dims();
        GeneratorConfig {
            kind,
            n_train: 500,
            n_val: 100,
            n_test: 200,
            t,
            d,
            seed,
            amplitude: kind.default_amplitude(),
            narma_order: 10,
            motif_len: kind.default_motif_len(),
        }
    }

    pub fn sizes(mut self, train: usize, val: usize, test: usize) -> Self {
        self.n_train = train;
        self.n_val = val;
        self.n_test = test;
        self
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    fn check(&self) -> Result<()> {
        let want_d = match self.kind {
            Kind::FreqShapes | Kind::SeqCombUv => 1,
            Kind::SeqCombMv => 4,
            Kind::LowVar => 2,
        };
        if self.d != want_d {
            return Err(Error::Generator(format!(
                "{} requires D={want_d}, got D={}",
                self.kind.name(),
                self.d
            )));
        }
        if self.motif_len == 0 {
            return Err(Error::Generator("motif_len must be positive".into()));
        }
        if !self.amplitude.is_finite() {
            return Err(Error::Generator("amplitude must be finite".into()));
        }
        if self.n_train < 4 {
            return Err(Error::Generator(
                "need at least 4 training instances to cover every class".into(),
            ));
        }
        Ok(())
    }
}

pub const NUM_CLASSES: usize = 4;

/// Stream for instance `index`: one generator per dataset seed, one stream
/// per instance, so instances are independent of generation order.
pub fn instance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Long FreqShapes period paired with a given short one.
pub fn long_period(short: usize) -> usize {
    short * 17 / 10
}

pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.check()?;
    let n = cfg.total();
    let (t, d) = (cfg.t, cfg.d);
    let mut x = Vec::with_capacity(n * t * d);
    let mut q = Vec::with_capacity(n * t * d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % NUM_CLASSES;
        let mut rng = instance_rng(cfg.seed, i);
        let mut xi = vec![0.0; t * d];
        for ch in 0..d {
            let noise = background(t, cfg.narma_order, &mut rng)?;
            for (s, v) in noise.into_iter().enumerate() {
                xi[s * d + ch] = v;
            }
        }
        let mut qi = vec![0u8; t * d];
        match cfg.kind {
            Kind::FreqShapes => plant_spikes(cfg, class, &mut xi, &mut qi, &mut rng)?,
            Kind::SeqCombUv | Kind::SeqCombMv => plant_ramps(cfg, class, &mut xi, &mut qi, &mut rng)?,
            Kind::LowVar => plant_segment(cfg, class, &mut xi, &mut qi, &mut rng)?,
        }
        x.extend(xi.iter().map(|&v| v as f32));
        q.extend(qi);
        y.push(class);
    }
    let ds = Dataset {
        name: cfg.kind.name().into(),
        n,
        t,
        d,
        c: NUM_CLASSES,
        x,
        y,
        q: Some(q),
        splits: Splits::contiguous(cfg.n_train, cfg.n_val, cfg.n_test),
    };
    ds.validate()?;
    ds.check_train_classes()?;
    Ok(ds)
}

// class bit 0: polarity (0 up, 1 down); bit 1: period (0 short, 1 long)
fn plant_spikes(cfg: &GeneratorConfig, class: usize, x: &mut [f64], q: &mut [u8], rng: &mut ChaCha8Rng) -> Result<()> {
    let long = long_period(cfg.motif_len);
    if cfg.t < 2 * long {
        return Err(Error::Generator(format!(
            "T={} too short for two spike periods of length {long}",
            cfg.t
        )));
    }
    let sign = if class.is_multiple_of(2) { 1.0 } else { -1.0 };
    let period = if class / 2 == 0 { cfg.motif_len } else { long };
    let phase = rng.random_range(0..period);
    for s in (phase..cfg.t).step_by(period) {
        x[s] += sign * cfg.amplitude;
        q[s] = 1;
    }
    Ok(())
}

// class bit 0: increasing ramp present; bit 1: decreasing ramp present
fn plant_ramps(cfg: &GeneratorConfig, class: usize, x: &mut [f64], q: &mut [u8], rng: &mut ChaCha8Rng) -> Result<()> {
    let len = cfg.motif_len;
    if len < 2 {
        return Err(Error::Generator("ramps need motif_len >= 2".into()));
    }
    if cfg.t < 2 * len {
        return Err(Error::Generator(format!(
            "windows cannot be placed disjointly: T={} < 2 x {len}",
            cfg.t
        )));
    }
    let mut placed: Vec<usize> = Vec::new();
    let motifs: Vec<f64> = [(1, 1.0), (2, -1.0)]
        .iter()
        .filter(|(bit, _)| class & bit != 0)
        .map(|&(_, dir)| dir)
        .collect();
    for dir in motifs {
        let start = loop {
            let s = rng.random_range(0..=cfg.t - len);
            if placed.iter().all(|&p| s + len <= p || p + len <= s) {
                break s;
            }
        };
        placed.push(start);
        let ch = if cfg.d > 1 { rng.random_range(0..cfg.d) } else { 0 };
        for j in 0..len {
            let frac = j as f64 / (len - 1) as f64;
            let v = cfg.amplitude * (2.0 * frac - 1.0) * dir;
            x[(start + j) * cfg.d + ch] = v;
            q[(start + j) * cfg.d + ch] = 1;
        }
    }
    Ok(())
}

// class bit 0: offset sign (0 positive); bit 1: channel
fn plant_segment(cfg: &GeneratorConfig, class: usize, x: &mut [f64], q: &mut [u8], rng: &mut ChaCha8Rng) -> Result<()> {
    let len = cfg.motif_len;
    if len > cfg.t {
        return Err(Error::Generator(format!("segment length {len} exceeds T={}", cfg.t)));
    }
    let ch = class / 2;
    let sign = if class.is_multiple_of(2) { 1.0 } else { -1.0 };
    let start = rng.random_range(0..=cfg.t - len);
    for s in start..start + len {
        let cell = s * cfg.d + ch;
        x[cell] = sign * cfg.amplitude + x[cell] / 10f64.sqrt();
        q[cell] = 1;
    }
    Ok(())
}

/// Binary task where only position `n_index` (1-based) matters:
/// `X[t]` uniform on {-1, +1}, label 1 iff `X[n_index] > 0`.
pub fn gen_signaling(n_index: usize, t: usize, train: usize, val: usize, test: usize, seed: u64) -> Result<Dataset> {
    if n_index == 0 || n_index > t {
        return Err(Error::Generator(format!("signal index {n_index} outside 1..={t}")));
    }
    let n = train + val + test;
    let mut x = Vec::with_capacity(n * t);
    let mut y = Vec::with_capacity(n);
    let mut q = vec![0u8; n * t];
    for i in 0..n {
        let mut rng = instance_rng(seed, i);
        let row: Vec<f32> = (0..t).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        y.push(usize::from(row[n_index - 1] > 0.0));
        q[i * t + n_index - 1] = 1;
        x.extend(row);
    }
    let ds = Dataset {
        name: "signaling".into(),
        n,
        t,
        d: 1,
        c: 2,
        x,
        y,
        q: Some(q),
        splits: Splits::contiguous(train, val, test),
    };
    ds.validate()?;
    Ok(ds)
}
