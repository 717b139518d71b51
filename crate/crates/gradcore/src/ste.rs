//! Straight-through Bernoulli sampling.

use rand::Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Uniform(0, 1) draws shaped like `shape`, in row-major order.
pub fn uniform_like<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random::<f64>())
}

/// Samples a binary mask `M[i] = 1[u[i] < pi[i]]` with fresh uniforms and
/// records it with an identity backward. Returns the mask and the draws used,
/// so callers can replay the exact same mask.
pub fn sample_bernoulli_ste<R: Rng + ?Sized>(tape: &mut Tape, pi: Var, rng: &mut R) -> Result<(Var, Tensor)> {
    let u = uniform_like(tape.shape(pi), rng);
    let mask = tape.bernoulli_ste(pi, &u)?;
    Ok((mask, u))
}
