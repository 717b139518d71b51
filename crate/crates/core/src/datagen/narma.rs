use rand::Rng;

use crate::error::{Error, Result};

const DIVERGENCE_LIMIT: f64 = 1e6;

/// NARMA-`order` series of length `t` driven by `u ~ U(0, 0.5)`, starting
/// from a zero state. Returns `y_1..y_t`.
pub fn narma_noise<R: Rng + ?Sized>(t: usize, order: usize, rng: &mut R) -> Result<Vec<f64>> {
    let u: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..0.5)).collect();
    narma_with_inputs(&u, order)
}

/// The recurrence with the driving inputs supplied explicitly.
pub fn narma_with_inputs(u: &[f64], order: usize) -> Result<Vec<f64>> {
    let t = u.len();
    if order == 0 || t <= order {
        return Err(Error::Generator(format!(
            "narma needs length > order >= 1 (length {t}, order {order})"
        )));
    }
    // y[0] is the zero initial state; y[s] for s >= 1 is the output.
    let mut y = vec![0.0; t + 1];
    let ui = |s: isize| if s < 0 { 0.0 } else { u[s as usize] };
    for s in 0..t {
        let window: f64 = (0..order).filter(|&i| i <= s).map(|i| y[s - i]).sum();
        let next = 0.3 * y[s] + 0.05 * y[s] * window + 1.5 * ui(s as isize - order as isize + 1) * ui(s as isize) + 0.1;
        if !next.is_finite() || next.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Generator(format!(
                "narma recurrence diverged at step {}; try a smaller order than {order}",
                s + 1
            )));
        }
        y[s + 1] = next;
    }
    y.remove(0);
    Ok(y)
}

const MAX_REDRAWS: usize = 64;

/// Unit-variance background noise: a NARMA series with its start-up
/// transient discarded, then standardised. A diverging draw is discarded and
/// redrawn from the same stream, up to a fixed number of attempts.
pub fn background<R: Rng + ?Sized>(t: usize, order: usize, rng: &mut R) -> Result<Vec<f64>> {
    let burn = 2 * order + 20;
    let mut attempt = 0;
    let raw = loop {
        match narma_noise(t + burn, order, rng) {
            Ok(r) => break r,
            Err(e) if attempt + 1 >= MAX_REDRAWS => return Err(e),
            Err(_) => attempt += 1,
        }
    };
    let tail = &raw[burn..];
    let n = tail.len() as f64;
    let mean = tail.iter().sum::<f64>() / n;
    let var = tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    Ok(tail.iter().map(|v| (v - mean) / sd).collect())
}
