//! Fits a two-feature logistic regression with the tape and Adam, checks the
//! loss gradient against finite differences, and draws a straight-through
//! mask from the fitted probabilities.
//!
//! cargo run --example logistic_adam -p gradcore

use gradcore::gradcheck::check_gradients;
use gradcore::{sample_bernoulli_ste, AdamConfig, AdamState, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// mean binary cross-entropy of sigmoid(x w + b) against y
fn loss(tape: &mut Tape, x: Var, y: Var, w: Var, b: Var) -> Result<Var> {
    let z = tape.matmul(x, w)?;
    let z = tape.add(z, b)?;
    let p = tape.sigmoid(z)?;
    let p = tape.clamp(p, 1e-9, 1.0 - 1e-9)?;
    let lp = tape.log(p)?;
    let pos = tape.mul(y, lp)?;
    let one_minus_p = tape.scale(p, -1.0)?;
    let one_minus_p = tape.add_scalar(one_minus_p, 1.0)?;
    let lq = tape.log(one_minus_p)?;
    let one_minus_y = tape.scale(y, -1.0)?;
    let one_minus_y = tape.add_scalar(one_minus_y, 1.0)?;
    let neg = tape.mul(one_minus_y, lq)?;
    let ll = tape.add(pos, neg)?;
    let m = tape.mean(ll)?;
    tape.neg(m)
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 200;
    let mut xs = Vec::with_capacity(2 * n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = rng.random_range(-2.0..2.0);
        let c: f64 = rng.random_range(-2.0..2.0);
        xs.extend([a, c]);
        ys.push(if 1.5 * a - c + 0.3 > 0.0 { 1.0 } else { 0.0 });
    }
    let x = Tensor::new(vec![n, 2], xs)?;
    let y = Tensor::new(vec![n, 1], ys)?;

    let mut params = vec![Tensor::zeros(&[2, 1]), Tensor::zeros(&[1])];
    let check = check_gradients(
        &|t, v| {
            let xv = t.constant(x.clone());
            let yv = t.constant(y.clone());
            loss(t, xv, yv, v[0], v[1])
        },
        &[
            Tensor::new(vec![2, 1], vec![0.4, -0.2])?,
            Tensor::scalar(0.1).reshape(&[1])?,
        ],
        1e-6,
    )?;
    println!(
        "gradient check: {} entries, max relative error {:.2e}",
        check.checked, check.max_rel_error
    );

    let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &params);
    for step in 0..=300 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let w = tape.param(params[0].clone());
        let b = tape.param(params[1].clone());
        let l = loss(&mut tape, xv, yv, w, b)?;
        if step % 100 == 0 {
            println!("step {step:>3}  loss {:.4}", tape.value(l).data()[0]);
        }
        let g = tape.backward(l)?;
        adam.step(&mut params, &[g.wrt(w), g.wrt(b)])?;
    }
    println!("w = {:?}, b = {:?}", params[0].data(), params[1].data());

    let mut tape = Tape::new();
    let pi = tape.param(Tensor::new(vec![1, 6], vec![0.05, 0.2, 0.5, 0.5, 0.8, 0.95])?);
    let (mask, _) = sample_bernoulli_ste(&mut tape, pi, &mut rng)?;
    let total = tape.sum(mask)?;
    let g = tape.backward(total)?;
    println!(
        "mask {:?}, d(sum)/d(pi) {:?}",
        tape.value(mask).data(),
        g.wrt(pi).data()
    );
    Ok(())
}
