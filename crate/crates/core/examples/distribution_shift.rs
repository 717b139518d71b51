//! How far do masked instances drift from the test distribution? Compares
//! zero padding, mean padding, Gaussian reference padding and the
//! conditioner output by KDE log-likelihood, per-cell Gaussian KL and MMD.
//!
//! cargo run --example distribution_shift -p ibts -- [seed]

use gradcore::Tensor;
use ibts::classifier::{train_classifier, ClassifierConfig};
use ibts::datagen::{generate, GeneratorConfig, Kind};
use ibts::explainer::{make_reference, train_explainer, ExplainerConfig};
use ibts::metrics::{kl_divergence_estimate, mmd_rbf, Kde, KDE_COMPONENTS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rows(x: &Tensor) -> Vec<Vec<f64>> {
    let cells = x.numel() / x.shape()[0];
    x.data().chunks(cells).map(<[f64]>::to_vec).collect()
}

fn main() -> ibts::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let ds = generate(&GeneratorConfig::new(Kind::FreqShapes, seed))?;
    let (f, _) = train_classifier(
        &ClassifierConfig {
            seed,
            patch: 5,
            ..Default::default()
        },
        &ds,
    )?;
    let cfg = ExplainerConfig {
        seed,
        r: 0.1,
        alpha: 3.0,
        lambda_con: 0.0,
        lr: 5e-3,
        ..Default::default()
    };
    let (expl, _) = train_explainer(&f, &ds, &cfg)?;

    let x = ds.batch(&ds.splits.test);
    let e = expl.explain(&x, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let b = x.shape()[0];
    let families = [
        ("zero", make_reference(&x, &e.mask, &Tensor::zeros(x.shape()))),
        ("mean", make_reference(&x, &e.mask, &expl.baseline().mean_batch(b))),
        ("gaussian", e.reference.clone()),
        ("conditioned", e.conditioned.clone()),
    ];

    let original = rows(&x);
    let kde = Kde::fit(&rows(&ds.batch(&ds.splits.train)), KDE_COMPONENTS)?;
    println!(
        "{:<12} {:>12} {:>14} {:>10}",
        "family", "kde loglik", "gaussian KL", "MMD"
    );
    for (name, inst) in &families {
        let r = rows(inst);
        println!(
            "{:<12} {:>12.3} {:>14.4e} {:>10.4}",
            name,
            kde.mean_log_likelihood(&r)?,
            kl_divergence_estimate(&original, &r)?,
            mmd_rbf(&original, &r)?
        );
    }
    Ok(())
}
