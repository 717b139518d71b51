//! Occlusion and top-cell substitution on FreqShapes: explainer scores
//! against uniform random scores.
//!
//! cargo run --example faithfulness -p ibts -- [seed]

use ibts::classifier::{train_classifier, ClassifierConfig};
use ibts::datagen::{generate, GeneratorConfig, Kind};
use ibts::explainer::{train_explainer, ExplainerConfig};
use ibts::metrics::{occlusion_curve, random_scores, score_model, top_substitution, Substitution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

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

    let test = &ds.splits.test;
    let x = ds.batch(test);
    let labels = ds.labels(test);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pi = expl.explain(&x, &mut rng)?.pi;
    let random = random_scores(x.shape(), &mut rng);
    let clean = score_model(&f, &x, &labels)?;
    println!("clean: AUROC {:.3}  accuracy {:.3}", clean.auroc, clean.accuracy);

    let ks = [25.0, 50.0, 75.0, 90.0];
    let base = expl.baseline();
    let by_pi = occlusion_curve(&f, &x, &labels, &pi, &ks, base, &mut ChaCha8Rng::seed_from_u64(1))?;
    let by_rand = occlusion_curve(&f, &x, &labels, &random, &ks, base, &mut ChaCha8Rng::seed_from_u64(1))?;
    println!("occlude bottom k%   explainer AUROC   random AUROC");
    for (a, b) in by_pi.iter().zip(&by_rand) {
        println!("{:>17}   {:>15.3}   {:>12.3}", a.k, a.auroc, b.auroc);
    }

    println!("replace top 10%     explainer acc     random acc");
    for mode in [Substitution::Mean, Substitution::Zero] {
        let a = top_substitution(&f, &x, &labels, &pi, 0.1, mode, base)?;
        let b = top_substitution(&f, &x, &labels, &random, 0.1, mode, base)?;
        println!(
            "{:>17}   {:>15.3}   {:>12.3}",
            format!("{mode:?}"),
            a.accuracy,
            b.accuracy
        );
    }
    Ok(())
}
