//! Trains a classifier and an explainer on FreqShapes, then scores the
//! learned masks against the planted spikes.
//!
//! cargo run --example explain_freqshapes -p ibts -- [seed] [explainer epochs] [explainer lr]

use std::time::Instant;

use ibts::classifier::{train_classifier, ClassifierConfig};
use ibts::datagen::{generate, GeneratorConfig, Kind};
use ibts::explainer::{train_explainer, ExplainerConfig};
use ibts::metrics::{saliency_report, DEFAULT_THRESHOLDS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ibts::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(50);
    let lr: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5e-3);
    let ds = generate(&GeneratorConfig::new(Kind::FreqShapes, seed))?;

    let clock = Instant::now();
    let (f, rep) = train_classifier(
        &ClassifierConfig {
            seed,
            patch: 5,
            ..Default::default()
        },
        &ds,
    )?;
    println!(
        "classifier: test f1 {:.3} ({:.1?})",
        rep.test.map_or(f64::NAN, |t| t.f1),
        clock.elapsed()
    );

    let cfg = ExplainerConfig {
        seed,
        epochs,
        lr,
        r: 0.1,
        alpha: 3.0,
        lambda_con: 0.0,
        ..Default::default()
    };
    let clock = Instant::now();
    let (expl, history) = train_explainer(&f, &ds, &cfg)?;
    println!("explainer trained in {:.1?}", clock.elapsed());
    for (i, h) in history
        .iter()
        .enumerate()
        .filter(|(i, _)| i % 5 == 0 || *i + 1 == history.len())
    {
        println!(
            "epoch {:>3}  LC {:.4}  M {:.4}  con {:.4}  KL {:.4}  dr {:.4}  total {:.4}",
            i + 1,
            h.l_lc,
            h.l_m,
            h.l_con,
            h.l_kl,
            h.l_dr,
            h.total
        );
    }

    let test = &ds.splits.test;
    let x = ds.batch(test);
    let e = expl.explain(&x, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let truth: Vec<u8> = test.iter().flat_map(|&i| ds.truth(i).unwrap().to_vec()).collect();
    let rep = saliency_report(e.pi.data(), &truth, DEFAULT_THRESHOLDS)?;
    let on: Vec<f64> =
        e.pi.data()
            .iter()
            .zip(&truth)
            .filter(|(_, &t)| t == 1)
            .map(|(p, _)| *p)
            .collect();
    let off: Vec<f64> =
        e.pi.data()
            .iter()
            .zip(&truth)
            .filter(|(_, &t)| t == 0)
            .map(|(p, _)| *p)
            .collect();
    println!(
        "AUPRC {:.4}  AUP {:.4}  AUR {:.4}  mean pi salient {:.3} / background {:.3}",
        rep.auprc,
        rep.aup,
        rep.aur,
        on.iter().sum::<f64>() / on.len() as f64,
        off.iter().sum::<f64>() / off.len() as f64
    );
    Ok(())
}
