//! The label lives at one position of a +-1 sequence. A mask that merely
//! encodes the label (one cell at the arg-max for class 0, arg-min for
//! class 1) almost never hits that position; the trained explainer does.
//!
//! cargo run --example signaling -p ibts -- [seed]

use std::time::Instant;

use ibts::classifier::{train_classifier, ClassifierConfig};
use ibts::datagen::gen_signaling;
use ibts::explainer::{signaling_mask, train_explainer, ExplainerConfig};
use ibts::metrics::{saliency_report, DEFAULT_THRESHOLDS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const N_INDEX: usize = 7;
const T: usize = 20;

fn main() -> ibts::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let ds = gen_signaling(N_INDEX, T, 500, 100, 200, seed)?;
    let test = &ds.splits.test;
    let x = ds.batch(test);
    let truth: Vec<u8> = test.iter().flat_map(|&i| ds.truth(i).unwrap().to_vec()).collect();

    let hand = signaling_mask(&x, &ds.labels(test))?;
    let rep = saliency_report(hand.data(), &truth, DEFAULT_THRESHOLDS)?;
    println!("signaling mask: AUR {:.3}  AUPRC {:.3}", rep.aur, rep.auprc);

    let clf = ClassifierConfig {
        seed,
        epochs: 60,
        ..Default::default()
    };
    let (f, r) = train_classifier(&clf, &ds)?;
    println!("classifier test f1 {:.3}", r.test.map_or(f64::NAN, |t| t.f1));

    let cfg = ExplainerConfig {
        seed,
        r: 0.1,
        alpha: 1.0,
        lambda_con: 0.0,
        lr: 5e-3,
        epochs: 300,
        ..Default::default()
    };
    let clock = Instant::now();
    let (expl, _) = train_explainer(&f, &ds, &cfg)?;
    let e = expl.explain(&x, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let rep = saliency_report(e.pi.data(), &truth, DEFAULT_THRESHOLDS)?;
    println!(
        "explainer ({:.0?}): AUPRC {:.3}  AUR {:.3}",
        clock.elapsed(),
        rep.auprc,
        rep.aur
    );

    let mut mean_pi = [0.0; T];
    for row in e.pi.data().chunks(T) {
        for (m, p) in mean_pi.iter_mut().zip(row) {
            *m += p / test.len() as f64;
        }
    }
    let best = (0..T).max_by(|&a, &b| mean_pi[a].total_cmp(&mean_pi[b])).unwrap();
    println!("highest mean pi at t={best} (label index {})", N_INDEX - 1);
    Ok(())
}
