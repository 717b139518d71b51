//! Trains the attention classifier (5-step patches) on FreqShapes and
//! prints its test scores.
//!
//! cargo run --example train_classifier -p ibts -- [seed]

use std::time::Instant;

use ibts::classifier::{train_classifier, ClassifierConfig};
use ibts::datagen::{generate, GeneratorConfig, Kind};

fn main() -> ibts::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let ds = generate(&GeneratorConfig::new(Kind::FreqShapes, seed))?;
    let cfg = ClassifierConfig {
        seed,
        patch: 5,
        ..ClassifierConfig::default()
    };
    let started = Instant::now();
    let (model, report) = train_classifier(&cfg, &ds)?;
    println!("trained in {:.1?}, best epoch {}", started.elapsed(), report.best_epoch);
    for rec in report.history.iter().step_by(10) {
        println!("epoch {:>3}  loss {:.4}  val f1 {:.3}", rec.epoch, rec.loss, rec.val_f1);
    }
    if let Some(t) = report.test {
        println!(
            "test  f1 {:.4}  acc {:.4}  auroc {:.4}  auprc {:.4}",
            t.f1, t.accuracy, t.auroc, t.auprc
        );
    }
    println!(
        "{} parameter tensors, frozen = {}",
        model.params().len(),
        model.is_frozen()
    );
    Ok(())
}
