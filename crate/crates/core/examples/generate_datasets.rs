//! Generates every synthetic benchmark plus the signaling set, writes each
//! to disk and reads it back.
//!
//! cargo run --example generate_datasets -p ibts -- [out dir] [seed]

use std::path::PathBuf;

use ibts::datagen::{gen_signaling, generate, load_dataset, save_dataset, GeneratorConfig, Kind};

fn main() -> ibts::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "data/examples".into()));
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);

    let mut sets = Vec::new();
    for kind in [Kind::FreqShapes, Kind::SeqCombUv, Kind::SeqCombMv, Kind::LowVar] {
        sets.push(generate(&GeneratorConfig::new(kind, seed))?);
    }
    sets.push(gen_signaling(7, 20, 600, 100, 200, seed)?);

    println!(
        "{:<12} {:>5} {:>4} {:>2} {:>2}  {:>8}  class counts (train)",
        "dataset", "N", "T", "D", "C", "salient"
    );
    for ds in &sets {
        let dir = out.join(&ds.name);
        save_dataset(ds, &dir)?;
        let back = load_dataset(&dir)?;
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);

        let mut counts = vec![0usize; ds.c];
        for &i in &ds.splits.train {
            counts[ds.y[i]] += 1;
        }
        println!(
            "{:<12} {:>5} {:>4} {:>2} {:>2}  {:>8.4}  {:?}",
            ds.name,
            ds.n,
            ds.t,
            ds.d,
            ds.c,
            ds.salient_fraction().unwrap_or(f64::NAN),
            counts
        );
    }
    println!("written under {}", out.display());
    Ok(())
}
