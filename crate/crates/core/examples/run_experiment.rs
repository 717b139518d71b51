//! Runs every pipeline stage for one experiment config, in-process, and
//! prints the aggregated reports. Same steps as the `ibts` verbs.
//!
//! cargo run --example run_experiment -p ibts -- [config] [out dir]

use std::path::PathBuf;

use ibts::runner::{
    cmd_diagnose, cmd_evaluate, cmd_gen_data, cmd_train_classifier, cmd_train_explainer, ExperimentConfig,
};

fn main() -> ibts::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = PathBuf::from(args.next().unwrap_or_else(|| "configs/smoke.json".into()));
    let out = args.next().map(PathBuf::from);
    let cfg = ExperimentConfig::load(&path)?.with_overrides(None, None, out)?;

    for d in cmd_gen_data(&cfg)? {
        println!("{d}");
    }
    for (seed, rep) in cmd_train_classifier(&cfg)? {
        println!(
            "seed {seed}: classifier test f1 {:.3}",
            rep.test.map_or(f64::NAN, |t| t.f1)
        );
    }
    for rep in cmd_train_explainer(&cfg)? {
        println!(
            "seed {}: explainer trained, classifier unchanged = {}",
            rep.seed, rep.classifier_unchanged
        );
    }

    let eval = cmd_evaluate(&cfg)?;
    if let Some(s) = &eval.saliency {
        println!(
            "AUPRC {:.3} +- {:.3}  AUP {:.3}  AUR {:.3}",
            s.auprc.mean, s.auprc.std, s.aup.mean, s.aur.mean
        );
    }
    for o in &eval.occlusion {
        println!(
            "occlusion k={:>4}: explainer AUROC {:.3}  random {:.3}",
            o.k, o.explainer_auroc.mean, o.random_auroc.mean
        );
    }
    for s in &eval.substitution {
        println!(
            "top-cell {:?} substitution: explainer acc {:.3}  random {:.3}",
            s.mode, s.explainer_accuracy.mean, s.random_accuracy.mean
        );
    }
    for f in cmd_diagnose(&cfg)?.families {
        println!(
            "{:<12} KL {:.4e}  MMD {:.4}  KDE {:.2}",
            f.family, f.kl_div.mean, f.mmd.mean, f.kde_loglik.mean
        );
    }
    println!("reports in {}", cfg.out.display());
    Ok(())
}
