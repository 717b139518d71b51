use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ibts::runner::{
    cmd_diagnose, cmd_evaluate, cmd_gen_data, cmd_train_classifier, cmd_train_explainer, gen_data_single,
    ExperimentConfig, SEED_ENV,
};
use ibts::Error;

#[derive(Parser)]
#[command(name = "ibts", version, about = "Saliency explanations for time-series classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run a single fold with this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate datasets, either from a config or a single benchmark by kind.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// freqshapes, seqcomb-uv, seqcomb-mv, lowvar or signaling.
        #[arg(long, required_unless_present = "config", conflicts_with = "config")]
        kind: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    TrainClassifier(Common),
    TrainExplainer(Common),
    Evaluate(Common),
    Diagnose(Common),
}

fn load(c: &Common) -> ibts::Result<ExperimentConfig> {
    let env = std::env::var(SEED_ENV).ok();
    let cfg = ExperimentConfig::load(&c.config)?.with_overrides(env.as_deref(), c.seed, c.out.clone())?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> ibts::Result<()> {
    match cli.command {
        Command::GenData {
            config: Some(path),
            seed,
            out,
            ..
        } => {
            let c = Common {
                config: path,
                seed,
                out,
            };
            for s in cmd_gen_data(&load(&c)?)? {
                println!("{s}");
            }
        }
        Command::GenData {
            kind: Some(kind),
            seed,
            out,
            ..
        } => {
            let env = std::env::var(SEED_ENV).ok();
            let seed = match (seed, env) {
                (Some(s), _) => s,
                (None, Some(raw)) => raw
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}='{raw}' is not an unsigned integer")))?,
                (None, None) => 0,
            };
            let out = out.unwrap_or_else(|| PathBuf::from(format!("data/{}-seed{seed}", kind.to_ascii_lowercase())));
            println!("{}", gen_data_single(&kind, seed, &out)?);
        }
        Command::GenData { .. } => unreachable!("clap requires --config or --kind"),
        Command::TrainClassifier(c) => {
            for (seed, r) in cmd_train_classifier(&load(&c)?)? {
                let best = &r.history[r.best_epoch - 1];
                print!("seed {seed}: best epoch {} (val F1 {:.4})", r.best_epoch, best.val_f1);
                match r.test {
                    Some(t) => println!(", test F1 {:.4} AUROC {:.4}", t.f1, t.auroc),
                    None => println!(),
                }
            }
        }
        Command::TrainExplainer(c) => {
            for r in cmd_train_explainer(&load(&c)?)? {
                if let Some(h) = r.history.last() {
                    println!(
                        "seed {}: L_LC {:.4} L_M {:.4} L_KL {:.4} L_dr {:.4} total {:.4}",
                        r.seed, h.l_lc, h.l_m, h.l_kl, h.l_dr, h.total
                    );
                }
            }
        }
        Command::Evaluate(c) => {
            let cfg = load(&c)?;
            let r = cmd_evaluate(&cfg)?;
            if let Some(s) = &r.saliency {
                println!(
                    "AUPRC {:.4} ± {:.4}  AUP {:.4} ± {:.4}  AUR {:.4} ± {:.4}",
                    s.auprc.mean, s.auprc.std, s.aup.mean, s.aup.std, s.aur.mean, s.aur.std
                );
            }
            for o in &r.occlusion {
                println!(
                    "k={:>4}: AUROC explainer {:.4} random {:.4}",
                    o.k, o.explainer_auroc.mean, o.random_auroc.mean
                );
            }
            for s in &r.substitution {
                println!(
                    "top-substitution {:?}: accuracy explainer {:.4} random {:.4}",
                    s.mode, s.explainer_accuracy.mean, s.random_accuracy.mean
                );
            }
            println!("reports in {}", cfg.out.display());
        }
        Command::Diagnose(c) => {
            let cfg = load(&c)?;
            let r = cmd_diagnose(&cfg)?;
            println!("{:<12} {:>12} {:>10} {:>10}", "family", "KDE", "KL", "MMD");
            for f in &r.families {
                println!(
                    "{:<12} {:>12.4} {:>10.4} {:>10.4}",
                    f.family, f.kde_loglik.mean, f.kl_div.mean, f.mmd.mean
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}
