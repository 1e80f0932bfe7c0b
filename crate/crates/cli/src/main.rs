use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use orthohead::harness::{self, HeadKind, RunConfig, WeightsRequest};

#[derive(Parser)]
#[command(
    name = "orthohead",
    version,
    about = "Frozen orthogonal classification heads: build, train, attack"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: runs/<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for attack evaluation and grid cells.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Dense,
    MaxMahalanobis,
}

#[derive(Subcommand)]
enum Command {
    /// Build, verify and export a frozen head.
    Weights {
        #[arg(long, value_enum, default_value = "dense")]
        kind: Kind,
        /// Recursion depth T; the feature dimension is 2^T.
        #[arg(long, conflicts_with = "features")]
        depth: Option<u32>,
        /// Feature dimension P.
        #[arg(long)]
        features: Option<usize>,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 10.0)]
        scale: f64,
    },
    /// Train an encoder against the configured head.
    Train,
    /// Attack a trained checkpoint with the configured attacks.
    Attack {
        /// Directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Accuracy of both heads across feature widths.
    Redundancy,
    /// Train and attack over a grid of scales and alphas.
    Sweep,
    /// Per-class feature-to-center distances of a checkpoint.
    FeatureStats {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let path = common.config.as_deref().context("this command needs --config PATH")?;
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        harness::configure_threads(n)?;
    }
    let out = |name: &str| harness::output_dir(cli.common.out.clone(), name);
    match &cli.command {
        Command::Weights {
            kind,
            depth,
            features,
            classes,
            scale,
        } => {
            let features = match (depth, features) {
                (Some(t), _) => 1usize.checked_shl(*t).context("depth too large")?,
                (None, Some(p)) => *p,
                (None, None) => 256,
            };
            let req = WeightsRequest {
                kind: match kind {
                    Kind::Dense => HeadKind::Dense,
                    Kind::MaxMahalanobis => HeadKind::MaxMahalanobis,
                },
                features,
                classes: *classes,
                scale: *scale,
            };
            let dir = out("weights");
            let (w, report) = harness::cmd_weights(&req, &dir)?;
            println!(
                "{}×{} {:?} head, scale {}",
                w.features(),
                w.classes(),
                w.kind(),
                w.scale()
            );
            println!("{report}");
            println!("wrote {}", dir.display());
            if !report.passed() {
                bail!("verification failed");
            }
        }
        Command::Train => {
            let cfg = load_config(&cli.common)?;
            let dir = out("train");
            let (_, m) = harness::cmd_train(&cfg, &dir)?;
            for e in &m.epochs {
                println!(
                    "epoch {:>3}  lr {:.4}  loss {:.5}  train acc {:.4}",
                    e.epoch, e.lr, e.loss, e.train_accuracy
                );
            }
            println!("clean test accuracy {:.4}", m.clean_accuracy);
            println!("wrote {}", dir.display());
        }
        Command::Attack { checkpoint } => {
            let cfg = load_config(&cli.common)?;
            let dir = out("attack");
            for r in harness::cmd_attack(&cfg, checkpoint, &dir)? {
                println!(
                    "{:<16} eps {:<6} clean {:.4}  robust {:.4}  ({} samples)",
                    r.attack, r.epsilon, r.clean_accuracy, r.robust_accuracy, r.samples
                );
            }
            println!("wrote {}", dir.display());
        }
        Command::Redundancy => {
            let cfg = load_config(&cli.common)?;
            let dir = out("redundancy");
            for r in harness::cmd_redundancy(&cfg, &dir)? {
                println!(
                    "T={:<2} {:<16} train {:.4} ± {:.4}  test {:.4} ± {:.4}",
                    r.depth,
                    format!("{:?}", r.head),
                    r.train_mean,
                    r.train_sd,
                    r.test_mean,
                    r.test_sd
                );
            }
            println!("wrote {}", dir.display());
        }
        Command::Sweep => {
            let cfg = load_config(&cli.common)?;
            let dir = out("sweep");
            for r in harness::cmd_sweep(&cfg, &dir)? {
                println!(
                    "s={:<5} alpha={:<5} clean {:.4}  {} robust {:.4}",
                    r.scale, r.alpha, r.clean_accuracy, r.attack, r.robust_accuracy
                );
            }
            println!("wrote {}", dir.display());
        }
        Command::FeatureStats { checkpoint } => {
            let cfg = load_config(&cli.common)?;
            let dir = out("feature-stats");
            let s = harness::cmd_feature_stats(&cfg, checkpoint, &dir)?;
            println!("mean intra-class distance {:.4}", s.mean_intra);
            println!("min inter-center distance {:.4}", s.min_inter);
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
