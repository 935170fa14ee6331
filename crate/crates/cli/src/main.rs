use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use factedit::pipeline::{self, AugmentMethod, PipelineConfig, Stage};

#[derive(Parser)]
#[command(
    name = "factedit",
    version,
    about = "Claim-guided sentence rewriting pipeline"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus splits.
    GenData,
    /// Train one pipeline stage (classifier, masker or generator).
    Train {
        #[arg(long)]
        stage: Stage,
    },
    /// Mask and rewrite sentence/claim pairs.
    Rewrite {
        /// Input corpus records (default: the test split).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output records (default: <out>/rewrites.jsonl).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score rewrites against gold records.
    Eval {
        #[arg(long)]
        rewrites: Option<PathBuf>,
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// Train and score the masker over a grid of sparsity weights.
    SweepLambda,
    /// Add generated AGREE evidence for every DISAGREE pair.
    Augment {
        #[arg(long)]
        input: Option<PathBuf>,
        /// GENERATOR or COPY_CLAIM.
        #[arg(long)]
        method: Option<AugmentMethod>,
    },
    /// Compare classifiers trained with and without augmentation.
    EvalAugmentation {
        #[arg(long)]
        method: Option<AugmentMethod>,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn config(common: &Common) -> factedit::Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> factedit::Result<()> {
    let mut cfg = config(&cli.common)?;
    match cli.command {
        Command::GenData => {
            let r = pipeline::gen_data(&cfg)?;
            println!(
                "wrote {} train, {} dev, {} test pairs to {}",
                r.train.total,
                r.dev.total,
                r.test.total,
                cfg.data_dir().display()
            );
        }
        Command::Train { stage } => {
            pipeline::train(&cfg, stage)?;
            println!(
                "trained {}; report in {}",
                stage.name(),
                cfg.report_dir().display()
            );
        }
        Command::Rewrite { input, output } => {
            let r = pipeline::rewrite(&cfg, input.as_deref(), output.as_deref())?;
            println!(
                "rewrote {} pairs ({} errors, {} AGREE) into {}",
                r.records,
                r.errors,
                r.agree,
                r.output.display()
            );
        }
        Command::Eval { rewrites, gold } => {
            let r = pipeline::eval(&cfg, rewrites.as_deref(), gold.as_deref())?;
            match r.sari {
                Some(s) => println!("SARI {:.4} over {} pairs", s.sari, r.sari_count),
                None => println!("no pairs with gold rewrites"),
            }
        }
        Command::SweepLambda => {
            let r = pipeline::sweep_lambda(&cfg)?;
            println!(
                "swept {} values; tuned λ = {}",
                r.rows.len(),
                r.tuned_lambda
            );
        }
        Command::Augment { input, method } => {
            let r = pipeline::augment(&cfg, input.as_deref(), method)?;
            println!(
                "{} new AGREE pairs, {} failed; wrote {}",
                r.counts.new_agree,
                r.counts.failed,
                r.output.display()
            );
        }
        Command::EvalAugmentation { method } => {
            if let Some(m) = method {
                cfg.augmentation.method = m;
            }
            let r = pipeline::eval_augmentation(&cfg)?;
            println!(
                "symmetric accuracy {:.4} -> {:.4} ({:+.2} points)",
                r.unaugmented_accuracy, r.augmented_accuracy, r.delta_points
            );
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
