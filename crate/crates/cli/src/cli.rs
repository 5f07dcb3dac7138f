use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use tse_core::data::Mode;

use crate::commands::{self, ExtractArgs, SynthArgs, TrainArgs};
use crate::config::{keys_help, ConfigSource};

#[derive(Debug, Parser)]
#[command(name = "tse", version, about = "Token-based target speaker extraction pipeline")]
#[command(after_long_help = keys_help())]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// TOML config file; keys as listed below.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.lr=0.001 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Seed for training, model initialisation and k-means.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run mode; also sets model.hybrid.
    #[arg(long, global = true)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic speaker corpus with train and held-out manifests.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        heldout_utterances: usize,
        #[arg(long, default_value_t = 32)]
        heldout_mixtures: usize,
    },
    /// Fit per-layer k-means codebooks on clean WAV or FEAT1 files.
    TrainKmeans {
        /// One file per line; with tab-separated columns the last is the path.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tokenize a WAV or FEAT1 file; with --reference, a mixture in context.
    Tokenize {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (or resume) a model.
    Train {
        /// Utterance list (speaker<TAB>wav) or fixed mixture list.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Extract target tokens from a mixture given a reference.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        mixture: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// TOK1 output.
        #[arg(long)]
        out: PathBuf,
        /// Optional FEAT1 output of the tokens' centroid features.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Score a checkpoint on a fixed mixture manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient check of the tiny model.
    GradCheck,
    /// Fast built-in consistency checks.
    Selftest,
}

/// Outcome of one invocation: text for stdout and whether it succeeded.
pub struct Outcome {
    pub text: String,
    pub ok: bool,
}

fn no_overrides(src: &ConfigSource, what: &str) -> Result<()> {
    if let Some(key) = src.touches_other_than(&[]) {
        anyhow::bail!("{what} takes its config from the checkpoint; remove {key}");
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let g = &cli.global;
    let src = ConfigSource::from_args(g.config.as_deref(), &g.sets, g.seed, g.mode)?;
    let done = |text: String| Ok(Outcome { text, ok: true });
    match cli.command {
        Command::Synth {
            out,
            heldout_utterances,
            heldout_mixtures,
        } => done(commands::synth(
            &src.resolve()?,
            &out,
            &SynthArgs {
                heldout_utterances,
                heldout_mixtures,
            },
        )?),
        Command::TrainKmeans { manifest, out } => done(commands::train_kmeans(&src.resolve()?, &manifest, &out)?),
        Command::Tokenize {
            codebook,
            input,
            reference,
            out,
        } => done(commands::tokenize_cmd(&src.resolve()?, &codebook, &input, reference.as_deref(), &out)?),
        Command::Train {
            manifest,
            codebook,
            out,
            resume,
        } => done(commands::train(
            &src,
            &TrainArgs {
                manifest: &manifest,
                codebook: &codebook,
                out: &out,
                resume: resume.as_deref(),
            },
        )?),
        Command::Extract {
            checkpoint,
            codebook,
            mixture,
            reference,
            out,
            features,
        } => {
            no_overrides(&src, "extract")?;
            done(commands::extract(&ExtractArgs {
                checkpoint: &checkpoint,
                codebook: &codebook,
                mixture: &mixture,
                reference: &reference,
                out: &out,
                features: features.as_deref(),
            })?)
        }
        Command::Eval {
            checkpoint,
            codebook,
            manifest,
            out,
        } => {
            no_overrides(&src, "eval")?;
            let (text, ok) = commands::eval(&checkpoint, &codebook, &manifest, &out)?;
            Ok(Outcome { text, ok })
        }
        Command::GradCheck => {
            let (text, ok) = commands::grad_check(g.seed.unwrap_or(0))?;
            Ok(Outcome { text, ok })
        }
        Command::Selftest => {
            let (text, ok) = commands::selftest()?;
            Ok(Outcome { text, ok })
        }
    }
}
