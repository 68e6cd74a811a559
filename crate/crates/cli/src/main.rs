mod commands;
mod config;
mod dump;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use commands::Axis;
use config::RunConfig;

/// Line-level pseudo-code generation: preprocessing, training, decoding and scoring.
#[derive(Parser, Debug)]
#[command(name = "deeppseudo", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat key=value config file; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Any config key as KEY=VALUE. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Tokenize and split a corpus, build vocabularies and report statistics.
    Preprocess {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Train a model and write checkpoints plus a per-epoch log.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// self, linear, synthesizer or norm.
        #[arg(long)]
        attention: Option<String>,
        /// Positional encoding: sinusoidal or learned.
        #[arg(long)]
        pe: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from `last.dpsc` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Generate pseudo-code for one line or for every line of a file.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "line")]
        input: Option<PathBuf>,
        #[arg(long)]
        line: Option<String>,
        /// Beam size; 1 is greedy.
        #[arg(long, short = 'k')]
        beam: Option<usize>,
    },
    /// Score a checkpoint on a corpus split, or hypotheses against references.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, short = 'k')]
        beam: Option<usize>,
        #[arg(long, requires = "references")]
        hypotheses: Option<PathBuf>,
        #[arg(long, requires = "hypotheses")]
        references: Option<PathBuf>,
    },
    /// Write per-head attention matrices for one code line.
    DumpAttention {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        line: String,
        /// Layer index; defaults to the last one.
        #[arg(long)]
        layer: Option<usize>,
        /// Decoder cross-attention over the generated output instead of encoder self-attention.
        #[arg(long)]
        cross: bool,
        #[arg(long, short = 'k')]
        beam: Option<usize>,
    },
    /// Train and score every setting of one model-size axis.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Settings run at once, each in its own process.
        #[arg(long, short = 'j', default_value_t = 1)]
        jobs: usize,
        #[arg(long, hide = true)]
        only: Option<String>,
    },
}

fn resolve(common: &Common, overrides: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for pair in &common.set {
        cfg.set_pair(pair).with_context(|| format!("--set {pair}"))?;
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, v).with_context(|| format!("--{key}"))?;
        }
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn path(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DEEPPSEUDO_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("DEEPPSEUDO_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let c = &cli.common;
    match cli.command {
        Cmd::Preprocess { corpus } => commands::preprocess(&resolve(c, &[("corpus", path(&corpus))])?),
        Cmd::Train {
            corpus,
            attention,
            pe,
            epochs,
            resume,
        } => {
            let cfg = resolve(
                c,
                &[
                    ("corpus", path(&corpus)),
                    ("attention", attention),
                    ("positional", pe),
                    ("epochs", epochs.map(|e| e.to_string())),
                ],
            )?;
            commands::train(&cfg, resume)
        }
        Cmd::Generate {
            checkpoint,
            input,
            line,
            beam,
        } => {
            let cfg = resolve(c, &[("checkpoint", path(&checkpoint)), ("beam_size", beam.map(|b| b.to_string()))])?;
            commands::generate(&cfg, input.as_deref(), line.as_deref())
        }
        Cmd::Evaluate {
            checkpoint,
            corpus,
            split,
            beam,
            hypotheses,
            references,
        } => {
            let cfg = resolve(
                c,
                &[
                    ("checkpoint", path(&checkpoint)),
                    ("corpus", path(&corpus)),
                    ("beam_size", beam.map(|b| b.to_string())),
                ],
            )?;
            let files = hypotheses.as_deref().zip(references.as_deref());
            commands::evaluate(&cfg, &split, files)
        }
        Cmd::DumpAttention {
            checkpoint,
            line,
            layer,
            cross,
            beam,
        } => {
            let cfg = resolve(c, &[("checkpoint", path(&checkpoint)), ("beam_size", beam.map(|b| b.to_string()))])?;
            dump::dump_attention(&cfg, &line, layer, cross)
        }
        Cmd::Sweep {
            axis,
            corpus,
            epochs,
            jobs,
            only,
        } => {
            let cfg = resolve(c, &[("corpus", path(&corpus)), ("epochs", epochs.map(|e| e.to_string()))])?;
            commands::sweep(&cfg, axis, jobs, only.as_deref())
        }
    }
}

/// Collapses a multi-line message onto one line.
fn one_line(msg: &str) -> String {
    msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join("; ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                e.exit()
            }
            _ => {
                let text = e.to_string();
                let first = text.lines().next().unwrap_or("invalid arguments");
                eprintln!("error: {}", first.trim_start_matches("error: "));
                return ExitCode::from(2);
            }
        },
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
