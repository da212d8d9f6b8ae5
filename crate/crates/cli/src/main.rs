use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use diffgap_cli::{resolve, run, Axis, CliError, Command, Sources};

#[derive(Parser)]
#[command(name = "diffgap", version, about = "Conditional diffusion over paired contrastive embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    ckpt: Option<PathBuf>,
    /// Sampling steps for generation and retrieval.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Direction switch interval `m`, or `none`.
    #[arg(long, global = true)]
    interval: Option<String>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the paired embedding corpus.
    GenData,
    /// Train both denoisers with split training.
    Train,
    /// Generate embeddings for the held-out queries.
    Sample,
    /// Raw and generate-then-rank recall for both directions.
    EvalRetrieval,
    /// Cosine and squared error of generated embeddings against partners.
    EvalGen,
    /// Finite-difference check of the denoiser gradients.
    GradCheck,
    /// Sweep sampling steps and/or switch intervals.
    Ablate {
        #[arg(long, value_enum)]
        axis: Option<AxisArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Steps,
    Interval,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    let mut flags = Vec::new();
    let path = |p: PathBuf| p.display().to_string();
    if let Some(v) = cli.seed {
        flags.push(("seed", v.to_string()));
    }
    if let Some(v) = cli.out {
        flags.push(("out", path(v)));
    }
    if let Some(v) = cli.corpus {
        flags.push(("corpus", path(v)));
    }
    if let Some(v) = cli.ckpt {
        flags.push(("ckpt", path(v)));
    }
    if let Some(v) = cli.steps {
        flags.push(("steps", v.to_string()));
    }
    if let Some(v) = cli.interval {
        flags.push(("interval", v));
    }
    let sources = Sources {
        file: cli.config,
        sets: cli.sets,
        flags,
        ..Default::default()
    }
    .with_env();
    let cfg = resolve(&sources)?;
    let command = match cli.command {
        Cmd::GenData => Command::GenData,
        Cmd::Train => Command::Train,
        Cmd::Sample => Command::Sample,
        Cmd::EvalRetrieval => Command::EvalRetrieval,
        Cmd::EvalGen => Command::EvalGen,
        Cmd::GradCheck => Command::GradCheck,
        Cmd::Ablate { axis } => Command::Ablate(axis.map(|a| match a {
            AxisArg::Steps => Axis::Steps,
            AxisArg::Interval => Axis::Interval,
        })),
    };
    run(command, &cfg)
}
