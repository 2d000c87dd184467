mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcnn_core::corpus::Split;

/// Failures mapped to exit codes: 1 usage, 2 data, 3 numeric.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] mcnn_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(mcnn_core::Error::Config(_)) => 1,
            CliError::Numeric(_) => 3,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

#[derive(Parser)]
#[command(name = "mcnn", version, about = "Matching-CNN human parsing: data, training, inference and evaluation")]
struct Cli {
    /// TOML run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.max_epochs=5`. Repeatable;
    /// applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads; 1 makes every command bit-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        /// Stand-alone spec file; defaults to the config's [synth] section.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the matching network on a corpus.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint up to `train.max_epochs` in total.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Parse one image or a whole split.
    Parse {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "split")]
        image: Option<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
        /// Neighbors per query (overrides `parse.k`).
        #[arg(short = 'K', long = "k")]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted label maps against a corpus.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        truth_corpus: PathBuf,
        #[arg(long)]
        split: Option<Split>,
        /// Where to write metrics.json; defaults to the prediction directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the reduced network's gradients.
    Gradcheck {
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate architectural variants side by side.
    Ablate {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Semicolon-separated variant names; all when omitted.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size the thread pool: {e}")))?;
    }
    let cfg = config::RunConfig::load(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::GenData { spec, out } => commands::gen_data(&cfg, spec.as_deref(), &out),
        Command::Train { corpus, out, resume } => commands::train(&cfg, corpus.as_deref(), &out, resume.as_deref()),
        Command::Parse { corpus, checkpoint, image, split, k, out } => {
            commands::parse(&cfg, corpus.as_deref(), &checkpoint, image.as_deref(), split, k, &out)
        }
        Command::Eval { pred_dir, truth_corpus, split, out } => {
            commands::eval(&cfg, &pred_dir, &truth_corpus, split, out.as_deref())
        }
        Command::Gradcheck { count, eps, tolerance, seed, out } => {
            commands::gradcheck(count, eps, tolerance, seed, out.as_deref())
        }
        Command::Ablate { corpus, variants, out } => {
            commands::ablate(&cfg, corpus.as_deref(), variants.as_deref(), &out)
        }
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
