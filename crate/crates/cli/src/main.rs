use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod cmd;

/// Query-anchored user embeddings: build a corpus, train, tune, and serve.
///
/// Settings come from built-in defaults, then `--config`, then `--set`
/// and per-command flags (highest precedence). Every command writes its
/// outputs and the resolved config under `<run_dir>/<command>/` unless
/// `--out` says otherwise. QANCHOR_THREADS caps worker threads.
#[derive(Debug, Parser)]
#[command(name = "qanchor", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Top-level seed, copied into every component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Output directory of this command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (profiles, future and QA pairs, labels).
    Synth {
        #[arg(long)]
        users: Option<usize>,
        /// External answer generator URL; the rule-based surrogate otherwise.
        #[arg(long)]
        generator_url: Option<String>,
    },
    /// Contrastive + generative pretraining.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Tune a soft prompt and class prototypes for one scenario.
    Tune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Embed every labeled user through the service and export a CSV.
    Embed {
        #[command(flatten)]
        target: ServiceTarget,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        scenario: Option<String>,
        /// Query text; defaults to the scenario's query.
        #[arg(long)]
        query: Option<String>,
        /// Request the tuned prompt registered for the scenario.
        #[arg(long)]
        tuned: bool,
    },
    /// Linear probes on exported embeddings; optional attention report.
    Probe {
        /// Embedding CSVs; the method name is the part of the file stem
        /// after `embeddings_`.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        scenario: Option<String>,
        /// Write attention.csv for the tuned prompt (needs --checkpoint,
        /// --prompt and --corpus).
        #[arg(long)]
        attention: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        attention_users: usize,
    },
    /// Run the HTTP service until interrupted.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tuned prompt sidecars to register. Repeatable.
        #[arg(long = "prompt")]
        prompts: Vec<PathBuf>,
        #[arg(long)]
        addr: Option<String>,
        #[arg(long)]
        capacity: Option<usize>,
        #[arg(long)]
        no_cache: bool,
    },
    /// Time cached against uncached serving and emit a CSV.
    Bench {
        #[command(flatten)]
        target: ServiceTarget,
        #[arg(long, default_value_t = 128)]
        lp: usize,
        #[arg(long, default_value_t = 8)]
        lq: usize,
        #[arg(long, default_value_t = 8)]
        queries: usize,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, value_enum, default_value_t = CacheMode::Both)]
        cache: CacheMode,
    },
}

/// Where service requests go: a running server, or one started in-process.
#[derive(Debug, Args)]
pub struct ServiceTarget {
    /// Base URL of a running service.
    #[arg(long, conflicts_with_all = ["checkpoint", "prompts"])]
    pub server: Option<String>,
    /// Checkpoint for the in-process service.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Tuned prompt sidecars for the in-process service.
    #[arg(long = "prompt")]
    pub prompts: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CacheMode {
    On,
    Off,
    Both,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match cmd::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
