//! `itemcf` command-line tool: simulations, item-space generation,
//! doubling-dimension estimation and trace replay.

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod simulate;

/// Error carrying the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const ASSUMPTION: u8 = 4;

    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            code: Self::CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure {
            code: Self::DATA,
            message: message.into(),
        }
    }

    pub fn assumption(message: impl Into<String>) -> Self {
        Failure {
            code: Self::ASSUMPTION,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::data(format!("I/O error: {e}"))
    }
}

#[derive(Parser)]
#[command(name = "itemcf", version, about = "Online item-item collaborative filtering simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an algorithm on an item space over a list of seeds.
    Simulate(SimulateArgs),
    /// Generate an item-space spec and report its assumptions.
    GenSpace(GenSpaceArgs),
    /// Estimate per-item doubling dimensions from a ratings CSV.
    EstimateDd(EstimateDdArgs),
    /// Re-execute the run behind a trace and compare record by record.
    Replay(ReplayArgs),
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Run config JSON; other flags are ignored when given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// random, oracle, item_item or user_user.
    #[arg(long, default_value = "random")]
    pub algo: String,
    /// uniform, cluster, user_clusters, or a path to a measure spec JSON.
    #[arg(long, default_value = "uniform")]
    pub measure: String,
    #[arg(long, default_value_t = 50)]
    pub n_users: usize,
    #[arg(long, default_value_t = 0.1)]
    pub nu: f64,
    /// Doubling dimension given to item-item; defaults to the measure's exact value.
    #[arg(long)]
    pub d: Option<f64>,
    /// Clusters for the generated measures and for user-user.
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Genres for user_clusters.
    #[arg(long)]
    pub genres: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub horizon: u64,
    /// Seeds 0..n.
    #[arg(long, default_value_t = 10, conflicts_with = "seed_list")]
    pub seeds: u64,
    /// Explicit comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seed_list: Option<Vec<u64>>,
    /// Scale preset for item-item: paper or desk.
    #[arg(long, default_value = "paper")]
    pub scale: String,
    /// SIMILAR calls item-item may run at once.
    #[arg(long, default_value_t = 1)]
    pub concurrency: usize,
    #[arg(long)]
    pub stride: Option<u64>,
    #[arg(long, default_value_t = 200)]
    pub bootstrap: usize,
    /// Skip per-seed trace files.
    #[arg(long)]
    pub no_traces: bool,
    /// Fail when some user or item has a like fraction outside [ν, 2ν].
    #[arg(long)]
    pub strict: bool,
    /// Output directory.
    #[arg(long, env = "ITEMCF_OUT_DIR", default_value = "itemcf-out")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GenSpaceArgs {
    /// cluster, user_clusters or uniform.
    #[arg(long, default_value = "cluster")]
    pub kind: String,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = 100)]
    pub n_users: usize,
    #[arg(long, default_value_t = 0.1)]
    pub nu: f64,
    /// Tree depth of the cluster hierarchy.
    #[arg(long, default_value_t = 1)]
    pub depth: u32,
    #[arg(long)]
    pub locality: Option<f64>,
    #[arg(long)]
    pub genres: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the expanded finite mixture instead of the generator parameters.
    #[arg(long)]
    pub materialize: bool,
    /// Samples for the Monte-Carlo check on infinite measures.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long)]
    pub strict: bool,
    /// Directory for `measure.json` and `assumptions.json`.
    #[arg(long, env = "ITEMCF_OUT_DIR", default_value = "itemcf-out")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EstimateDdArgs {
    /// CSV with header `user_id,item_id,rating`.
    #[arg(long)]
    pub ratings: PathBuf,
    /// Per-entry flip noise Δ.
    #[arg(long, default_value_t = 0.0)]
    pub delta: f64,
    /// jester, movielens, above:X or at-least:X.
    #[arg(long, default_value = "above:0")]
    pub binarize: String,
    #[arg(long, default_value_t = 20)]
    pub min_corating: u32,
    /// Radius grid points on [0, 1], or `per-user` for a 1/N grid.
    #[arg(long, default_value = "101")]
    pub grid: String,
    #[arg(long, default_value_t = 0.25)]
    pub bin_width: f64,
    #[arg(long, env = "ITEMCF_OUT_DIR", default_value = "itemcf-out")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ReplayArgs {
    /// Trace CSV written by `simulate`.
    #[arg(long)]
    pub trace: PathBuf,
    /// Trace manifest; defaults to the trace path with a `.json` extension.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => simulate::run(args),
        Command::GenSpace(args) => commands::gen_space(args),
        Command::EstimateDd(args) => commands::estimate_dd(args),
        Command::Replay(args) => commands::replay(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
