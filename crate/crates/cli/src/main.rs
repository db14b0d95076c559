mod commands;
mod report;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use report::Failure;

/// Transversality certificates and SRB diagnostics for skew products
/// T(x, y) = (E x mod 1, C y + f(x)).
#[derive(Parser, Debug)]
#[command(name = "skewcert", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Serialize)]
pub struct Global {
    /// System file (TOML).
    #[arg(long, global = true)]
    pub system: Option<PathBuf>,
    /// Partition file for non-diagonal E.
    #[arg(long, global = true)]
    pub partition: Option<PathBuf>,
    /// Uniform refinements of the canonical partition.
    #[arg(long, global = true, default_value_t = 0)]
    pub refine: u32,
    /// Seed; required by the sampling commands.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for the JSON report and CSV dumps.
    #[arg(long, global = true, env = "SKEWCERT_OUT")]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    #[serde(skip)]
    pub threads: Option<usize>,
    /// Largest word enumeration or pair count per base word.
    #[arg(long, global = true, default_value_t = skewcert::markov::DEFAULT_WORD_CAP)]
    pub word_cap: u64,
    /// Largest sample cloud.
    #[arg(long, global = true, default_value_t = 50_000_000)]
    pub sample_cap: u64,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Derived constants N, J, θ, α₀, K, …
    Constants,
    /// Membership of C in C(d;E).
    CheckCde,
    /// Word counts, optionally listing words or preimage points.
    Words(WordsArgs),
    /// Per-pair certificates and τ(q) for one (q, p).
    Transversality(TransversalityArgs),
    /// Scan q for the transversality condition τ(q) < J^q.
    Tau(TauArgs),
    /// Sample the SRB measure.
    SrbSample(SampleArgs),
    /// |||μ|||_r at a list of radii.
    Seminorm(SeminormArgs),
    /// Semi-norms along r_k = λ̲^{qk}·r0 against the recursion bound.
    MainInequality(MainInequalityArgs),
    /// Product of one-dimensional-fiber systems.
    Product(ProductArgs),
    /// The constants n₀, D₀, κ₀, B and p(q).
    GenericityConstants(GenericityConstantsArgs),
    /// The ν condition.
    NuCheck(NuArgs),
    /// Build and verify the localized bump family.
    Bumps(BumpArgs),
    /// Sampled n-genericity check of the bump family.
    GenericCheck(GenericArgs),
    /// τ(q) and margins over a grid of parameters t.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct WordsArgs {
    #[arg(long)]
    pub n: usize,
    /// Count only words landing in this base word (e.g. 0.2).
    #[arg(long)]
    pub base: Option<String>,
    /// Base point: list I^n(x) with preimage points.
    #[arg(long, value_delimiter = ',')]
    pub x: Option<Vec<f64>>,
    /// List the words (subject to --word-cap).
    #[arg(long)]
    pub list: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct TransversalityArgs {
    #[arg(long)]
    pub q: usize,
    #[arg(long)]
    pub p: usize,
    /// Grid spacing in torus coordinates.
    #[arg(long, default_value_t = 1e-3)]
    pub grid: f64,
    /// Largest number of pair certificates written to CSV.
    #[arg(long, default_value_t = 10_000)]
    pub pairs_limit: usize,
    /// Also report the condition margin.
    #[arg(long)]
    pub margin: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct TauArgs {
    /// Values of q to scan, in order.
    #[arg(long, value_delimiter = ',', required = true)]
    pub q: Vec<usize>,
    /// Fixed base-word length; default p(q).
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    pub grid: f64,
    #[arg(long)]
    pub margin: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMethod {
    Symbolic,
    Orbit,
    Fiber,
}

#[derive(Args, Debug, Serialize)]
pub struct SampleArgs {
    #[arg(long, value_enum, default_value = "symbolic")]
    pub method: SampleMethod,
    /// Backward depth (symbolic, fiber) or burn-in (orbit); default from λ̄.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 1_000_000)]
    pub count: usize,
    /// Stratify the symbolic sampler over this many columns per axis.
    #[arg(long)]
    pub stratify: Option<usize>,
    /// Independent orbit chains.
    #[arg(long, default_value_t = 1000)]
    pub chains: usize,
    /// Columns per axis for the fiber sampler.
    #[arg(long, default_value_t = 64)]
    pub columns: usize,
    #[arg(long, default_value_t = 64)]
    pub torus_bins: usize,
    #[arg(long, default_value_t = 64)]
    pub fiber_bins: usize,
    /// Write the point cloud as CSV (with --out).
    #[arg(long)]
    pub dump_cloud: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct SeminormArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub r: Vec<f64>,
    #[arg(long, default_value_t = 1.0 / 64.0)]
    pub column_width: f64,
    /// Read the cloud from CSV (columns x0.., y0..) instead of sampling.
    #[arg(long)]
    pub cloud: Option<PathBuf>,
    /// Fiber samples per column when sampling.
    #[arg(long, default_value_t = 20_000)]
    pub per_column: usize,
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct MainInequalityArgs {
    #[arg(long)]
    pub q: usize,
    /// Base-word length for τ(q); default p(q).
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub r0: f64,
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub grid: f64,
    #[arg(long, default_value_t = 64)]
    pub columns: usize,
    #[arg(long, default_value_t = 20_000)]
    pub per_column: usize,
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct ProductArgs {
    /// Factor system files (d = 1 each).
    #[arg(long = "factor", required = true)]
    pub factors: Vec<PathBuf>,
    /// Also compute τ(q) for the factors and the product.
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub p: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub grid: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct GenericityConstantsArgs {
    /// Tabulate p(q) for q = 1..=q_max.
    #[arg(long, default_value_t = 10)]
    pub q_max: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct NuArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub nu: Option<usize>,
    /// Search the smallest feasible ν up to this bound.
    #[arg(long, default_value_t = 1000)]
    pub max_nu: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct BumpArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, value_delimiter = ',', required = true)]
    pub x: Vec<f64>,
    /// Default: half the largest admissible value.
    #[arg(long)]
    pub eps0: Option<f64>,
    /// Default: smallest feasible ν.
    #[arg(long)]
    pub nu: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct GenericArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long = "D")]
    pub big_d: usize,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, value_delimiter = ',', required = true)]
    pub x: Vec<f64>,
    #[arg(long)]
    pub eps0: Option<f64>,
    #[arg(long)]
    pub nu: Option<usize>,
    /// Series depth; default n + ν.
    #[arg(long)]
    pub depth: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct SweepArgs {
    /// CSV of parameter vectors, one per line.
    #[arg(long)]
    pub t_grid: PathBuf,
    #[arg(long)]
    pub q: usize,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long, default_value_t = 1e-2)]
    pub grid: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global() {
            eprintln!(
                "{}",
                serde_json::json!({ "error": "Io", "message": e.to_string(), "exit_code": report::EXIT_IO })
            );
            return ExitCode::from(report::EXIT_IO as u8);
        }
    }
    match commands::run(&cli) {
        Ok(text) => {
            let mut out = std::io::stdout().lock();
            if out.write_all(text.as_bytes()).and_then(|_| out.flush()).is_err() {
                return ExitCode::from(report::EXIT_IO as u8);
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.exit_code() as u8)
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}
