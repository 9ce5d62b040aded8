//! `polar`: router training, calibration, decode benchmarks and sparsity
//! studies over a toy transformer.

mod commands;
mod inputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "polar", version, about = "Contextual sparsity for batched decoding")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON with optional `model` (TransformerConfig) and `policy` (SparsityPolicy) sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for the kernels; defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// PSWT weight file; a seeded random model is used otherwise.
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// Newline-delimited token ids; sampled from the model otherwise.
    #[arg(long, global = true)]
    pub tokens: Option<PathBuf>,
    /// Directory of `mlp_<layer>.psrt` / `head_<layer>.psrt` router files.
    #[arg(long, global = true)]
    pub routers: Option<PathBuf>,
    /// Per-layer MLP top-k table (`layer\tk\trecall`), overriding the policy's.
    #[arg(long, global = true)]
    pub k_table: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train MLP and head routers on dense activations.
    TrainRouters(TrainArgs),
    /// Choose each layer's MLP top-k to reach a target recall.
    Calibrate(CalibrateArgs),
    /// Time decode steps for dense, MLP-only and polar modes, plus router overhead.
    DecodeBench(BenchArgs),
    /// Activation statistics.
    Stats(StatsArgs),
    /// Perplexity under the configured policy and under dense decoding.
    EvalPpl(EvalArgs),
    /// Perplexity against attention head density.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RouterKinds {
    Mlp,
    Head,
    Both,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 4000)]
    pub train_tokens: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f32,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Heads (or KV groups) labelled active per token; defaults to half.
    #[arg(long)]
    pub head_top_k: Option<usize>,
    #[arg(long, value_enum, default_value_t = RouterKinds::Both)]
    pub kinds: RouterKinds,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long, default_value_t = 10_000)]
    pub calib_tokens: usize,
    #[arg(long, default_value_t = 0.99)]
    pub target: f64,
    /// Starting k; defaults to D/32.
    #[arg(long)]
    pub k0: Option<usize>,
    /// Increment; defaults to D/128.
    #[arg(long)]
    pub step: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value = "1,8,32", value_delimiter = ',')]
    pub batch_sizes: Vec<usize>,
    /// Context length held in the KV cache before timing starts.
    #[arg(long, default_value_t = 32)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    /// Head density for the polar case when the config has no policy.
    #[arg(long, default_value_t = 0.5)]
    pub head_density: f32,
    /// Uniform MLP density used when no k table is available.
    #[arg(long, default_value_t = 0.25)]
    pub mlp_density: f32,
    /// Densities for the router overhead table.
    #[arg(long, default_value = "1,0.5,0.25", value_delimiter = ',')]
    pub overhead_densities: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StatsKind {
    Union,
    Heatmap,
    Importance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TraceSource {
    Model,
    Bernoulli,
    Hot,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(value_enum)]
    pub kind: StatsKind,
    #[arg(long, default_value_t = 2000)]
    pub trace_tokens: usize,
    #[arg(long, default_value = "1,2,4,8,16,32,64", value_delimiter = ',')]
    pub batch_sizes: Vec<usize>,
    /// Where union-study activations come from.
    #[arg(long, value_enum, default_value_t = TraceSource::Model)]
    pub source: TraceSource,
    /// Activation probability for the Bernoulli source.
    #[arg(long, default_value_t = 0.05)]
    pub p: f64,
    /// Heads (or KV groups) flagged per token for the heatmap; defaults to half.
    #[arg(long)]
    pub head_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, default_value_t = 2000)]
    pub eval_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ranking {
    OracleNorm,
    Router,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, default_value = "1,0.75,0.5,0.25", value_delimiter = ',')]
    pub densities: Vec<f32>,
    #[arg(long, value_enum, default_value_t = Ranking::OracleNorm)]
    pub ranking: Ranking,
    #[arg(long, default_value_t = 2000)]
    pub eval_tokens: usize,
}

fn run(cli: Cli) -> inputs::CliResult<()> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    std::fs::create_dir_all(&cli.common.out)?;
    match &cli.command {
        Command::TrainRouters(a) => commands::train_routers(&cli.common, a),
        Command::Calibrate(a) => commands::calibrate(&cli.common, a),
        Command::DecodeBench(a) => commands::decode_bench(&cli.common, a),
        Command::Stats(a) => commands::stats(&cli.common, a),
        Command::EvalPpl(a) => commands::eval_ppl(&cli.common, a),
        Command::Sweep(a) => commands::sweep(&cli.common, a),
    }
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
