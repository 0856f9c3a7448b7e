use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dxgate_core::mechanism::{NnBackend, OovPolicy, Variant};
use dxgate_core::regressor::FeatureSet;

mod cmd;

/// Word-level dx-privacy sanitization, replication experiments and a
/// utility-gating LLM middleware.
#[derive(Debug, Parser)]
#[command(name = "dxgate", version, about)]
pub struct Cli {
    /// Root seed for randomized subcommands (required when CI is set).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for search and experiments (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log filter, e.g. `info` or `dxgate_core=debug`. Logs go to stderr.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a GloVe text file into the binary model format.
    Convert(ConvertArgs),
    /// Nearest neighbours of a vocabulary token.
    Nn(NnArgs),
    /// Sanitize text (or token ids) read from a file or stdin.
    Sanitize(SanitizeArgs),
    /// Per-word output tallies and vocabulary self-return curves.
    #[command(subcommand)]
    Replicate(ReplicateCommand),
    /// Similarity and unchanged-token curves over a JSONL corpus.
    Sweep(SweepArgs),
    /// Compute features A-D (and E when available) for prompt records.
    Features(FeaturesArgs),
    /// Train the utility regressor on a feature CSV.
    Train(TrainArgs),
    /// Evaluate a trained regressor on a feature CSV.
    Evaluate(EvaluateArgs),
    /// Run the gateway HTTP service.
    Serve(ServeArgs),
    /// Ask a running gateway for a prediction without calling the LLM.
    Assess(RemoteArgs),
    /// Run the full gateway flow on a running gateway.
    Complete(RemoteArgs),
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Model name stored in the file (default: input file stem).
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Exact,
    Ann,
}

impl From<BackendArg> for NnBackend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Exact => NnBackend::Exact,
            BackendArg::Ann => NnBackend::Approximate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    NearestToken,
    RankSampled,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::NearestToken => Variant::NearestToken,
            VariantArg::RankSampled => Variant::RankSampled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OovArg {
    Error,
    Passthrough,
}

impl From<OovArg> for OovPolicy {
    fn from(o: OovArg) -> Self {
        match o {
            OovArg::Error => OovPolicy::Error,
            OovArg::Passthrough => OovPolicy::PassthroughFlagged,
        }
    }
}

/// Index parameters for `--backend ann`.
#[derive(Debug, Clone, Args)]
pub struct AnnArgs {
    #[arg(long, default_value_t = 50)]
    pub trees: usize,
    /// Rows per leaf (default: dimension + 2).
    #[arg(long)]
    pub leaf_size: Option<usize>,
    /// Candidates per query (default: trees * k).
    #[arg(long)]
    pub search_budget: Option<usize>,
    #[arg(long, default_value_t = 0x5eed)]
    pub build_seed: u64,
}

#[derive(Debug, Args)]
pub struct NnArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub token: String,
    #[arg(short, long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "exact")]
    pub backend: BackendArg,
    #[command(flatten)]
    pub ann: AnnArgs,
    #[arg(long, default_value = "-")]
    pub out: String,
}

pub fn positive_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{s:?} is not a number: {e}"))?;
    if v > 0.0 && !v.is_nan() {
        Ok(v)
    } else {
        Err(format!("must be positive, got {s}"))
    }
}

#[derive(Debug, Args)]
pub struct SanitizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_parser = positive_f64)]
    pub epsilon: f64,
    #[arg(long, value_enum, default_value = "nearest-token")]
    pub variant: VariantArg,
    #[arg(long, value_enum, default_value = "exact")]
    pub backend: BackendArg,
    #[arg(long, value_enum, default_value = "error")]
    pub oov: OovArg,
    #[command(flatten)]
    pub ann: AnnArgs,
    /// Input file; stdin when absent or `-`.
    #[arg(long = "in")]
    pub input: Option<String>,
    /// Input is whitespace-separated token ids; output ids only.
    #[arg(long)]
    pub token_ids: bool,
    /// Keep the input's letter case when tokenizing.
    #[arg(long)]
    pub keep_case: bool,
    #[arg(long, default_value = "-")]
    pub out: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum ReplicateCommand {
    /// Sanitize chosen words many times and tally the outputs.
    Words(ReplicateWordsArgs),
    /// Mean self-return frequency over a vocabulary sample.
    Curve(ReplicateCurveArgs),
}

#[derive(Debug, Args)]
pub struct ReplicateWordsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub words: Vec<String>,
    #[arg(long, value_delimiter = ',', required = true, value_parser = positive_f64)]
    pub epsilons: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, value_enum, default_value = "exact")]
    pub backend: BackendArg,
    #[arg(long, value_enum, default_value = "nearest-token")]
    pub variant: VariantArg,
    #[command(flatten)]
    pub ann: AnnArgs,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
    #[arg(long, default_value = "-")]
    pub out: String,
}

#[derive(Debug, Args)]
pub struct ReplicateCurveArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub sample_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "25,35,50", value_parser = positive_f64)]
    pub epsilons: Vec<f64>,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    /// Backends to run; both by default.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "exact,ann")]
    pub backend: Vec<BackendArg>,
    #[arg(long, value_enum, default_value = "nearest-token")]
    pub variant: VariantArg,
    #[command(flatten)]
    pub ann: AnnArgs,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
    #[arg(long, default_value = "-")]
    pub out: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    Mock,
    Http,
    File,
}

/// Text-embedding provider selection.
#[derive(Debug, Clone, Args)]
pub struct ProviderArgs {
    #[arg(long, value_enum, default_value = "mock")]
    pub provider: ProviderKind,
    /// Embeddings endpoint for `--provider http`.
    #[arg(long)]
    pub provider_url: Option<String>,
    #[arg(long, default_value = "all-mpnet-base-v2")]
    pub provider_model: String,
    /// Environment variable holding the provider's bearer token.
    #[arg(long)]
    pub provider_key_env: Option<String>,
    /// JSONL vectors for `--provider file`.
    #[arg(long)]
    pub provider_file: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub mock_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub mock_seed: u64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,50,100,200,500,1000", value_parser = positive_f64)]
    pub epsilons: Vec<f64>,
    #[arg(long, default_value_t = 1024)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 1500)]
    pub sample_size: usize,
    #[arg(long, value_enum, default_value = "exact")]
    pub backend: BackendArg,
    #[arg(long, value_enum, default_value = "nearest-token")]
    pub variant: VariantArg,
    #[command(flatten)]
    pub ann: AnnArgs,
    #[command(flatten)]
    pub provider: ProviderArgs,
    #[arg(long, value_enum, default_value = "json")]
    pub format: FormatArg,
    #[arg(long, default_value = "-")]
    pub out: String,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    /// Embedding model; needed when records lack `sanitized_prompt`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Epsilon for records without their own.
    #[arg(long, value_parser = positive_f64)]
    pub epsilon: Option<f64>,
    #[arg(long, value_enum, default_value = "nearest-token")]
    pub variant: VariantArg,
    #[arg(long, value_enum, default_value = "exact")]
    pub backend: BackendArg,
    #[command(flatten)]
    pub ann: AnnArgs,
    #[command(flatten)]
    pub provider: ProviderArgs,
    /// Chat endpoint producing missing SLM results (summarize task).
    #[arg(long)]
    pub slm_url: Option<String>,
    #[arg(long, default_value = "slm")]
    pub slm_model: String,
    /// JSONL records: id, prompt and optional epsilon, sanitized_prompt,
    /// slm_result, slm_result_sanitized, llm_result_sanitized.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value = "-")]
    pub out: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value = "ABCD", value_parser = parse_feature_set)]
    pub feature_set: FeatureSet,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training report; `-` for stdout.
    #[arg(long)]
    pub report: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.1)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 6)]
    pub max_depth: usize,
    #[arg(long, default_value_t = 20)]
    pub min_samples_leaf: usize,
    #[arg(long, default_value_t = 255)]
    pub max_bins: usize,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
}

pub fn parse_feature_set(s: &str) -> Result<FeatureSet, String> {
    s.parse()
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// A training or evaluation report (`-` for stdin) to compare against.
    #[arg(long)]
    pub baseline: Option<String>,
    #[arg(long, default_value = "-")]
    pub out: String,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured listen address.
    #[arg(long)]
    pub listen: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Summarize,
    Translate,
    Custom,
}

#[derive(Debug, Args)]
pub struct RemoteArgs {
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    pub url: String,
    /// Prompt text; read from `--in` or stdin when absent.
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long = "in")]
    pub input: Option<String>,
    #[arg(long, value_enum, default_value = "summarize")]
    pub task: TaskArg,
    #[arg(long)]
    pub target_language: Option<String>,
    /// Template for `--task custom`, containing `{text}`.
    #[arg(long)]
    pub template: Option<String>,
    #[arg(long, value_parser = positive_f64)]
    pub epsilon: f64,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub correct_prompts: bool,
    #[arg(long, default_value = "-")]
    pub out: String,
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
    cmd::init_logging(&cli.log_level);
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match cmd::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(cmd::CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(cmd::CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
