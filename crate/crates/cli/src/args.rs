use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::report::OutputFormat;

#[derive(Parser, Debug)]
#[command(name = "perflaw", version, about = "Data-quality, scaling-law and model-sizing pipelines for sequential recommenders")]
pub struct Cli {
    /// Report format on stdout.
    #[arg(long, global = true, value_enum)]
    pub output: Option<OutputFormat>,

    /// Worker thread cap.
    #[arg(long, global = true, env = "PERFLAW_THREADS", value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: Option<u32>,

    /// TOML pipeline config; flags win over its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Users, sequence lengths, tokens and vocabulary of a dataset.
    Stats(DatasetArgs),
    /// Approximate entropy and the derived data scale.
    Apen(ApenArgs),
    /// Fit a loss or performance law to run records.
    #[command(subcommand)]
    Fit(FitCommand),
    /// Best (layers, embedding dim) under a fitted performance law.
    Optimize(OptimizeArgs),
    /// Generate fixtures.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Compare the sequence encoding length with tokens / ApEn.
    VerifyBound(BoundArgs),
    /// Rank fits by their exponents and compare with observed metrics.
    Potential(PotentialArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DatasetArgs {
    /// Sequence file (CSV `user_id,items[,ratings]` or JSONL).
    pub path: Option<PathBuf>,
    /// csv or jsonl; inferred from the extension by default.
    #[arg(long)]
    pub format: Option<String>,
    /// Keep only the last N interactions of each user.
    #[arg(long)]
    pub truncate: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct EntropyArgs {
    /// Window length.
    #[arg(long)]
    pub m: Option<usize>,
    /// pooled or per_sequence_weighted.
    #[arg(long)]
    pub pooling: Option<String>,
    /// ApEn at or below this is degenerate.
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ApenArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    #[command(flatten)]
    pub entropy: EntropyArgs,
    /// Chain sidecar written by `synth markov`; looked up next to the data
    /// file when omitted.
    #[arg(long)]
    pub chain: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BoundArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    #[command(flatten)]
    pub entropy: EntropyArgs,
}

#[derive(Subcommand, Debug)]
pub enum FitCommand {
    Loss(FitLossArgs),
    Perf(FitArgs),
}

#[derive(Args, Debug, Clone)]
pub struct FitArgs {
    /// Runs JSONL file.
    #[arg(long)]
    pub runs: Option<PathBuf>,
    /// Run archive directory; read runs from it when --runs is absent.
    #[arg(long)]
    pub archive: Option<PathBuf>,
    /// Output directory for fits/<name>.json (default: the archive, else ".").
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fit name.
    #[arg(long)]
    pub name: Option<String>,
    /// Only runs of this dataset.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Only runs of this metric, e.g. hr@10.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Multi-start count.
    #[arg(long)]
    pub starts: Option<usize>,
    /// Freeze parameters: name=value, comma separated or repeated.
    #[arg(long, value_delimiter = ',')]
    pub mask: Vec<String>,
    /// Release parameters frozen by default or by the config.
    #[arg(long, value_delimiter = ',')]
    pub free: Vec<String>,
    /// Bounds overrides: name=lo:hi.
    #[arg(long, value_delimiter = ',')]
    pub bounds: Vec<String>,
}

#[derive(Args, Debug)]
pub struct FitLossArgs {
    #[command(flatten)]
    pub common: FitArgs,
    /// full or simplified.
    #[arg(long)]
    pub form: Option<String>,
    /// layers or layers_demb_sq.
    #[arg(long)]
    pub covariate: Option<String>,
    /// Joint fit with one data parameter per dataset.
    #[arg(long)]
    pub data_params: bool,
}

#[derive(Args, Debug)]
pub struct OptimizeArgs {
    /// Fit document.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    /// Archive holding the fit named by --name.
    #[arg(long)]
    pub archive: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
    /// Data scale D′ of the target dataset.
    #[arg(long, allow_negative_numbers = true)]
    pub d_prime: Option<f64>,
    /// Layer range lo:hi.
    #[arg(long)]
    pub n_range: Option<String>,
    /// Embedding range lo:hi.
    #[arg(long)]
    pub d_range: Option<String>,
    /// Budget, e.g. n_times_d:512.
    #[arg(long)]
    pub budget: Option<String>,
    /// auto, exhaustive or coarse-to-fine.
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum SynthCommand {
    Markov(MarkovArgs),
    Runs(RunsArgs),
}

#[derive(Args, Debug)]
pub struct MarkovArgs {
    #[arg(long)]
    pub states: usize,
    /// Row-major transition probabilities.
    #[arg(long, value_delimiter = ',', conflicts_with = "uniform")]
    pub p: Vec<f64>,
    /// Every transition equally likely.
    #[arg(long)]
    pub uniform: bool,
    /// Tokens per user.
    #[arg(long)]
    pub len: usize,
    #[arg(long, default_value_t = 1)]
    pub users: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; .csv writes CSV, anything else JSONL.
    #[arg(long, default_value = "markov.jsonl")]
    pub out: PathBuf,
}

#[derive(ValueEnum, Copy, Clone, Debug, PartialEq, Eq)]
pub enum LawKind {
    Loss,
    Perf,
}

#[derive(Args, Debug)]
pub struct RunsArgs {
    #[arg(long, value_enum)]
    pub law: LawKind,
    /// JSON file with law parameters (a fit document or a flat map).
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Parameter overrides: name=value.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub set: Vec<String>,
    /// Dataset and its D′: id=value. Repeatable.
    #[arg(long = "dataset", required = true)]
    pub datasets: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
    pub n_layers: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128,256,512")]
    pub d_emb: Vec<u32>,
    /// Metric of performance runs.
    #[arg(long, default_value = "hr@10")]
    pub metric: String,
    /// layers or layers_demb_sq, for loss runs.
    #[arg(long)]
    pub covariate: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output JSONL file.
    #[arg(long, default_value = "runs.jsonl", conflicts_with = "archive")]
    pub out: PathBuf,
    /// Append to a run archive instead.
    #[arg(long)]
    pub archive: Option<PathBuf>,
    /// reject, replace or keep-both.
    #[arg(long, default_value = "reject")]
    pub on_duplicate: String,
}

#[derive(Args, Debug)]
pub struct PotentialArgs {
    /// Fit document, optionally labelled: label=path. Repeatable.
    #[arg(long = "fit")]
    pub fits: Vec<String>,
    /// Archive holding the fits named by --name.
    #[arg(long)]
    pub archive: Option<PathBuf>,
    /// Fit name inside --archive. Repeatable.
    #[arg(long = "name")]
    pub names: Vec<String>,
    /// Observed metric: label=value. Repeatable.
    #[arg(long)]
    pub observed: Vec<String>,
    /// CSV with columns label,w3,w4 and optional w1,w2,observed.
    #[arg(long, conflicts_with_all = ["fits", "names"])]
    pub table: Option<PathBuf>,
}
