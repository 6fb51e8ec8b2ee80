use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "artiscope", version, about = "Discover and verify training-data artifacts in text classifiers")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, short, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set attribution.k=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for `--set data.train=FILE`.
    #[arg(long, global = true, value_name = "FILE")]
    pub train: Option<PathBuf>,
    /// Shorthand for `--set data.validation=FILE`.
    #[arg(long, global = true, value_name = "FILE")]
    pub validation: Option<PathBuf>,
    /// Shorthand for `--set data.test=FILE`.
    #[arg(long, global = true, value_name = "FILE")]
    pub test: Option<PathBuf>,
    /// Shorthand for `--set output.checkpoint=FILE`.
    #[arg(long, global = true, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Shorthand for `--set output.report_dir=DIR`.
    #[arg(long, global = true, value_name = "DIR")]
    pub report_dir: Option<PathBuf>,
    /// Fail unless the loaded checkpoint has this snapshot hash.
    #[arg(long, global = true, value_name = "HASH")]
    pub expect_snapshot: Option<String>,
    /// Report path; defaults to `<report_dir>/<command>.json`.
    #[arg(long, short, global = true, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model on the train split and write the checkpoint.
    Train,
    /// Plant an artifact into a JSONL corpus.
    Inject(InjectArgs),
    /// Generate a synthetic JSONL corpus.
    Synth(SynthArgs),
    /// Feature attribution (G, IG) on test-side instances.
    Attribute(AttributeArgs),
    /// Rank training instances by influence on each prediction.
    Rank(RankArgs),
    /// Training-feature attribution heatmaps.
    Tfa(TfaArgs),
    /// Aggregate token tables over a split, with the count baselines.
    Aggregate(InstanceArgs),
    /// Logistic-regression discriminator between top and bottom influential instances.
    Discriminate(DiscriminateArgs),
    /// Model-free token statistics over the train split.
    #[command(subcommand)]
    Baseline(BaselineCommand),
    /// Check a candidate artifact by masking or editing.
    #[command(subcommand)]
    Verify(VerifyCommand),
    /// Run the full discovery procedure and write a dossier.
    Discover(DiscoverArgs),
    /// Serve the JSON API.
    Serve(ServeArgs),
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Which instances a command explains.
#[derive(Debug, Args)]
pub struct InstanceArgs {
    /// Configured split to read.
    #[arg(long, value_enum, default_value = "validation", conflicts_with_all = ["input", "text"])]
    pub split: Split,
    /// JSONL file instead of a configured split.
    #[arg(long, value_name = "FILE", conflicts_with = "text")]
    pub input: Option<PathBuf>,
    /// A single ad-hoc input.
    #[arg(long)]
    pub text: Option<String>,
    /// Second segment for a paired ad-hoc input.
    #[arg(long, requires = "text")]
    pub text_b: Option<String>,
    /// Only the instances with these ids. Repeatable.
    #[arg(long = "id", value_name = "ID")]
    pub ids: Vec<String>,
    /// At most this many instances, in file order.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InjectArgs {
    /// Corpus to modify.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Modified corpus.
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
    /// Injection log; defaults to `<output>.log.jsonl`.
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Artifact spec as JSON or TOML, instead of the flags below.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["token", "trigger", "rate"])]
    pub spec: Option<PathBuf>,
    /// insert_token, replace_from_set or conditional_pronoun_swap.
    #[arg(long, default_value = "insert_token")]
    pub kind: String,
    /// Artifact token. Repeatable.
    #[arg(long)]
    pub token: Vec<String>,
    /// Class name, class index, or `all`.
    #[arg(long)]
    pub trigger: Option<String>,
    #[arg(long)]
    pub rate: Option<f64>,
    /// before_random_noun_like, append or random.
    #[arg(long, default_value = "before_random_noun_like")]
    pub position: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Tokens eligible for replacement. Repeatable.
    #[arg(long = "target")]
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    /// Two-class reviews with noisy sentiment words.
    Sentiment,
    /// Premise/hypothesis pairs.
    Pair,
    /// Pairs whose hypothesis shares one token with the premise, labeled non-entailment.
    Overlap,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(value_enum)]
    pub kind: SynthKind,
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
    /// Instances per class.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Prefix for generated ids.
    #[arg(long, default_value = "")]
    pub id_prefix: String,
    /// Sentiment only: fraction of reviews ending in a numeric rating.
    #[arg(long, default_value_t = 0.0)]
    pub rating_rate: f64,
    /// Sentiment only: probability that a sentiment word agrees with the label.
    #[arg(long, default_value_t = 0.75)]
    pub reliability: f64,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[command(flatten)]
    pub instances: InstanceArgs,
    /// G or IG; defaults to the configured feature methods.
    #[arg(long = "method")]
    pub methods: Vec<String>,
    /// Top tokens per instance; defaults to `attribution.k`.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub instances: InstanceArgs,
    /// IF, RIF or EUC.
    #[arg(long, default_value = "RIF")]
    pub method: String,
    /// Entries kept per ranking; 0 keeps all.
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
}

#[derive(Debug, Args)]
pub struct TfaArgs {
    #[command(flatten)]
    pub instances: InstanceArgs,
    /// Defaults to the first configured instance method.
    #[arg(long)]
    pub instance_method: Option<String>,
    /// Defaults to the first configured feature method.
    #[arg(long)]
    pub feature_method: Option<String>,
    /// Training instances per end; defaults to `attribution.heatmap_k`.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DiscriminateArgs {
    #[command(flatten)]
    pub instances: InstanceArgs,
    #[arg(long, default_value = "RIF")]
    pub method: String,
    /// Training instances per end; defaults to `attribution.discriminator_n`.
    #[arg(long)]
    pub n: Option<usize>,
    /// Defaults to `attribution.discriminator_l2`.
    #[arg(long)]
    pub l2: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum BaselineCommand {
    /// Smoothed pointwise mutual information per label.
    Pmi {
        /// Defaults to `attribution.pmi_smoothing`.
        #[arg(long)]
        smoothing: Option<f64>,
    },
    /// Binomial z-statistic per token and label.
    Competency,
}

#[derive(Debug, Subcommand)]
pub enum VerifyCommand {
    /// Mask a token (or random tokens) and count prediction flips.
    Mask(MaskArgs),
    /// Compare predictions before and after an edit.
    Edit(EditArgs),
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    /// Token to mask.
    #[arg(long, required_unless_present = "random", conflicts_with = "random")]
    pub token: Option<String>,
    /// Mask one random token per instance instead.
    #[arg(long)]
    pub random: bool,
    /// Defaults to `attribution.random_trials`.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Defaults to `attribution.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "validation")]
    pub split: Split,
    /// Leave per-instance records out of the report.
    #[arg(long)]
    pub summary: bool,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub original: String,
    #[arg(long)]
    pub edited: String,
    #[arg(long)]
    pub original_b: Option<String>,
    #[arg(long)]
    pub edited_b: Option<String>,
    /// Saliency method for the edited input.
    #[arg(long, default_value = "IG")]
    pub method: String,
}

#[derive(Debug, Args)]
pub struct DiscoverArgs {
    /// Train a fresh model even if the checkpoint exists.
    #[arg(long)]
    pub retrain: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Defaults to `service.host`.
    #[arg(long)]
    pub host: Option<String>,
    /// Defaults to `service.port`.
    #[arg(long)]
    pub port: Option<u16>,
}
