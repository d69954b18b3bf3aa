//! `coopembed` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use coopembed::ErrorKind;

#[derive(Parser)]
#[command(name = "coopembed", version, about = "Cooperative embeddings for instance, attribute and category retrieval")]
struct Cli {
    /// JSON settings file; flags take precedence over its keys.
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a projector and latent proxies on the train split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the query and gallery splits.
    Eval(EvalArgs),
    /// Rank gallery items for one query image or term.
    Retrieve(RetrieveArgs),
    /// Shortest kNN-graph path between two gallery items.
    Transition(TransitionArgs),
    /// Gallery items of a category ordered from typical to atypical.
    Typicality(TypicalityArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Remove or swap attribute labels of a fraction of train instances.
    Corrupt(CorruptArgs),
}

#[derive(Args)]
pub struct DataArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Feature matrix (CEFV).
    #[arg(long)]
    pub features: PathBuf,
}

#[derive(Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Where to write the checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the per-step loss log (CSV).
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 128]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Base learning rate [default: 1e-4].
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub adam_epsilon: Option<f64>,
    /// Decoupled weight decay on the projector [default: 5e-5].
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Proxy learning rate as a multiple of the base rate [default: 10].
    #[arg(long)]
    pub proxy_lr_multiplier: Option<f64>,
    /// Instance loss weight [default: 1].
    #[arg(long)]
    pub lambda_ins: Option<f64>,
    /// Attribute loss weight [default: 1].
    #[arg(long)]
    pub lambda_attr: Option<f64>,
    /// Category loss weight [default: 1].
    #[arg(long)]
    pub lambda_cat: Option<f64>,
    /// Embedding norm penalty [default: 0.5].
    #[arg(long)]
    pub lambda_reg: Option<f64>,
    /// Ordered-attribute regulariser weight; 0 disables it [default: 1].
    #[arg(long)]
    pub lambda_order: Option<f64>,
    /// Width of the rank proximity kernel [default: 1].
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Width n of each attribute subspace [default: 50].
    #[arg(long)]
    pub subspace_dim: Option<usize>,
    /// Keep instance proxies at their initial values.
    #[arg(long)]
    pub fixed_instance_proxies: bool,
    /// Keep attribute-value proxies at their initial values.
    #[arg(long)]
    pub fixed_attribute_proxies: bool,
    /// Average attribute terms over exhibited attributes instead of all.
    #[arg(long)]
    pub renormalize_missing: bool,
    /// Worker threads; results do not depend on it [default: 1].
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Recall cut-offs, comma separated [default: 1].
    #[arg(long, value_delimiter = ',')]
    pub recall_k: Option<Vec<usize>>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("query").required(true).args(["item", "category", "attribute"])))]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Query by image: any item id of the dataset.
    #[arg(long)]
    pub item: Option<String>,
    /// Query by category name.
    #[arg(long)]
    pub category: Option<String>,
    /// Query by attribute value; needs --value.
    #[arg(long, requires = "value")]
    pub attribute: Option<String>,
    #[arg(long, requires = "attribute")]
    pub value: Option<String>,
    /// Number of results [default: 10].
    #[arg(long)]
    pub top: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("destination").required(true).args(["target", "category", "attribute"])))]
pub struct TransitionArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Gallery item id to start from.
    #[arg(long)]
    pub source: String,
    /// Gallery item id to reach.
    #[arg(long)]
    pub target: Option<String>,
    /// Reach the item nearest to this category's center.
    #[arg(long)]
    pub category: Option<String>,
    /// Reach the item nearest to an attribute value's center; needs --value.
    #[arg(long, requires = "value")]
    pub attribute: Option<String>,
    #[arg(long, requires = "attribute")]
    pub value: Option<String>,
    /// Neighbours per node [default: 5].
    #[arg(long)]
    pub k: Option<usize>,
    /// Build the graph inside one attribute's subspace.
    #[arg(long, value_name = "ATTRIBUTE")]
    pub subspace: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TypicalityArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub category: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory for manifest.json, features.cefv and ground_truth.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Values per attribute, comma separated [default: 5,5,5,5].
    #[arg(long, value_delimiter = ',')]
    pub value_counts: Option<Vec<usize>>,
    /// Attribute with ordered values [default: 0].
    #[arg(long)]
    pub ordered_attribute: Option<usize>,
    /// Make no attribute ordered.
    #[arg(long, conflicts_with = "ordered_attribute")]
    pub no_ordered_attribute: bool,
    #[arg(long)]
    pub categories: Option<usize>,
    #[arg(long)]
    pub train_instances: Option<usize>,
    #[arg(long)]
    pub test_instances: Option<usize>,
    #[arg(long)]
    pub images_per_instance: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub prototype_dim: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub jitter_std: Option<f64>,
    /// Category preference sharpness [default: 5].
    #[arg(long)]
    pub concentration: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct CorruptArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Fraction of train instances to corrupt, in [0, 1].
    #[arg(long)]
    pub fraction: Option<f64>,
    /// absence, swap or both.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for the corrupted manifest and a copy of the features.
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = settings::Settings::load(cli.config.as_deref()).and_then(|s| match cli.command {
        Command::Train(a) => commands::train(a, &s),
        Command::Eval(a) => commands::eval(a, &s),
        Command::Retrieve(a) => commands::retrieve(a, &s),
        Command::Transition(a) => commands::transition(a, &s),
        Command::Typicality(a) => commands::typicality(a, &s),
        Command::Synth(a) => commands::synth(a, &s),
        Command::Corrupt(a) => commands::corrupt(a, &s),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
