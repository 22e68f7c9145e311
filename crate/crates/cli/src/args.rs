//! Command-line flags. Every setting is optional here so that a config
//! file can fill the gaps; `config::resolve_*` turns these into concrete
//! settings.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "comorbid", version, about = "Latent disease clusters and patient subgroups from diagnosis counts")]
pub struct Cli {
    /// Key-value settings file (TOML); flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a synthetic cohort with known clusters.
    Generate(GenerateArgs),
    /// Fit age/sex baseline rates and write expected counts.
    Rates(RatesArgs),
    /// Fit LDA or the Poisson Dirichlet model.
    Fit(FitArgs),
    /// Per-patient topic posteriors from a fit.
    Posterior(PosteriorArgs),
    /// Cluster patients on their posteriors for every algorithm and G.
    Cluster(ClusterArgs),
    /// Kaplan-Meier curves and log-rank tests per subgrouping.
    Survive(SurviveArgs),
    /// Demographic and comorbidity report for one subgrouping.
    Eci(EciArgs),
    /// t-SNE map of diseases in topic space.
    Embed(EmbedArgs),
    /// rates, fit, posterior, cluster, survive, eci and embed in one run.
    Pipeline(PipelineArgs),
    /// Re-execute a run from its manifest and compare output digests.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Rates(_) => "rates",
            Command::Fit(_) => "fit",
            Command::Posterior(_) => "posterior",
            Command::Cluster(_) => "cluster",
            Command::Survive(_) => "survive",
            Command::Eci(_) => "eci",
            Command::Embed(_) => "embed",
            Command::Pipeline(_) => "pipeline",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// osteoporosis, dementia or copd.
    #[arg(long)]
    pub preset: Option<String>,
    /// Number of patients.
    #[arg(long)]
    pub m: Option<usize>,
    /// Vocabulary size.
    #[arg(long)]
    pub v: Option<usize>,
    /// Number of clusters.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Draw tokens by the LDA process instead of Poisson counts.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub lda_mode: Option<bool>,
    /// Overwrite a non-empty output directory.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub force: Option<bool>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct RatesArgs {
    /// Cohort directory (diagnoses.csv, demographics.csv, vocabulary.txt).
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Spline degrees of freedom for the age curve.
    #[arg(long)]
    pub df: Option<usize>,
    /// Use this `code,sex,age,rate` table instead of fitting.
    #[arg(long)]
    pub rates_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct SamplerArgs {
    /// lda or pdm.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// PDM likelihood pairs: diagnosed or all-pairs.
    #[arg(long)]
    pub scope: Option<String>,
    /// PDM Metropolis-Hastings proposals per phi row per sweep.
    #[arg(long)]
    pub phi_steps: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct FitArgs {
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory of the `rates` subcommand (PDM only).
    #[arg(long)]
    pub rates: Option<PathBuf>,
    /// Rate table to predict expected counts from (PDM only).
    #[arg(long)]
    pub rates_file: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct PosteriorArgs {
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// Output directory of the `fit` subcommand.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    #[arg(long)]
    pub rates: Option<PathBuf>,
    #[arg(long)]
    pub rates_file: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ClusterArgs {
    /// posterior.csv from the `posterior` subcommand.
    #[arg(long)]
    pub posterior: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated subset of hierarchical,kmeans,birch.
    #[arg(long, value_delimiter = ',')]
    pub algorithms: Option<Vec<String>>,
    #[arg(long)]
    pub g_min: Option<usize>,
    #[arg(long)]
    pub g_max: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fixed BIRCH threshold instead of the data-driven default.
    #[arg(long)]
    pub birch_threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct SurviveArgs {
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// assignments.csv from the `cluster` subcommand.
    #[arg(long)]
    pub assignments: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct EciArgs {
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub assignments: Option<PathBuf>,
    /// Subgrouping to report; by default the one with the smallest
    /// log-rank p-value.
    #[arg(long)]
    pub algorithm: Option<String>,
    #[arg(long)]
    pub g: Option<usize>,
    /// `code,category` table; defaults to the cohort's eci_mapping.csv.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct EmbedArgs {
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub fit: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Defaults to 10 for PDM fits and 20 for LDA fits.
    #[arg(long)]
    pub perplexity: Option<f64>,
    #[arg(long)]
    pub tsne_iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct PipelineArgs {
    /// Existing cohort directory.
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// Generate a synthetic cohort from this preset instead.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rates_file: Option<PathBuf>,
    #[arg(long)]
    pub df: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long, value_delimiter = ',')]
    pub algorithms: Option<Vec<String>>,
    #[arg(long)]
    pub g_min: Option<usize>,
    #[arg(long)]
    pub g_max: Option<usize>,
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    #[arg(long)]
    pub perplexity: Option<f64>,
    #[arg(long)]
    pub tsne_iters: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub force: Option<bool>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// manifest.json of the run to repeat.
    pub manifest: PathBuf,
    /// Write into this directory instead of the original one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
