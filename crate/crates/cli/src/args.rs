use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use owseg_core::{ObjectnessVariant, Preset, Protocol};

/// Default output root when `--out` is not given.
pub const OUTPUT_ROOT_ENV: &str = "OWSEG_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "owseg", version, about = "Class-agnostic query-based instance segmentation lab")]
pub struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = "runs")]
    pub output_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic shapes dataset as COCO annotations plus PNG images.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint and metrics log.
    Train(TrainArgs),
    /// Evaluate a trained run, or a results file against COCO ground truth.
    Eval(EvalArgs),
    /// Train and evaluate a grid of variants and emit comparison tables.
    Ablate(AblateArgs),
    /// Collect evaluation reports into a table and a bar chart.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Void,
    Cls,
    Box,
    Mask,
    Fusion,
}

impl From<VariantArg> for ObjectnessVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Void => ObjectnessVariant::Void,
            VariantArg::Cls => ObjectnessVariant::Cls,
            VariantArg::Box => ObjectnessVariant::Box,
            VariantArg::Mask => ObjectnessVariant::Mask,
            VariantArg::Fusion => ObjectnessVariant::Fusion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    #[value(name = "1x")]
    OneX,
    #[value(name = "3x")]
    ThreeX,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::OneX => Preset::OneX,
            PresetArg::ThreeX => Preset::ThreeX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Plain,
    CrossCategory,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Plain => Protocol::Plain,
            ProtocolArg::CrossCategory => Protocol::CrossCategory,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    /// The five objectness variants.
    Variants,
    /// Fusion neck off and on.
    Neck,
    All,
}

/// Overrides applied on top of the config file, in this order.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run config; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Schedule preset: epochs, decay points and augmentation.
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Number of queries.
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long, value_enum)]
    pub protocol: Option<ProtocolArg>,
    /// Single recall budget k.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Seed for parameter init, shuffling and augmentation.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory; defaults to `<output root>/data-seed<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON scene spec; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 64)]
    pub num_images: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Run directory; defaults to `<output root>/train-<variant>-seed<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long, conflicts_with_all = ["annotations", "results"])]
    pub run: Option<PathBuf>,
    /// COCO ground truth, evaluated against `--results` instead of a run.
    #[arg(long, requires = "results")]
    pub annotations: Option<PathBuf>,
    /// COCO results file.
    #[arg(long, requires = "annotations")]
    pub results: Option<PathBuf>,
    /// Base category names when evaluating a results file cross-category.
    #[arg(long, value_delimiter = ',')]
    pub base: Vec<String>,
    #[arg(long, value_enum)]
    pub protocol: Option<ProtocolArg>,
    #[arg(long)]
    pub budget: Option<usize>,
    /// Output directory; defaults to `<run>/eval-<protocol>` or `<output root>/eval`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long, value_enum, default_value = "all")]
    pub suite: SuiteArg,
    /// Suite directory; defaults to `<output root>/ablate`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation directories holding `report_box.json` and `report_mask.json`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Row labels, one per input; defaults to the directory names.
    #[arg(long, value_delimiter = ',')]
    pub labels: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
