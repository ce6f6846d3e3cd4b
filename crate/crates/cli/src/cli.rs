use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use roadfill::data::{Split, SubsetLevel};

/// Inpainting pretraining and segmentation fine-tuning for aerial road maps.
#[derive(Debug, Parser)]
#[command(name = "roadfill", version, propagate_version = true)]
pub struct Cli {
    /// Print status as one JSON object on stdout.
    #[arg(long, global = true)]
    pub json: bool,

    /// More log output; repeat for debug level.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dataset tools: synthetic scenes, crop manifests, subsets.
    #[command(subcommand)]
    Data(DataCmd),
    /// Run one training step or the whole pipeline.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Score checkpoints and build result tables and plots.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Mask schedule diagnostics.
    #[command(subcommand)]
    Mask(MaskCmd),
    /// Model inspection.
    #[command(subcommand)]
    Model(ModelCmd),
}

#[derive(Debug, Subcommand)]
pub enum DataCmd {
    /// Generate synthetic road scenes with labels and a manifest.
    MakeSynthetic(MakeSynthetic),
    /// Tile source images into a crop manifest.
    BuildManifest(BuildManifest),
    /// Keep a seeded half or quarter of a manifest's source images.
    Subset(Subset),
}

#[derive(Debug, Args)]
pub struct MakeSynthetic {
    /// Number of training scenes.
    #[arg(long, default_value_t = 256)]
    pub scenes: usize,
    /// Number of validation scenes.
    #[arg(long, default_value_t = 0)]
    pub val_scenes: usize,
    /// Side of each square scene in pixels.
    #[arg(long, default_value_t = 64)]
    pub canvas: usize,
    /// Seed for layouts, styles and noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train on styles A-C and validate on style D.
    #[arg(long)]
    pub holdout: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Layout {
    /// `<id>.png` or `<id>_sat.png` with `<id>_mask.png`.
    Deepglobe,
    /// One folder per city with `<name>_image.png` and `<name>_labels.png`.
    CityOsm,
}

#[derive(Debug, Args)]
pub struct BuildManifest {
    /// Folder of source images.
    #[arg(long, required_unless_present = "placeholders", conflicts_with = "placeholders")]
    pub source_dir: Option<PathBuf>,
    /// Folder layout of --source-dir.
    #[arg(long, value_enum, default_value_t = Layout::Deepglobe)]
    pub layout: Layout,
    /// Use this many imageless placeholder sources instead of a folder.
    #[arg(long)]
    pub placeholders: Option<usize>,
    /// Side of each placeholder source.
    #[arg(long, default_value_t = 1024)]
    pub size: usize,
    /// Crop side in pixels.
    #[arg(long, default_value_t = 512)]
    pub crop: usize,
    /// Overlap between neighbouring crops in pixels.
    #[arg(long, default_value_t = 256)]
    pub overlap: usize,
    /// Split written into every record.
    #[arg(long, value_parser = parse_split, default_value = "train")]
    pub split: Split,
    /// Manifest file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Subset {
    /// Manifest to subsample.
    #[arg(long)]
    pub manifest: PathBuf,
    /// half or quarter (full keeps everything).
    #[arg(long, value_parser = parse_level)]
    pub level: SubsetLevel,
    /// Seed of the source ranking.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Manifest file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum TrainCmd {
    /// Inpainting pretraining on unlabeled images.
    Step1(StepArgs),
    /// Guided inpainting on labelled images, from a step-1 checkpoint.
    Step2(StepArgs),
    /// Segmentation fine-tuning, from a checkpoint or from scratch.
    Step3(StepArgs),
    /// All steps in order, with lineage.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Pipeline config (TOML). Without it the desk profile defaults apply.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set step1.lr=0.02`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run seed; beats the config file and --set.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for checkpoints and logs; beats the config file.
    #[arg(long, env = "ROADFILL_OUT_DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint to start from (step 1 for step2; step 1 or 2 for step3).
    #[arg(long, conflicts_with = "scratch")]
    pub init: Option<PathBuf>,
    /// Step 3 only: start from random weights (the baseline arm).
    #[arg(long)]
    pub scratch: bool,
    /// Continue an interrupted run from its resume checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs and write a resume checkpoint.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Skip guided inpainting (step1 then step3).
    #[arg(long, conflicts_with = "scratch")]
    pub skip_guided: bool,
    /// Step 3 only, from random weights.
    #[arg(long)]
    pub scratch: bool,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// IoU of one segmentation checkpoint on a labelled manifest.
    Evaluate(Evaluate),
    /// Score every row of a matrix spec and write the summary table.
    Matrix(Matrix),
    /// Table, IoU-vs-size plot and mask figure from a summary table.
    Report(Report),
}

#[derive(Debug, Args)]
pub struct Evaluate {
    /// Segmentation checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Labelled manifest to score on.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Probability threshold for single-channel heads.
    #[arg(long, default_value_t = roadfill::evaluation::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Write the per-class report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Matrix {
    /// Matrix spec (TOML); relative paths resolve against its folder.
    #[arg(long)]
    pub spec: PathBuf,
    /// Summary table to write.
    #[arg(long, default_value = "matrix.tsv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Report {
    /// Summary table written by `eval matrix`.
    #[arg(long)]
    pub matrix: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
    /// Epochs shown in the mask figure.
    #[arg(long, value_delimiter = ',', default_values_t = [10, 30, 50])]
    pub mask_epochs: Vec<usize>,
    /// Side of each mask panel.
    #[arg(long, default_value_t = 512)]
    pub mask_size: usize,
    /// Seed of the masks in the figure.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum MaskCmd {
    /// Render masks at several epochs side by side.
    Preview(Preview),
}

#[derive(Debug, Args)]
pub struct Preview {
    /// Epochs to render, left to right.
    #[arg(long, value_delimiter = ',', default_values_t = [10, 30, 50])]
    pub epochs: Vec<usize>,
    /// Side of each panel in pixels.
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    /// Seed of the rendered masks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Schedule file (`epoch count size` per line); defaults to the 512-pixel table.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    /// PNG to write.
    #[arg(long, default_value = "mask_preview.png")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum ModelCmd {
    /// List parameters and the output layer of a checkpoint or a fresh model.
    Describe(Describe),
}

#[derive(Debug, Args)]
pub struct Describe {
    /// Checkpoint to describe; without it a fresh model is built.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Output channels of the fresh model.
    #[arg(long, default_value_t = 1)]
    pub classes: usize,
    /// Width of the first level of the fresh model.
    #[arg(long, default_value_t = 16)]
    pub base: usize,
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: roadfill::Error| e.to_string())
}

fn parse_level(s: &str) -> Result<SubsetLevel, String> {
    s.parse().map_err(|e: roadfill::Error| e.to_string())
}
