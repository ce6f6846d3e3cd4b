//! Step orchestration: configs, optimizers, the three training loops and the
//! pipeline that threads checkpoints between them.

pub mod config;
mod log;
pub mod optim;
mod pipeline;
mod steps;

pub use config::{DataConfig, OptimizerKind, PipelineConfig, Profile, SegmentationLossKind, StepConfig, StepKind};
pub use log::{LogRow, RowKind, TrainingLog};
pub use optim::Optimizer;
pub use pipeline::{
    finetune, initial_model, inpainting_model, load_segmentation_model, pretrain, run_options, run_pipeline,
    segmentation_model, LineageEntry, PipelineData, PipelineMode, PipelineOutcome, RunLineage,
};
pub use steps::{run_step1, run_step2, run_step3, RunOptions, StepOutcome};
