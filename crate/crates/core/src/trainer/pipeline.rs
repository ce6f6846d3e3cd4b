//! Threads checkpoints through the three steps and records the lineage.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::{DataConfig, PipelineConfig};
use super::steps::{run_step1, run_step2, run_step3, RunOptions, StepOutcome};
use crate::data::{ChannelStats, Sample};
use crate::error::{Error, Result};
use crate::evaluation::load_manifest_samples;
use crate::model::{
    load_checkpoint, to_inpainting_head, to_segmentation_head, CheckpointBundle, SegmentationModel, StepTag,
    ToyUNet,
};
use crate::rng;

const MODEL_INIT_TAG: u64 = 0x696e_6974;
const INPAINT_HEAD_TAG: u64 = 0x7267_6268;
const SEGMENT_HEAD_TAG: u64 = 0x7365_6768;

/// Which steps run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineMode {
    /// step1 → step2 → step3
    Full,
    /// step1 → step3, the ablation without guided inpainting
    SkipGuided,
    /// step3 only, from random weights
    Scratch,
}

impl PipelineMode {
    pub fn steps(self) -> &'static [StepTag] {
        match self {
            PipelineMode::Full => &[StepTag::Step1, StepTag::Step2, StepTag::Step3],
            PipelineMode::SkipGuided => &[StepTag::Step1, StepTag::Step3],
            PipelineMode::Scratch => &[StepTag::Step3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineageEntry {
    pub step: StepTag,
    pub checkpoint: Option<PathBuf>,
    /// SHA-256 of the checkpoint bytes.
    pub digest: String,
    pub config_digest: String,
}

/// Completed steps in execution order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunLineage {
    entries: Vec<LineageEntry>,
}

impl RunLineage {
    pub fn entries(&self) -> &[LineageEntry] {
        &self.entries
    }

    pub fn steps(&self) -> Vec<StepTag> {
        self.entries.iter().map(|e| e.step).collect()
    }

    /// Appends a step; steps must come in increasing order (skips allowed).
    pub fn push(&mut self, entry: LineageEntry) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if entry.step <= last.step {
                return Err(Error::ContractViolation(format!("{} cannot follow {}", entry.step, last.step)));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# roadfill-lineage v1\nstep\tcheckpoint\tdigest\tconfig_digest\n");
        for e in &self.entries {
            let path = e.checkpoint.as_ref().map_or("-".into(), |p| p.display().to_string());
            let _ = writeln!(out, "{}\t{path}\t{}\t{}", e.step, e.digest, e.config_digest);
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lineage = RunLineage::default();
        for line in text.lines().filter(|l| !l.starts_with('#') && !l.starts_with("step\t") && !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let [step, ckpt, digest, config_digest] = f[..] else {
                return Err(Error::format(path, format!("bad lineage row `{line}`")));
            };
            lineage.push(LineageEntry {
                step: step.parse()?,
                checkpoint: (ckpt != "-").then(|| PathBuf::from(ckpt)),
                digest: digest.to_string(),
                config_digest: config_digest.to_string(),
            })?;
        }
        Ok(lineage)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Samples for a pipeline run. Normalization stats come from the step-1 images.
#[derive(Debug, Clone)]
pub struct PipelineData {
    pub unlabeled: Vec<Sample>,
    pub labeled: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub stats: ChannelStats,
}

impl PipelineData {
    pub fn new(unlabeled: Vec<Sample>, labeled: Vec<Sample>, validation: Vec<Sample>) -> Result<Self> {
        let source = if unlabeled.is_empty() { &labeled } else { &unlabeled };
        let stats = ChannelStats::compute(source.iter().map(|s| &s.image))?;
        Ok(PipelineData {
            unlabeled,
            labeled,
            validation,
            stats,
        })
    }

    /// Loads the manifests named in `data`. Without an unlabeled manifest,
    /// step 1 uses the labelled images; without a labelled one, only step 1
    /// can run.
    pub fn load(data: &DataConfig) -> Result<Self> {
        let labeled = match &data.labeled {
            Some(p) => load_manifest_samples(p)?,
            None if data.unlabeled.is_some() => Vec::new(),
            None => return Err(Error::Config("neither data.labeled nor data.unlabeled is set".into())),
        };
        let unlabeled = match &data.unlabeled {
            Some(p) => load_manifest_samples(p)?,
            None => labeled.clone(),
        };
        let validation = match &data.validation {
            Some(p) => load_manifest_samples(p)?,
            None => Vec::new(),
        };
        Self::new(unlabeled, labeled, validation)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub lineage: RunLineage,
    pub steps: Vec<StepOutcome>,
    /// The segmentation model after step 3.
    pub model: ToyUNet,
}

impl PipelineOutcome {
    pub fn final_metric(&self) -> Option<f64> {
        self.steps.last().and_then(|s| s.history.last().copied().flatten())
    }
}

/// Run options shared by every step of one pipeline run.
pub fn run_options(cfg: &PipelineConfig, data: &PipelineData) -> RunOptions {
    let mut o = RunOptions::new(cfg.seed, data.stats.clone());
    o.out_dir = cfg.out_dir.clone();
    o.threshold = cfg.threshold;
    o.metadata.push(("pipeline_digest".into(), cfg.digest()));
    o
}

fn seed(cfg: &PipelineConfig, tag: u64) -> u64 {
    rng::derive_seed(cfg.seed, &[tag])
}

/// Freshly initialized network with a `num_classes` output layer.
pub fn initial_model(cfg: &PipelineConfig) -> ToyUNet {
    ToyUNet::with_base(3, cfg.num_classes, cfg.base_channels, seed(cfg, MODEL_INIT_TAG))
}

fn entry(outcome: &StepOutcome) -> LineageEntry {
    LineageEntry {
        step: outcome.step,
        checkpoint: outcome.checkpoint.clone(),
        digest: outcome.bundle.digest(),
        config_digest: outcome.bundle.config_digest.clone(),
    }
}

/// The step-1 starting point: a fresh network with an RGB output layer.
pub fn inpainting_model(cfg: &PipelineConfig) -> Result<ToyUNet> {
    to_inpainting_head(initial_model(cfg), seed(cfg, INPAINT_HEAD_TAG))
}

/// Puts the `num_classes` output layer on a trunk. The layer is seeded from
/// the run seed alone, so every arm starts step 3 from the same head and the
/// arms differ only in the trunk.
pub fn segmentation_model(cfg: &PipelineConfig, trunk: ToyUNet) -> Result<ToyUNet> {
    to_segmentation_head(trunk, cfg.num_classes, seed(cfg, SEGMENT_HEAD_TAG))
}

/// Step 1 on the unlabeled images.
pub fn pretrain(cfg: &PipelineConfig, data: &PipelineData) -> Result<StepOutcome> {
    let mut model = inpainting_model(cfg)?;
    run_step1(&cfg.step1, &mut model, &data.unlabeled, &data.validation, &run_options(cfg, data))
}

/// Steps 2 and 3 (or 3 alone) on the labelled images, starting from a step-1
/// bundle unless `mode` is [`PipelineMode::Scratch`].
pub fn finetune(
    cfg: &PipelineConfig,
    mode: PipelineMode,
    step1: Option<&StepOutcome>,
    data: &PipelineData,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let opts = run_options(cfg, data);
    let mut lineage = RunLineage::default();
    let mut steps = Vec::new();
    let mut step3 = cfg.step3.clone();
    let trunk: ToyUNet = match mode {
        PipelineMode::Scratch => initial_model(cfg),
        PipelineMode::Full | PipelineMode::SkipGuided => {
            let s1 = step1.ok_or_else(|| Error::Config("step-1 result required".into()))?;
            let mut model = inpainting_model(cfg)?;
            load_checkpoint(&s1.bundle, &mut model)?;
            lineage.push(entry(s1))?;
            steps.push(s1.clone());
            step3.init_from = s1.checkpoint.clone();
            if mode == PipelineMode::Full {
                let mut step2 = cfg.step2.clone();
                step2.init_from = s1.checkpoint.clone();
                let s2 = run_step2(&step2, &mut model, &data.labeled, &data.validation, &opts)?;
                lineage.push(entry(&s2))?;
                step3.init_from = s2.checkpoint.clone();
                steps.push(s2);
            }
            model
        }
    };
    let mut model = segmentation_model(cfg, trunk)?;
    let s3 = run_step3(&step3, &mut model, &data.labeled, &data.validation, cfg.num_classes, &opts)?;
    lineage.push(entry(&s3))?;
    steps.push(s3);
    if let Some(dir) = &cfg.out_dir {
        lineage.save(&dir.join("lineage.tsv"))?;
    }
    Ok(PipelineOutcome { lineage, steps, model })
}

/// Runs the steps selected by `mode` in order.
pub fn run_pipeline(cfg: &PipelineConfig, mode: PipelineMode, data: &PipelineData) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let step1 = match mode {
        PipelineMode::Scratch => None,
        _ => Some(pretrain(cfg, data)?),
    };
    finetune(cfg, mode, step1.as_ref(), data)
}

/// The segmentation model stored in a finished step-3 bundle.
pub fn load_segmentation_model(bundle: &CheckpointBundle) -> Result<ToyUNet> {
    let model = ToyUNet::from_bundle(bundle)?;
    debug_assert_eq!(model.out_channels(), bundle.head_channels);
    Ok(model)
}
