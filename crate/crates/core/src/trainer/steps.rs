//! The per-step training loops.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::config::{StepConfig, StepKind};
use super::log::{LogRow, RowKind, TrainingLog};
use super::optim::{clip_grad_norm, Optimizer};
use crate::data::{normalize, ChannelStats, Sample, Transform};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, NORMALIZATION_KEY};
use crate::losses::{inpaint_loss, segmentation_loss, LossReport};
use crate::masking::{apply_mask, generate_mask, masked_fraction, sample_mask_seed, MaskSpec};
use crate::model::{CheckpointBundle, StepTag, Tensor, TrainableModel, RGB_CHANNELS};
use crate::plane::{BinaryMask, ClassMap, ImagePlane};
use crate::rng;

const AUGMENT_TAG: u64 = 0x6175_6720;
const SHUFFLE_TAG: u64 = 0x7368_7566;
/// Offset added to the step number for validation mask seeds.
const VALIDATION_STEP_OFFSET: u64 = 100;
/// Samples in the held-out reconstruction batch.
const VALIDATION_BATCH: usize = 8;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: u64,
    pub stats: ChannelStats,
    /// Where checkpoints, logs and diagnostics go; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    pub threshold: f64,
    /// Continue from a checkpoint written by an earlier, interrupted run.
    pub resume: Option<CheckpointBundle>,
    /// Stop after this epoch count and write a resumable checkpoint.
    pub stop_after: Option<usize>,
    /// Extra metadata written into every checkpoint.
    pub metadata: Vec<(String, String)>,
}

impl RunOptions {
    pub fn new(seed: u64, stats: ChannelStats) -> Self {
        RunOptions {
            seed,
            stats,
            out_dir: None,
            threshold: 0.5,
            resume: None,
            stop_after: None,
            metadata: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub step: StepTag,
    /// Final parameters plus optimizer state and metadata.
    pub bundle: CheckpointBundle,
    pub checkpoint: Option<PathBuf>,
    pub log: TrainingLog,
    /// Validation metric per epoch run in this call.
    pub history: Vec<Option<f64>>,
    pub warnings: Vec<String>,
    /// Epochs finished, counting any resumed ones.
    pub completed_epochs: usize,
}

impl StepOutcome {
    pub fn finished(&self, config: &StepConfig) -> bool {
        self.completed_epochs >= config.epochs
    }
}

fn step_number(kind: StepKind) -> u64 {
    match kind {
        StepKind::Inpaint => 1,
        StepKind::GuidedInpaint => 2,
        StepKind::Segmentation => 3,
    }
}

/// One prepared training example.
struct Prepared {
    input: ImagePlane,
    target: ImagePlane,
    mask: Option<BinaryMask>,
    road: Option<BinaryMask>,
    label: Option<ClassMap>,
    mask_seed: u64,
}

struct Ctx<'a> {
    config: &'a StepConfig,
    kind: StepKind,
    opts: &'a RunOptions,
}

impl Ctx<'_> {
    fn tag(&self) -> StepTag {
        self.kind.tag()
    }

    fn cluster_spec(&self, epoch: usize) -> (usize, usize) {
        let schedule = self.config.mask_schedule.as_ref().expect("validated");
        match self.kind {
            // fixed at the end-of-schedule values
            StepKind::GuidedInpaint => {
                let last = schedule.last();
                (last.cluster_count, last.cluster_size)
            }
            _ => schedule.at(epoch),
        }
    }

    fn prepare(&self, sample: &Sample, index: usize, epoch: usize, mask_step: u64, augment: bool) -> Result<Prepared> {
        let step = step_number(self.kind);
        let (image, label) = if augment {
            let t = Transform::sample(rng::derive_seed(self.opts.seed, &[AUGMENT_TAG, step, epoch as u64, index as u64]));
            (t.apply_plane(&sample.image), sample.label.as_ref().map(|l| t.apply_classes(l)))
        } else {
            (sample.image.clone(), sample.label.clone())
        };
        let x = normalize(&image, &self.opts.stats)?;
        let mask_seed = sample_mask_seed(self.opts.seed, mask_step, epoch, index);
        match self.kind {
            StepKind::Segmentation => {
                let label = label.ok_or_else(|| Error::MissingLabel(sample.id.clone()))?;
                Ok(Prepared {
                    input: x.clone(),
                    target: x,
                    mask: None,
                    road: None,
                    label: Some(label),
                    mask_seed,
                })
            }
            StepKind::Inpaint | StepKind::GuidedInpaint => {
                let (count, size) = self.cluster_spec(epoch);
                let mask = generate_mask(x.height(), x.width(), &MaskSpec::new(count, size, mask_seed))?;
                let road = match self.kind {
                    StepKind::GuidedInpaint => Some(
                        label
                            .as_ref()
                            .ok_or_else(|| Error::MissingLabel(sample.id.clone()))?
                            .to_mask(1),
                    ),
                    _ => None,
                };
                Ok(Prepared {
                    input: apply_mask(&x, &mask)?,
                    target: x,
                    mask: Some(mask),
                    road,
                    label: None,
                    mask_seed,
                })
            }
        }
    }

    /// Loss of one sample and, when `grad` is given, its gradient.
    fn loss(&self, out: &ImagePlane, p: &Prepared, grad: Option<&mut ImagePlane>) -> Result<LossReport> {
        let report = match self.kind {
            StepKind::Segmentation => {
                let l = segmentation_loss(out, p.label.as_ref().expect("prepared label"), grad)?;
                LossReport {
                    l_id: f64::NAN,
                    l_fill: f64::NAN,
                    l_total: l,
                    masked_pixel_count: 0,
                    road_pixel_count: None,
                }
            }
            _ => inpaint_loss(
                out,
                &p.target,
                p.mask.as_ref().expect("prepared mask"),
                p.road.as_ref(),
                &self.config.loss_weights,
                grad,
            )?,
        };
        Ok(report)
    }
}

fn scale_plane(p: &mut ImagePlane, s: f64) {
    p.data_mut().iter_mut().for_each(|v| *v *= s);
}

fn write_diagnostic(dir: &Path, tag: StepTag, epoch: usize, batch: usize, mask_seed: u64) {
    let path = dir.join(format!("{tag}_nonfinite.txt"));
    let _ = std::fs::create_dir_all(dir);
    let _ = std::fs::write(path, format!("step={tag}\nepoch={epoch}\nbatch={batch}\nmask_seed={mask_seed}\n"));
}

fn bundle_for<M: TrainableModel>(
    model: &M,
    ctx: &Ctx,
    optimizer: &Optimizer,
    completed_epochs: usize,
) -> Result<CheckpointBundle> {
    let mut b = CheckpointBundle::from_model(model, ctx.tag(), &ctx.config.digest())?;
    b.parameters.extend(optimizer.state_tensors());
    b.metadata.insert("epoch".into(), completed_epochs.to_string());
    b.metadata.insert("optimizer_steps".into(), optimizer.steps().to_string());
    b.metadata.insert("seed".into(), ctx.opts.seed.to_string());
    b.metadata.insert(NORMALIZATION_KEY.into(), ctx.opts.stats.to_string());
    for (k, v) in &ctx.opts.metadata {
        b.metadata.insert(k.clone(), v.clone());
    }
    Ok(b)
}

fn validation_metric<M: TrainableModel>(ctx: &Ctx, model: &M, val: &[Sample], epoch: usize) -> Result<Option<f64>> {
    match ctx.kind {
        StepKind::Segmentation => {
            if val.is_empty() {
                return Ok(None);
            }
            Ok(evaluate(model, val, &ctx.opts.stats, ctx.opts.threshold)?.mean_iou())
        }
        _ => {
            let held: Vec<&Sample> = val
                .iter()
                .filter(|s| ctx.kind == StepKind::Inpaint || s.label.is_some())
                .take(VALIDATION_BATCH)
                .collect();
            if held.is_empty() {
                return Ok(None);
            }
            let mask_step = step_number(ctx.kind) + VALIDATION_STEP_OFFSET;
            let prepared = held
                .iter()
                .enumerate()
                .map(|(i, s)| ctx.prepare(s, i, epoch, mask_step, false))
                .collect::<Result<Vec<_>>>()?;
            let input = Tensor::from_planes(&prepared.iter().map(|p| &p.input).collect::<Vec<_>>())?;
            let out = model.forward(&input).to_planes();
            let total: f64 = prepared
                .iter()
                .zip(&out)
                .map(|(p, o)| ctx.loss(o, p, None).map(|r| r.l_total))
                .sum::<Result<f64>>()?;
            Ok(Some(total / prepared.len() as f64))
        }
    }
}

fn train<M: TrainableModel>(
    config: &StepConfig,
    kind: StepKind,
    model: &mut M,
    train: &[Sample],
    val: &[Sample],
    opts: &RunOptions,
) -> Result<StepOutcome> {
    config.validate()?;
    if config.step != kind {
        return Err(Error::Config(format!("config is for {:?}, not {kind:?}", config.step)));
    }
    if train.is_empty() {
        return Err(Error::EmptyInput("no training samples".into()));
    }
    let ctx = Ctx { config, kind, opts };
    let tag = ctx.tag();
    let mut warnings = Vec::new();
    if kind != StepKind::Inpaint {
        if let Some(s) = train.iter().find(|s| s.label.is_none()) {
            return Err(Error::MissingLabel(s.id.clone()));
        }
    }
    if kind == StepKind::GuidedInpaint
        && train
            .iter()
            .all(|s| s.label.as_ref().is_some_and(|l| l.classes().iter().all(|&c| c != 1)))
    {
        let w = "no road pixels in any label: guided loss is identically zero".to_string();
        log::warn!("{w}");
        warnings.push(w);
    }

    let mut optimizer = Optimizer::new(config);
    let mut start = 0;
    if let Some(bundle) = &opts.resume {
        if bundle.step_tag != tag {
            return Err(Error::Config(format!("resume checkpoint is {}, not {tag}", bundle.step_tag)));
        }
        crate::model::load_checkpoint(bundle, model)?;
        let meta = |k: &str| -> Result<u64> {
            bundle
                .metadata
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::CorruptState(format!("resume checkpoint lacks `{k}`")))
        };
        start = meta("epoch")? as usize;
        optimizer.restore(&bundle.parameters, meta("optimizer_steps")?)?;
    }
    let end = opts.stop_after.map_or(config.epochs, |s| s.min(config.epochs)).max(start);

    let step = step_number(kind);
    let mut log = TrainingLog::default();
    let mut history = Vec::new();
    let mut checkpoint = None;
    let save = |b: &CheckpointBundle, name: &str| -> Result<Option<PathBuf>> {
        match &opts.out_dir {
            Some(dir) => {
                let path = dir.join(name);
                b.save(&path)?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    };

    for epoch in start..end {
        let lr = config.lr_at(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(opts.seed, &[SHUFFLE_TAG, step, epoch as u64]));
        let mut epoch_reports = Vec::new();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let prepared = chunk
                .iter()
                .map(|&i| ctx.prepare(&train[i], i, epoch, step, config.augment))
                .collect::<Result<Vec<_>>>()?;
            let input = Tensor::from_planes(&prepared.iter().map(|p| &p.input).collect::<Vec<_>>())?;
            let output = model.forward_train(&input).to_planes();
            let scale = 1.0 / prepared.len() as f64;
            let mut grads = Vec::with_capacity(prepared.len());
            let mut reports = Vec::with_capacity(prepared.len());
            for (o, p) in output.iter().zip(&prepared) {
                let mut g = ImagePlane::zeros(o.height(), o.width(), o.channels());
                reports.push(ctx.loss(o, p, Some(&mut g))?);
                scale_plane(&mut g, scale);
                grads.push(g);
            }
            let report = LossReport::mean(&reports);
            if !report.l_total.is_finite() {
                if let Some(dir) = &opts.out_dir {
                    write_diagnostic(dir, tag, epoch, b, prepared[0].mask_seed);
                }
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    mask_seed: prepared[0].mask_seed,
                });
            }
            let no_signal = kind == StepKind::GuidedInpaint && report.road_pixel_count == Some(0);
            model.zero_grad();
            if !no_signal {
                model.backward(&Tensor::from_planes(&grads.iter().collect::<Vec<_>>())?);
                let mut params = model.parameters_mut();
                if let Some(c) = config.grad_clip {
                    clip_grad_norm(&mut params, c);
                }
                optimizer.step(params, lr);
            }
            let masks: Vec<&BinaryMask> = prepared.iter().filter_map(|p| p.mask.as_ref()).collect();
            let (cluster_count, cluster_size) = match kind {
                StepKind::Segmentation => (None, None),
                _ => {
                    let (c, s) = ctx.cluster_spec(epoch);
                    (Some(c), Some(s))
                }
            };
            let finite = |v: f64| v.is_finite().then_some(v);
            log.push(LogRow {
                kind: RowKind::Batch,
                step: tag,
                epoch,
                batch: Some(b),
                lr,
                l_id: finite(report.l_id),
                l_fill: finite(report.l_fill),
                l_total: report.l_total,
                masked_fraction: (!masks.is_empty())
                    .then(|| masks.iter().map(|m| masked_fraction(m)).sum::<f64>() / masks.len() as f64),
                cluster_count,
                cluster_size,
                val_metric: None,
            });
            epoch_reports.push(report);
        }
        let metric = validation_metric(&ctx, model, val, epoch)?;
        history.push(metric);
        let mean = LossReport::mean(&epoch_reports);
        let batch_rows: Vec<&LogRow> = log.batches().filter(|r| r.epoch == epoch).collect();
        let mean_fraction = batch_rows
            .iter()
            .filter_map(|r| r.masked_fraction)
            .fold(None, |acc: Option<(f64, usize)>, f| Some(acc.map_or((f, 1), |(s, n)| (s + f, n + 1))))
            .map(|(s, n)| s / n as f64);
        let (cc, cs) = batch_rows.first().map_or((None, None), |r| (r.cluster_count, r.cluster_size));
        let finite = |v: f64| v.is_finite().then_some(v);
        log.push(LogRow {
            kind: RowKind::Epoch,
            step: tag,
            epoch,
            batch: None,
            lr,
            l_id: finite(mean.l_id),
            l_fill: finite(mean.l_fill),
            l_total: mean.l_total,
            masked_fraction: mean_fraction,
            cluster_count: cc,
            cluster_size: cs,
            val_metric: metric,
        });
        log::info!("{tag} epoch {epoch}: loss {:.5} val {:?}", mean.l_total, metric);
        let done = epoch + 1;
        if config.lr_milestones.contains(&done) && done < config.epochs {
            let b = bundle_for(model, &ctx, &optimizer, done)?;
            save(&b, &format!("{tag}_e{done}.ckpt"))?;
        }
    }

    let completed = end;
    let bundle = bundle_for(model, &ctx, &optimizer, completed)?;
    if completed >= config.epochs {
        checkpoint = save(&bundle, &format!("{tag}.ckpt"))?;
    } else {
        checkpoint = save(&bundle, &format!("{tag}_resume_e{completed}.ckpt"))?.or(checkpoint);
    }
    if let Some(dir) = &opts.out_dir {
        let path = dir.join(format!("{tag}_log.tsv"));
        if start > 0 && path.exists() {
            let mut prior = TrainingLog::load(&path)?;
            prior.rows.retain(|r| r.epoch < start);
            prior.extend(log.clone());
            prior.save(&path)?;
        } else {
            log.save(&path)?;
        }
    }
    Ok(StepOutcome {
        step: tag,
        bundle,
        checkpoint,
        log,
        history,
        warnings,
        completed_epochs: completed,
    })
}

fn require_channels<M: TrainableModel>(model: &M, want: usize, what: &str) -> Result<()> {
    if model.out_channels() != want {
        return Err(Error::ContractViolation(format!(
            "{what} needs a {want}-channel output layer, model has {}",
            model.out_channels()
        )));
    }
    Ok(())
}

/// Self-supervised inpainting on images; labels, if any, are ignored.
pub fn run_step1<M: TrainableModel>(
    config: &StepConfig,
    model: &mut M,
    train: &[Sample],
    val: &[Sample],
    opts: &RunOptions,
) -> Result<StepOutcome> {
    require_channels(model, RGB_CHANNELS, "inpainting")?;
    self::train(config, StepKind::Inpaint, model, train, val, opts)
}

/// Inpainting with both losses restricted to road pixels. Every sample needs
/// a label.
pub fn run_step2<M: TrainableModel>(
    config: &StepConfig,
    model: &mut M,
    train: &[Sample],
    val: &[Sample],
    opts: &RunOptions,
) -> Result<StepOutcome> {
    require_channels(model, RGB_CHANNELS, "guided inpainting")?;
    self::train(config, StepKind::GuidedInpaint, model, train, val, opts)
}

/// Supervised fine-tuning with per-pixel cross-entropy. The output layer
/// must already have `num_classes` channels.
pub fn run_step3<M: TrainableModel>(
    config: &StepConfig,
    model: &mut M,
    train: &[Sample],
    val: &[Sample],
    num_classes: usize,
    opts: &RunOptions,
) -> Result<StepOutcome> {
    if num_classes == 0 {
        return Err(Error::InvalidClassCount(0));
    }
    require_channels(model, num_classes, "segmentation")?;
    self::train(config, StepKind::Segmentation, model, train, val, opts)
}
