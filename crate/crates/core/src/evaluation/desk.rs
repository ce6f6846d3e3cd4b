//! The synthetic desk-scale experiment: baseline, no-guided and full-method
//! arms over nested training subsets and seeds, plus an optional held-out
//! style.

use std::collections::BTreeMap;
use std::time::Instant;

use super::matrix::{Arm, Domain, ExperimentMatrix, MatrixRow, RowOutcome, Variant};
use super::{evaluate, IoUReport};
use crate::data::synthetic::{generate_dataset, scene_samples, scenes_manifest, SyntheticDatasetSpec};
use crate::data::{subset_halving, Split, Style, SubsetLevel};
use crate::error::Result;
use crate::trainer::{finetune, pretrain, PipelineConfig, PipelineData, PipelineMode, Profile, TrainingLog};

#[derive(Debug, Clone, PartialEq)]
pub struct DeskSpec {
    pub canvas: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Seed of the scene generator and of the subset ranking; fixed across runs.
    pub data_seed: u64,
    /// Training seeds.
    pub seeds: Vec<u64>,
    /// `(level, arms)` pairs for the in-domain split.
    pub in_domain: Vec<(SubsetLevel, Vec<Arm>)>,
    /// Same, trained on styles A to C and validated on style D.
    pub holdout: Vec<(SubsetLevel, Vec<Arm>)>,
    pub config: PipelineConfig,
}

impl DeskSpec {
    /// 256/128/64 training scenes and 64 validation scenes at 64 px, three
    /// seeds, all arms on the quarter split and baseline/full elsewhere.
    pub fn standard() -> Self {
        let two = vec![Arm::Baseline, Arm::FullMethod];
        DeskSpec {
            canvas: 64,
            train_scenes: 256,
            val_scenes: 64,
            data_seed: 2024,
            seeds: vec![0, 1, 2],
            in_domain: vec![
                (SubsetLevel::Full, two.clone()),
                (SubsetLevel::Half, two.clone()),
                (SubsetLevel::Quarter, Arm::ALL.to_vec()),
            ],
            holdout: vec![(SubsetLevel::Quarter, two)],
            config: PipelineConfig::profile(Profile::Desk),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeskRun {
    pub seed: u64,
    pub variant: Variant,
    pub arm: Arm,
    pub logs: Vec<TrainingLog>,
    pub report: IoUReport,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct DeskResults {
    pub matrix: ExperimentMatrix,
    pub runs: Vec<DeskRun>,
}

fn mode(arm: Arm) -> PipelineMode {
    match arm {
        Arm::Baseline => PipelineMode::Scratch,
        Arm::NoGuided => PipelineMode::SkipGuided,
        Arm::FullMethod => PipelineMode::Full,
    }
}

/// Runs every configured arm and scores it on the validation scenes.
/// Step 1 runs once per seed and domain and is shared by the arms.
pub fn run_desk_experiment(spec: &DeskSpec) -> Result<DeskResults> {
    let mut runs = Vec::new();
    let mut sizes: BTreeMap<Variant, usize> = BTreeMap::new();
    for (domain, plan) in [(Domain::InDomain, &spec.in_domain), (Domain::Holdout, &spec.holdout)] {
        if plan.is_empty() {
            continue;
        }
        let (train_styles, val_styles) = match domain {
            Domain::InDomain => (Style::ALL.to_vec(), Style::ALL.to_vec()),
            Domain::Holdout => (vec![Style::A, Style::B, Style::C], vec![Style::D]),
        };
        let scenes = generate_dataset(&SyntheticDatasetSpec {
            canvas: spec.canvas,
            train_scenes: spec.train_scenes,
            val_scenes: spec.val_scenes,
            seed: spec.data_seed,
            train_styles,
            val_styles,
        })?;
        let manifest = scenes_manifest(&scenes, spec.canvas).split(Split::Train);
        let train = scene_samples(scenes.iter().filter(|s| s.split == Split::Train));
        let val = scene_samples(scenes.iter().filter(|s| s.split == Split::Val));
        let full = PipelineData::new(train.clone(), train.clone(), val.clone())?;
        for &seed in &spec.seeds {
            let mut cfg = spec.config.clone();
            cfg.seed = seed;
            let needs_step1 = plan.iter().any(|(_, arms)| arms.iter().any(|&a| a != Arm::Baseline));
            let t0 = Instant::now();
            let step1 = if needs_step1 { Some(pretrain(&cfg, &full)?) } else { None };
            let step1_secs = t0.elapsed().as_secs_f64();
            for (level, arms) in plan {
                let kept = subset_halving(&manifest, *level, spec.data_seed)?;
                let ids: std::collections::HashSet<&str> = kept.source_ids().into_iter().collect();
                let labeled: Vec<_> = train.iter().filter(|s| ids.contains(s.id.as_str())).cloned().collect();
                let variant = Variant { level: *level, domain };
                sizes.insert(variant, labeled.len());
                let data = PipelineData {
                    labeled,
                    ..full.clone()
                };
                for &arm in arms {
                    let t = Instant::now();
                    let out = finetune(&cfg, mode(arm), step1.as_ref(), &data)?;
                    let report = evaluate(&out.model, &data.validation, &data.stats, cfg.threshold)?;
                    let shared = if arm == Arm::Baseline { 0.0 } else { step1_secs };
                    log::info!(
                        "seed {seed} {variant} {arm}: road IoU {:?}",
                        report.iou(1)
                    );
                    runs.push(DeskRun {
                        seed,
                        variant,
                        arm,
                        logs: out.steps.iter().map(|s| s.log.clone()).collect(),
                        report,
                        seconds: t.elapsed().as_secs_f64() + shared,
                    });
                }
            }
        }
    }
    let mut matrix = ExperimentMatrix::new();
    let mut keys: Vec<(Variant, Arm)> = runs.iter().map(|r| (r.variant, r.arm)).collect();
    keys.dedup();
    keys.sort();
    keys.dedup();
    for (variant, arm) in keys {
        let reports = runs
            .iter()
            .filter(|r| r.variant == variant && r.arm == arm)
            .map(|r| (r.seed, r.report.clone()))
            .collect();
        matrix.push(MatrixRow {
            variant,
            arm,
            train_size: sizes[&variant],
            outcome: RowOutcome::Evaluated(reports),
        })?;
    }
    Ok(DeskResults { matrix, runs })
}
