mod common;

use common::*;
use proptest::prelude::*;
use roadfill::model::{to_inpainting_head, SegmentationModel, StepTag, ToyUNet};
use roadfill::trainer::{
    finetune, initial_model, pretrain, run_pipeline, run_step1, run_step2, run_step3, OptimizerKind,
    PipelineConfig, PipelineMode, Profile, RowKind, RunLineage, RunOptions, StepConfig, StepKind, TrainingLog,
};
use roadfill::{ClassMap, Error};

#[test]
fn full_pipeline_smoke() {
    let (mut cfg, data) = tiny_pipeline(0);
    let dir = tempfile::tempdir().unwrap();
    cfg.out_dir = Some(dir.path().to_path_buf());
    let out = run_pipeline(&cfg, PipelineMode::Full, &data).unwrap();
    assert_eq!(out.lineage.steps(), vec![StepTag::Step1, StepTag::Step2, StepTag::Step3]);
    assert_eq!(out.model.out_channels(), 1);
    let metric = out.final_metric().unwrap();
    assert!((0.0..=1.0).contains(&metric));
    for s in &out.steps {
        assert!(s.log.rows.iter().all(|r| r.l_total.is_finite()));
    }
    for name in ["step1.ckpt", "step2.ckpt", "step3.ckpt", "step1_log.tsv", "lineage.tsv"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let lineage = RunLineage::load(&dir.path().join("lineage.tsv")).unwrap();
    assert_eq!(lineage, out.lineage);
    let log = TrainingLog::load(&dir.path().join("step1_log.tsv")).unwrap();
    assert_eq!(log, out.steps[0].log);
}

#[test]
fn lineage_follows_the_mode() {
    let (cfg, data) = tiny_pipeline(1);
    let s1 = pretrain(&cfg, &data).unwrap();
    let full = finetune(&cfg, PipelineMode::Full, Some(&s1), &data).unwrap();
    let skip = finetune(&cfg, PipelineMode::SkipGuided, Some(&s1), &data).unwrap();
    let scratch = finetune(&cfg, PipelineMode::Scratch, None, &data).unwrap();
    for (out, mode) in [(&full, PipelineMode::Full), (&skip, PipelineMode::SkipGuided), (&scratch, PipelineMode::Scratch)] {
        assert_eq!(out.lineage.steps(), mode.steps().to_vec());
    }
    assert_eq!(full.lineage.entries()[0], skip.lineage.entries()[0]);
    assert!(finetune(&cfg, PipelineMode::Full, None, &data).is_err());
}

#[test]
fn same_seed_same_logs() {
    let (cfg, data) = tiny_pipeline(2);
    let a = run_pipeline(&cfg, PipelineMode::Full, &data).unwrap();
    let b = run_pipeline(&cfg, PipelineMode::Full, &data).unwrap();
    for (x, y) in a.steps.iter().zip(&b.steps) {
        assert_eq!(x.log.to_tsv(), y.log.to_tsv());
        assert_eq!(x.bundle.digest(), y.bundle.digest());
    }
    assert_eq!(a.final_metric(), b.final_metric());
    let (cfg, _) = tiny_pipeline(3);
    let c = run_pipeline(&cfg, PipelineMode::Full, &data).unwrap();
    assert_ne!(a.steps[0].log.to_tsv(), c.steps[0].log.to_tsv());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (cfg, data) = tiny_pipeline(4);
    let step1 = cfg.step1.shortened(4).unwrap();
    let fresh = || to_inpainting_head(initial_model(&cfg), 9).unwrap();
    let opts = |dir: &std::path::Path| {
        let mut o = RunOptions::new(cfg.seed, data.stats.clone());
        o.out_dir = Some(dir.to_path_buf());
        o
    };

    let whole_dir = tempfile::tempdir().unwrap();
    let whole = run_step1(&step1, &mut fresh(), &data.unlabeled, &data.validation, &opts(whole_dir.path())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = opts(dir.path());
    first.stop_after = Some(2);
    let part = run_step1(&step1, &mut fresh(), &data.unlabeled, &data.validation, &first).unwrap();
    assert_eq!(part.completed_epochs, 2);
    assert!(!part.finished(&step1));
    let mut second = opts(dir.path());
    second.resume = Some(part.bundle.clone());
    let rest = run_step1(&step1, &mut fresh(), &data.unlabeled, &data.validation, &second).unwrap();

    assert_eq!(rest.bundle.digest(), whole.bundle.digest());
    let a = std::fs::read_to_string(whole_dir.path().join("step1_log.tsv")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("step1_log.tsv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn learning_rate_follows_milestones_in_the_log() {
    let (mut cfg, data) = tiny_pipeline(5);
    let mut step = cfg.step1.shortened(6).unwrap();
    step.lr = 0.01;
    step.lr_gamma = 0.1;
    step.lr_milestones = vec![2, 4];
    cfg.step1 = step.clone();
    let out = pretrain(&cfg, &data).unwrap();
    let lrs: Vec<f64> = out.log.epochs().map(|r| r.lr).collect();
    let want = [0.01, 0.01, 0.001, 0.001, 0.0001, 0.0001];
    assert_eq!(lrs.len(), want.len());
    for (a, b) in lrs.iter().zip(want) {
        assert!((a - b).abs() < 1e-15, "{lrs:?}");
    }
    for r in out.log.batches() {
        assert_eq!(r.lr, step.lr_at(r.epoch));
        assert_eq!(r.kind, RowKind::Batch);
    }
}

#[test]
fn overfits_one_batch() {
    let (_, data) = tiny_pipeline(6);
    let mut step = StepConfig::spin(StepKind::Segmentation);
    step.epochs = 200;
    step.lr_milestones = vec![];
    step.optimizer = OptimizerKind::Adam;
    step.lr = 0.01;
    step.weight_decay = 0.0;
    step.batch_size = 2;
    step.augment = false;
    let batch = &data.labeled[..2];
    let mut model = ToyUNet::with_base(3, 1, 8, 0);
    let opts = RunOptions::new(0, data.stats.clone());
    let out = run_step3(&step, &mut model, batch, batch, 1, &opts).unwrap();
    let losses: Vec<f64> = out.log.epochs().map(|r| r.l_total).collect();
    assert!(losses.last().unwrap() < &(0.1 * losses[0]), "{} -> {}", losses[0], losses.last().unwrap());
}

#[test]
fn missing_labels_are_errors() {
    let (cfg, data) = tiny_pipeline(7);
    let mut labeled = data.labeled.clone();
    labeled[3].label = None;
    let opts = RunOptions::new(0, data.stats.clone());
    let mut rgb = to_inpainting_head(initial_model(&cfg), 1).unwrap();
    assert!(matches!(
        run_step2(&cfg.step2, &mut rgb, &labeled, &[], &opts),
        Err(Error::MissingLabel(_))
    ));
    let mut seg = initial_model(&cfg);
    assert!(matches!(
        run_step3(&cfg.step3, &mut seg, &labeled, &[], 1, &opts),
        Err(Error::MissingLabel(_))
    ));
    // step 1 ignores labels entirely
    run_step1(&cfg.step1.shortened(1).unwrap(), &mut rgb, &labeled, &[], &opts).unwrap();
}

#[test]
fn roadless_labels_warn_and_leave_weights_alone() {
    let (cfg, data) = tiny_pipeline(8);
    let mut labeled = data.labeled.clone();
    for s in &mut labeled {
        let l = s.label.as_ref().unwrap();
        s.label = Some(ClassMap::filled(l.height(), l.width(), 0));
    }
    let opts = RunOptions::new(0, data.stats.clone());
    let mut model = to_inpainting_head(initial_model(&cfg), 1).unwrap();
    let before = model.clone();
    let out = run_step2(&cfg.step2, &mut model, &labeled, &[], &opts).unwrap();
    assert_eq!(out.warnings.len(), 1);
    assert!(out.log.rows.iter().all(|r| r.l_total == 0.0));
    let same = before
        .parameters()
        .iter()
        .zip(model.parameters())
        .all(|((_, a), (_, b))| a.value == b.value);
    assert!(same);
}

#[test]
fn wrong_head_is_a_contract_violation() {
    let (cfg, data) = tiny_pipeline(9);
    let opts = RunOptions::new(0, data.stats.clone());
    let mut seg = initial_model(&cfg);
    assert!(matches!(
        run_step1(&cfg.step1, &mut seg, &data.unlabeled, &[], &opts),
        Err(Error::ContractViolation(_))
    ));
    let mut rgb = to_inpainting_head(initial_model(&cfg), 1).unwrap();
    assert!(matches!(
        run_step3(&cfg.step3, &mut rgb, &data.labeled, &[], 1, &opts),
        Err(Error::ContractViolation(_))
    ));
}

#[test]
fn desk_profile_shape() {
    let cfg = PipelineConfig::profile(Profile::Desk);
    assert_eq!((cfg.step1.epochs, cfg.step2.epochs, cfg.step3.epochs), (12, 4, 12));
    assert!(cfg.step1.mask_schedule.as_ref().unwrap().last().cluster_size <= 64);
    cfg.validate().unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn overrides_beat_file_beats_profile(file_lr in 1e-5f64..1.0, cli_lr in 1e-5f64..1.0, seed in 0u64..1000) {
        let defaults = PipelineConfig::profile(Profile::Desk);
        let file = format!("profile = \"desk\"\nseed = {seed}\n[step1]\nlr = {file_lr:?}\n");
        let from_file = PipelineConfig::from_toml_with_overrides(&file, &[]).unwrap();
        prop_assert_eq!(from_file.step1.lr, file_lr);
        prop_assert_eq!(from_file.seed, seed);
        prop_assert_eq!(from_file.step2.lr, defaults.step2.lr);
        let over = PipelineConfig::from_toml_with_overrides(&file, &[format!("step1.lr={cli_lr:?}")]).unwrap();
        prop_assert_eq!(over.step1.lr, cli_lr);
        prop_assert_eq!(over.seed, seed);
        let back = PipelineConfig::from_toml_with_overrides(&over.to_toml(), &[]).unwrap();
        prop_assert_eq!(back, over);
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    assert!(PipelineConfig::from_toml_with_overrides("[step1]\nlearning_rate = 0.1\n", &[]).is_err());
    assert!(PipelineConfig::from_toml_with_overrides("", &["step9.lr=1".into()]).is_err());
}
