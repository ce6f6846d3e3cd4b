mod common;

use std::path::PathBuf;

use common::*;
use proptest::prelude::*;
use roadfill::data::synthetic::{generate_dataset, write_dataset, SyntheticDatasetSpec};
use roadfill::data::{ChannelStats, Style, SubsetLevel};
use roadfill::evaluation::{
    emit_report, evaluate, iou, matrix_tsv, parse_matrix_tsv, predict_to_classes, run_matrix, summarize, Arm, Domain,
    IouAccumulator, MatrixRowSpec, MatrixSpec, ReportOptions, RowOutcome, NORMALIZATION_KEY,
};
use roadfill::masking::MaskSchedule;
use roadfill::model::{CheckpointBundle, StepTag, ToyUNet};
use roadfill::{ClassMap, ImagePlane};

#[test]
fn exhaustive_two_by_two_iou_matches_oracle() {
    let maps = all_class_maps(2, 2, 3);
    for p in &maps {
        for l in &maps {
            assert!(iou_deviation(p, l, 3).unwrap() < 1e-10);
        }
    }
}

#[test]
fn dataset_iou_pools_counts() {
    let mut r = rng(1);
    let pairs: Vec<(ClassMap, ClassMap)> = (0..20)
        .map(|_| (random_class_map(&mut r, 5, 5, 2), random_class_map(&mut r, 5, 5, 2)))
        .collect();
    let mut acc = IouAccumulator::new(&[1]);
    let (mut inter, mut union) = (0, 0);
    let mut per_image = Vec::new();
    for (p, l) in &pairs {
        acc.add(p, l).unwrap();
        for (a, b) in p.classes().iter().zip(l.classes()) {
            inter += (*a == 1 && *b == 1) as u64;
            union += (*a == 1 || *b == 1) as u64;
        }
        if let Some(v) = iou_oracle(p, l, 1) {
            per_image.push(v);
        }
    }
    let report = acc.report();
    assert!((report.iou(1).unwrap() - inter as f64 / union as f64).abs() < 1e-12);
    let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    assert!((report.per_class[&1].per_image_mean.unwrap() - mean).abs() < 1e-12);
    assert_eq!(report.n_images, 20);
}

#[test]
fn empty_class_is_undefined() {
    let zero = ClassMap::filled(3, 3, 0);
    let mut acc = IouAccumulator::new(&[1, 2]);
    acc.add(&zero, &zero).unwrap();
    let report = acc.report();
    assert_eq!(report.iou(1), None);
    assert_eq!(report.undefined_classes(), vec![1, 2]);
    assert_eq!(report.mean_iou(), None);
}

#[test]
fn softmax_prediction_takes_argmax() {
    let logits = ImagePlane::from_vec(1, 2, 3, vec![0.1, 2.0, -1.0, 5.0, 5.0, 0.0]).unwrap();
    assert_eq!(predict_to_classes(&logits, 0.5).classes(), &[1, 0]);
}

fn write_val_set(dir: &std::path::Path) -> PathBuf {
    let spec = SyntheticDatasetSpec {
        canvas: 32,
        train_scenes: 0,
        val_scenes: 4,
        seed: 3,
        train_styles: Style::ALL.to_vec(),
        val_styles: Style::ALL.to_vec(),
    };
    write_dataset(&generate_dataset(&spec).unwrap(), 32, dir).unwrap();
    dir.join("manifest.tsv")
}

fn write_checkpoint(path: &std::path::Path, seed: u64) {
    let model = ToyUNet::with_base(3, 1, 4, seed);
    let mut bundle = CheckpointBundle::from_model(&model, StepTag::Step3, "").unwrap();
    let stats = ChannelStats::new(vec![120.0; 3], vec![50.0; 3]).unwrap();
    bundle.metadata.insert(NORMALIZATION_KEY.into(), stats.to_string());
    bundle.save(path).unwrap();
}

#[test]
fn matrix_marks_missing_checkpoints_and_scores_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    let val = write_val_set(&dir.path().join("val"));
    write_checkpoint(&dir.path().join("a0.ckpt"), 0);
    write_checkpoint(&dir.path().join("a1.ckpt"), 1);
    let row = |arm, checkpoints: &[&str]| MatrixRowSpec {
        level: SubsetLevel::Quarter,
        domain: Domain::InDomain,
        arm,
        train_size: 64,
        checkpoints: checkpoints.iter().map(PathBuf::from).collect(),
        seeds: None,
    };
    let spec = MatrixSpec {
        validation: val.strip_prefix(dir.path()).unwrap().to_path_buf(),
        holdout_validation: None,
        threshold: 0.5,
        rows: vec![row(Arm::Baseline, &["a0.ckpt", "a1.ckpt"]), row(Arm::FullMethod, &["a0.ckpt", "gone.ckpt"])],
    };
    let spec = MatrixSpec::from_toml(&spec.to_toml()).unwrap();
    let matrix = run_matrix(&spec, dir.path()).unwrap();
    assert_eq!(matrix.len(), 2);
    assert!(!matrix.rows()[0].is_failed());
    assert_eq!(matrix.rows()[0].per_seed(1).len(), 2);
    match &matrix.rows()[1].outcome {
        RowOutcome::Failed(msg) => assert!(msg.contains("gone.ckpt")),
        other => panic!("expected failure, got {other:?}"),
    }

    let rows = summarize(&matrix);
    let table = matrix_tsv(&rows);
    assert_eq!(parse_matrix_tsv(&table, &dir.path().join("m.tsv")).unwrap(), rows);
    let opts = ReportOptions {
        schedule: MaskSchedule::table(),
        mask_epochs: vec![0, 50],
        mask_canvas: 128,
        seed: 0,
    };
    let files = emit_report(&rows, &opts, &dir.path().join("report")).unwrap();
    assert!(files.table.exists() && files.plot.exists() && files.mask_figure.exists());
}

#[test]
fn evaluation_requires_labels() {
    let dir = tempfile::tempdir().unwrap();
    let val = write_val_set(dir.path());
    let mut samples = roadfill::evaluation::load_manifest_samples(&val).unwrap();
    samples[1].label = None;
    let stats = ChannelStats::new(vec![0.0; 3], vec![1.0; 3]).unwrap();
    let model = ToyUNet::with_base(3, 1, 4, 0);
    assert!(matches!(
        evaluate(&model, &samples, &stats, 0.5),
        Err(roadfill::Error::MissingLabel(_))
    ));
}

fn pair() -> impl Strategy<Value = (ClassMap, ClassMap)> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(0u8..3, h * w),
            prop::collection::vec(0u8..3, h * w),
        )
            .prop_map(move |(a, b)| (ClassMap::from_vec(h, w, a).unwrap(), ClassMap::from_vec(h, w, b).unwrap()))
    })
}

proptest! {
    #[test]
    fn iou_matches_oracle((p, l) in pair()) {
        prop_assert!(iou_deviation(&p, &l, 3).unwrap() < 1e-10);
    }

    #[test]
    fn iou_is_symmetric_and_bounded((p, l) in pair(), class in 0u8..3) {
        let a = iou(&p, &l, class).unwrap();
        prop_assert_eq!(a, iou(&l, &p, class).unwrap());
        if let Some(v) = a {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if let Some(v) = iou(&l, &l, class).unwrap() {
            prop_assert_eq!(v, 1.0);
        }
    }
}
