mod common;

use common::*;
use roadfill::model::{
    describe, load_checkpoint, save_checkpoint, to_inpainting_head, to_segmentation_head, CheckpointBundle,
    SegmentationModel, StepTag, Tensor, ToyUNet,
};
use roadfill::Error;

#[test]
fn head_swaps_preserve_everything_but_the_output_layer() {
    for k in [1, 2, 4] {
        let (changed, same) = head_swap_check(k, 7 + k as u64);
        assert!(changed.is_empty(), "changed: {changed:?}");
        assert!(same);
    }
}

#[test]
fn head_swaps_set_channel_counts() {
    let m = ToyUNet::with_base(3, 2, 8, 1);
    let m = to_inpainting_head(m, 2).unwrap();
    assert_eq!(m.out_channels(), 3);
    let m = to_segmentation_head(m, 5, 3).unwrap();
    assert_eq!(m.out_channels(), 5);
    assert!(matches!(
        to_segmentation_head(m, 0, 3),
        Err(Error::InvalidClassCount(0))
    ));
}

#[test]
fn forward_keeps_spatial_size() {
    let m = ToyUNet::with_base(3, 2, 4, 0);
    for (h, w) in [(64, 64), (37, 50), (128, 96), (512, 512)] {
        let x = Tensor::zeros(1, 3, h, w);
        assert_eq!(m.forward(&x).dims(), [1, 2, h, w]);
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = ToyUNet::with_base(3, 3, 8, 42);
    let saved = save_checkpoint(&m, StepTag::Step1, "abc", &path).unwrap();
    let loaded = CheckpointBundle::load(&path).unwrap();
    assert_eq!(saved, loaded);
    assert_eq!(loaded.step_tag, StepTag::Step1);
    assert_eq!(loaded.head_channels, 3);
    let rebuilt = ToyUNet::from_bundle(&loaded).unwrap();
    let x = Tensor::from_planes(&[&random_plane(&mut rng(1), 16, 16, 3)]).unwrap();
    assert_eq!(rebuilt.forward(&x), m.forward(&x));
}

#[test]
fn loading_into_a_different_head_keeps_fresh_output_layer() {
    let rgb = ToyUNet::with_base(3, 3, 8, 5);
    let bundle = CheckpointBundle::from_model(&rgb, StepTag::Step1, "").unwrap();
    let mut seg = ToyUNet::with_base(3, 1, 8, 6);
    let fresh_head: Vec<_> = seg
        .parameters()
        .iter()
        .filter(|(n, _)| seg.is_final_layer_param(n))
        .map(|(_, p)| p.value.clone())
        .collect();
    let report = load_checkpoint(&bundle, &mut seg).unwrap();
    assert!(report.reinitialized.iter().all(|n| n.starts_with("head.")));
    assert_eq!(report.reinitialized.len(), 2);
    let head_now: Vec<_> = seg
        .parameters()
        .iter()
        .filter(|(n, _)| seg.is_final_layer_param(n))
        .map(|(_, p)| p.value.clone())
        .collect();
    assert_eq!(fresh_head, head_now);
}

#[test]
fn shape_conflicts_outside_the_head_are_errors() {
    let small = ToyUNet::with_base(3, 3, 4, 0);
    let bundle = CheckpointBundle::from_model(&small, StepTag::Step1, "").unwrap();
    let mut big = ToyUNet::with_base(3, 3, 8, 0);
    assert!(matches!(
        load_checkpoint(&bundle, &mut big),
        Err(Error::ParameterShape { .. })
    ));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&ToyUNet::with_base(3, 3, 4, 0), StepTag::Step2, "", &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes.truncate(n - 7);
    std::fs::write(&path, &bytes).unwrap();
    assert!(CheckpointBundle::load(&path).is_err());
}

#[test]
fn describe_lists_every_parameter() {
    let m = ToyUNet::with_base(3, 2, 4, 0);
    let text = describe(&m);
    assert_eq!(
        text.lines().filter(|l| !l.starts_with('#')).count(),
        m.parameters().len()
    );
    assert!(text.contains("final layer: head"));
}
