//! Hooks an external segmentation network needs before it can be trained by
//! this crate.
//!
//! A network is wrapped in a type implementing
//! [`SegmentationModel`](super::SegmentationModel) and
//! [`TrainableModel`](super::TrainableModel). The wrapper must
//!
//! * expose every trainable tensor under a stable name,
//! * name the output layer through `final_layer`, so checkpoint transfer can
//!   tell it apart from the backbone, neck and decoder,
//! * support `replace_head` and, where the original design adds a filter for
//!   RGB output, `extend_head`.
//!
//! The descriptors below record how the two reference architectures map onto
//! these hooks. Only [`ToyUNet`](super::ToyUNet) ships with an implementation.

use super::HeadAdaptation;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterDescriptor {
    pub name: &'static str,
    /// Parameter prefix of the output layer in the upstream code.
    pub final_layer: &'static str,
    pub adaptation: HeadAdaptation,
    /// Output channels of the segmentation configuration.
    pub segmentation_classes: usize,
}

/// Road-extraction network with a binary output; an extra RGB filter is
/// appended to the last layer of the segmentation branch for inpainting.
pub const SPIN_ROADMAPPER: AdapterDescriptor = AdapterDescriptor {
    name: "spin-roadmapper",
    final_layer: "segmentation_branch.final",
    adaptation: HeadAdaptation::Extend,
    segmentation_classes: 1,
};

/// Three-class (road, building, background) U-Net. Its output already has
/// three channels, so no architectural change is needed for inpainting.
pub const EMEK_UNET: AdapterDescriptor = AdapterDescriptor {
    name: "emek-unet",
    final_layer: "outc",
    adaptation: HeadAdaptation::Replace,
    segmentation_classes: 3,
};

pub const ALL: [AdapterDescriptor; 2] = [SPIN_ROADMAPPER, EMEK_UNET];
